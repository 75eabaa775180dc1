//! Backward pass through the codebook transforms.

use crate::codebook::{TransformForward, TransformKind, TransformSpec};
use crate::error::{Error, Result};
use crate::numerics::{dot, Mat};
use crate::scalar::Scalar;

/// Parameter gradients of a transform. Groups a kind does not use are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformGrads<T: Scalar> {
    pub w: Option<Mat<T>>,
    pub a: Option<Mat<T>>,
    pub b: Option<Mat<T>>,
    pub u1: Option<Mat<T>>,
    pub v1: Option<Mat<T>>,
    /// Gradient with respect to the raw codebook.
    pub e: Mat<T>,
}

impl<T: Scalar> TransformGrads<T> {
    /// Frobenius norm of the mixer-factor gradients (`A`, `B` or `U1`, `V1`).
    pub fn mixer_norm(&self) -> T {
        [&self.a, &self.b, &self.u1, &self.v1]
            .iter()
            .filter_map(|m| m.as_ref())
            .map(|m| m.frobenius().powi(2))
            .sum::<T>()
            .sqrt()
    }

    pub fn w_norm(&self) -> T {
        self.w.as_ref().map_or(T::zero(), |m| m.frobenius())
    }

    pub fn is_finite(&self) -> bool {
        [&self.w, &self.a, &self.b, &self.u1, &self.v1]
            .iter()
            .filter_map(|m| m.as_ref())
            .all(|m| m.is_finite())
            && self.e.is_finite()
    }
}

/// Pulls `G = ∂L/∂E′` back to every transform parameter and to `E`.
///
/// `fwd` must come from [`crate::codebook::transform_forward`] on the same
/// `spec` and `e`.
pub fn transform_backward<T: Scalar>(
    g: &Mat<T>,
    e: &Mat<T>,
    spec: &TransformSpec<T>,
    fwd: &TransformForward<T>,
) -> Result<TransformGrads<T>> {
    if g.shape() != e.shape() || fwd.out.shape() != e.shape() {
        return Err(Error::shape(
            "transform_backward",
            format!("{:?}", e.shape()),
            format!("G {:?}, E′ {:?}", g.shape(), fwd.out.shape()),
        ));
    }
    let g1 = if spec.row_normalize {
        normalize_backward(g, &fwd.out, &fwd.pre_norm_norms)
    } else {
        g.clone()
    };
    if spec.kind == TransformKind::Identity {
        return Ok(TransformGrads {
            w: None,
            a: None,
            b: None,
            u1: None,
            v1: None,
            e: g1,
        });
    }

    let grad_w = fwd.pre_w.t_matmul(&g1)?;
    let g_pre_w = g1.matmul_t(&spec.w)?;

    match spec.kind {
        TransformKind::LinearLowRank | TransformKind::LowRankNormalized => {
            let g_mixed = if spec.kind == TransformKind::LowRankNormalized {
                let mixed = fwd
                    .mixed
                    .as_ref()
                    .expect("low-rank normalized forward keeps A(BᵀE)");
                smooth_normalize_backward(&g_pre_w, mixed, &fwd.smooth_scale)
            } else {
                g_pre_w
            };
            let bte = fwd.bte.as_ref().expect("low-rank forward keeps BᵀE");
            let grad_a = g_mixed.matmul_t(bte)?;
            let grad_t1 = spec.a.t_matmul(&g_mixed)?;
            let grad_b = e.matmul_t(&grad_t1)?;
            let grad_e = spec.b.matmul(&grad_t1)?;
            Ok(TransformGrads {
                w: Some(grad_w),
                a: Some(grad_a),
                b: Some(grad_b),
                u1: None,
                v1: None,
                e: grad_e,
            })
        }
        TransformKind::AttentionTopK => {
            let mixer = fwd
                .mixer
                .as_ref()
                .expect("attention forward keeps its mixer");
            let n = e.rows();
            let ds = mixer.p.cols();
            let mut grad_e = Mat::zeros(n, e.cols());
            let mut grad_p = Mat::zeros(n, ds);
            let mut grad_q = Mat::zeros(n, ds);
            let inv_temp = T::one() / spec.temp;
            for i in 0..n {
                let (idx, wts) = (mixer.row_idx(i), mixer.row_weights(i));
                let gi = g_pre_w.row(i);
                // direct path: E′ row i = Σ α_ij E_j
                for (&j, &w) in idx.iter().zip(wts) {
                    for (o, &x) in grad_e.row_mut(j).iter_mut().zip(gi) {
                        *o += w * x;
                    }
                }
                // softmax over the selected logits
                let g_alpha: Vec<T> = idx.iter().map(|&j| dot(gi, e.row(j))).collect();
                let mean: T = wts.iter().zip(&g_alpha).map(|(&w, &ga)| w * ga).sum();
                for ((&j, &w), &ga) in idx.iter().zip(wts).zip(&g_alpha) {
                    let gs = w * (ga - mean) * inv_temp;
                    if gs == T::zero() {
                        continue;
                    }
                    for (o, &q) in grad_p.row_mut(i).iter_mut().zip(mixer.q.row(j)) {
                        *o += gs * q;
                    }
                    for (o, &p) in grad_q.row_mut(j).iter_mut().zip(mixer.p.row(i)) {
                        *o += gs * p;
                    }
                }
            }
            let grad_u1 = e.t_matmul(&grad_p)?;
            let grad_v1 = e.t_matmul(&grad_q)?;
            grad_e.add_scaled(&grad_p.matmul_t(&spec.u1)?, T::one())?;
            grad_e.add_scaled(&grad_q.matmul_t(&spec.v1)?, T::one())?;
            Ok(TransformGrads {
                w: Some(grad_w),
                a: None,
                b: None,
                u1: Some(grad_u1),
                v1: Some(grad_v1),
                e: grad_e,
            })
        }
        TransformKind::Identity => unreachable!("handled above"),
    }
}

/// Backward of `y = x/‖x‖` per row: `(g − ⟨g, y⟩ y)/‖x‖`; zero rows stay zero.
fn normalize_backward<T: Scalar>(g: &Mat<T>, y: &Mat<T>, norms: &[T]) -> Mat<T> {
    let mut out = Mat::zeros(g.rows(), g.cols());
    for i in 0..g.rows() {
        let n = norms[i];
        if n == T::zero() {
            continue;
        }
        let (gi, yi) = (g.row(i), y.row(i));
        let c = dot(gi, yi);
        for ((o, &gv), &yv) in out.row_mut(i).iter_mut().zip(gi).zip(yi) {
            *o = (gv - c * yv) / n;
        }
    }
    out
}

/// Backward of `y = x/σ`, `σ = √(‖x‖² + t²)`: `(g − ⟨g, x⟩ x/σ²)/σ`.
fn smooth_normalize_backward<T: Scalar>(g: &Mat<T>, x: &Mat<T>, sigma: &[T]) -> Mat<T> {
    let mut out = Mat::zeros(g.rows(), g.cols());
    for i in 0..g.rows() {
        let s = sigma[i];
        let (gi, xi) = (g.row(i), x.row(i));
        let c = dot(gi, xi) / (s * s);
        for ((o, &gv), &xv) in out.row_mut(i).iter_mut().zip(gi).zip(xi) {
            *o = (gv - c * xv) / s;
        }
    }
    out
}

/// Dense gradient with respect to `M` for `E′ = MEW` (no final normalization):
/// `G Wᵀ Eᵀ`. Equals `G W Eᵀ` when `W` is symmetric.
pub fn grad_mixer_dense<T: Scalar>(g: &Mat<T>, e: &Mat<T>, w: &Mat<T>) -> Result<Mat<T>> {
    g.matmul_t(w)?.matmul_t(e)
}

/// Dense gradient with respect to `W` for `E′ = MEW`: `Eᵀ Mᵀ G`.
pub fn grad_w_dense<T: Scalar>(g: &Mat<T>, e: &Mat<T>, m: &Mat<T>) -> Result<Mat<T>> {
    e.t_matmul(&m.t_matmul(g)?)
}
