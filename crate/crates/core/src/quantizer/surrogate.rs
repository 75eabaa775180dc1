//! Radius surrogate `z_q = z + r(ẑ, z) · sg[v]` and its explicit backward.

use serde::{Deserialize, Serialize};

use crate::codebook::Assignment;
use crate::error::{Error, Result};
use crate::numerics::{dot, Mat};
use crate::radius::{eval_radius, RadiusEval, RadiusSpec};
use crate::scalar::Scalar;

/// Which frozen direction multiplies the radius.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurrogateForm {
    /// `v = s = (ẑ − z)/δ`; the forward value is `z + r·s`.
    #[default]
    UnitDirection,
    /// `v = (ẑ − z)/r`; the forward value is exactly `ẑ`.
    RatioForm,
}

/// Per-sample state saved by the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateContext<T> {
    pub assignment: Assignment<T>,
    pub radius: RadiusEval<T>,
    pub form: SurrogateForm,
    pub z: Vec<T>,
    pub z_q: Vec<T>,
    /// The stop-gradient vector `v`.
    pub frozen: Vec<T>,
    /// `δ = 0` (or `r = 0`): the surrogate passes gradients straight through.
    pub degenerate: bool,
}

/// Result of [`surrogate_backward`] for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateGrad<T> {
    pub grad_z: Vec<T>,
    /// Gradient routed to the selected transformed codeword.
    pub code_signal: Vec<T>,
    /// Alignment `a = ⟨g, v⟩`.
    pub a: T,
}

pub fn surrogate_forward<T: Scalar>(
    z: &[T],
    assignment: &Assignment<T>,
    spec: &RadiusSpec<T>,
    form: SurrogateForm,
) -> Result<SurrogateContext<T>> {
    if z.len() != assignment.zhat.len() {
        return Err(Error::shape(
            "surrogate_forward",
            assignment.zhat.len(),
            z.len(),
        ));
    }
    let radius = eval_radius(spec, &assignment.zhat, z)?;
    let degenerate = !(assignment.gap > T::zero()) || !(radius.value > T::zero());
    let (frozen, z_q) = if degenerate {
        (vec![T::zero(); z.len()], z.to_vec())
    } else {
        let frozen: Vec<T> = match form {
            SurrogateForm::UnitDirection => assignment.direction.clone(),
            SurrogateForm::RatioForm => assignment
                .zhat
                .iter()
                .zip(z)
                .map(|(&c, &x)| (c - x) / radius.value)
                .collect(),
        };
        let z_q = match form {
            SurrogateForm::UnitDirection => z
                .iter()
                .zip(&frozen)
                .map(|(&x, &v)| x + radius.value * v)
                .collect(),
            SurrogateForm::RatioForm => assignment.zhat.clone(),
        };
        (frozen, z_q)
    };
    Ok(SurrogateContext {
        assignment: assignment.clone(),
        radius,
        form,
        z: z.to_vec(),
        z_q,
        frozen,
        degenerate,
    })
}

/// `grad_z = g + a·∂r/∂z`, `code_signal = a·∂r/∂ẑ` with `a = ⟨g, v⟩`; for
/// radial radii and the unit form this is `g − ρ′ a s` and `ρ′ a s`.
pub fn surrogate_backward<T: Scalar>(
    ctx: &SurrogateContext<T>,
    upstream: &[T],
) -> Result<SurrogateGrad<T>> {
    if upstream.len() != ctx.z.len() {
        return Err(Error::shape(
            "surrogate_backward",
            ctx.z.len(),
            upstream.len(),
        ));
    }
    if ctx.degenerate {
        return Ok(SurrogateGrad {
            grad_z: upstream.to_vec(),
            code_signal: vec![T::zero(); upstream.len()],
            a: T::zero(),
        });
    }
    let a = dot(upstream, &ctx.frozen);
    let grad_z = upstream
        .iter()
        .zip(&ctx.radius.grad_z)
        .map(|(&g, &r)| g + a * r)
        .collect();
    let code_signal = ctx.radius.grad_zhat.iter().map(|&r| a * r).collect();
    Ok(SurrogateGrad {
        grad_z,
        code_signal,
        a,
    })
}

/// Materialized `J = ∂z_q/∂z = I + v (∂r/∂z)ᵀ`.
pub fn jacobian_dense<T: Scalar>(ctx: &SurrogateContext<T>) -> Mat<T> {
    let d = ctx.z.len();
    let mut j = Mat::identity(d);
    if ctx.degenerate {
        return j;
    }
    for r in 0..d {
        for c in 0..d {
            j[(r, c)] += ctx.frozen[r] * ctx.radius.grad_z[c];
        }
    }
    j
}

/// Stacks per-sample code signals into `G` (`K × d`): row `i` is the sum of
/// the signals of samples assigned to code `i`.
pub fn accumulate_code_signals<T: Scalar>(
    k: usize,
    contexts: &[SurrogateContext<T>],
    signals: &Mat<T>,
) -> Result<Mat<T>> {
    if contexts.len() != signals.rows() {
        return Err(Error::shape(
            "accumulate_code_signals",
            contexts.len(),
            signals.rows(),
        ));
    }
    let mut g = Mat::zeros(k, signals.cols());
    for (ctx, s) in contexts.iter().zip(signals.iter_rows()) {
        let i = ctx.assignment.index;
        if i >= k {
            return Err(Error::shape(
                "accumulate_code_signals",
                format!("index < {k}"),
                i,
            ));
        }
        for (o, &x) in g.row_mut(i).iter_mut().zip(s) {
            *o += x;
        }
    }
    Ok(g)
}

/// Batched backward: encoder gradients (`B × d`), stacked code signals `G`
/// (`K × d`) and alignment scalars.
pub fn backward_batch<T: Scalar>(
    k: usize,
    contexts: &[SurrogateContext<T>],
    upstream: &Mat<T>,
) -> Result<(Mat<T>, Mat<T>, Vec<T>)> {
    if contexts.len() != upstream.rows() {
        return Err(Error::shape(
            "backward_batch",
            contexts.len(),
            upstream.rows(),
        ));
    }
    let d = upstream.cols();
    let mut grad_z = Mat::zeros(contexts.len(), d);
    let mut signals = Mat::zeros(contexts.len(), d);
    let mut a_values = Vec::with_capacity(contexts.len());
    for (p, ctx) in contexts.iter().enumerate() {
        let g = surrogate_backward(ctx, upstream.row(p))?;
        grad_z.set_row(p, &g.grad_z);
        signals.set_row(p, &g.code_signal);
        a_values.push(g.a);
    }
    let g = accumulate_code_signals(k, contexts, &signals)?;
    Ok((grad_z, g, a_values))
}
