//! Versioned JSON envelope for codebooks and transform parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::scalar::Scalar;

use super::init::CodebookState;
use super::transform::{TransformKind, TransformSpec};

pub const ENVELOPE_VERSION: u32 = 1;
pub const CODEBOOK_KIND: &str = "codebook";

/// `{"version": 1, "kind": ..., "tensors": {...}, "meta": {...}}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    deny_unknown_fields,
    bound(serialize = "T: Scalar", deserialize = "T: Scalar")
)]
pub struct Envelope<T: Scalar> {
    pub version: u32,
    pub kind: String,
    pub tensors: BTreeMap<String, Mat<T>>,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

impl<T: Scalar> Envelope<T> {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            version: ENVELOPE_VERSION,
            kind: kind.into(),
            tensors: BTreeMap::new(),
            meta: Map::new(),
        }
    }

    fn tensor(&self, name: &str) -> Result<Mat<T>> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("envelope is missing tensor `{name}`")))
    }

    fn optional_tensor(&self, name: &str) -> Mat<T> {
        self.tensors
            .get(name)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(0, 0))
    }

    fn meta_f64(&self, name: &str) -> Result<f64> {
        self.meta
            .get(name)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Config(format!("envelope meta is missing number `{name}`")))
    }
}

/// Packs a raw codebook and its transform into an envelope.
pub fn codebook_envelope<T: Scalar>(
    state: &CodebookState<T>,
    spec: &TransformSpec<T>,
) -> Envelope<T> {
    let mut env = Envelope::new(CODEBOOK_KIND);
    env.tensors.insert("E".into(), state.e.clone());
    for (name, m) in [
        ("A", &spec.a),
        ("B", &spec.b),
        ("W", &spec.w),
        ("U1", &spec.u1),
        ("V1", &spec.v1),
    ] {
        if m.rows() > 0 {
            env.tensors.insert(name.into(), m.clone());
        }
    }
    let meta = json!({
        "transform": spec.kind.name(),
        "top_k": spec.k,
        "temp": spec.temp.as_f64(),
        "norm_temp": spec.norm_temp.as_f64(),
        "tau_w": spec.tau_w.as_f64(),
        "row_normalize": spec.row_normalize,
    });
    if let Value::Object(m) = meta {
        env.meta = m;
    }
    env
}

/// Inverse of [`codebook_envelope`]; validates the decoded transform.
pub fn codebook_from_envelope<T: Scalar>(
    env: &Envelope<T>,
) -> Result<(CodebookState<T>, TransformSpec<T>)> {
    if env.version != ENVELOPE_VERSION {
        return Err(Error::Config(format!(
            "unsupported envelope version {}",
            env.version
        )));
    }
    if env.kind != CODEBOOK_KIND {
        return Err(Error::Config(format!(
            "expected a `{CODEBOOK_KIND}` envelope, got `{}`",
            env.kind
        )));
    }
    let state = CodebookState::new(env.tensor("E")?)?;
    let kind: TransformKind = env
        .meta
        .get("transform")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Config("envelope meta is missing `transform`".into()))?
        .parse()?;
    let spec = TransformSpec {
        kind,
        a: env.optional_tensor("A"),
        b: env.optional_tensor("B"),
        w: env.optional_tensor("W"),
        u1: env.optional_tensor("U1"),
        v1: env.optional_tensor("V1"),
        k: env.meta_f64("top_k")? as usize,
        temp: T::lit(env.meta_f64("temp")?),
        norm_temp: T::lit(env.meta_f64("norm_temp")?),
        tau_w: T::lit(env.meta_f64("tau_w")?),
        row_normalize: env
            .meta
            .get("row_normalize")
            .and_then(Value::as_bool)
            .unwrap_or(false),
    };
    spec.validate(state.k(), state.d())?;
    Ok((state, spec))
}

pub fn save_codebook<T: Scalar>(
    path: &Path,
    state: &CodebookState<T>,
    spec: &TransformSpec<T>,
) -> Result<()> {
    write_json(path, &codebook_envelope(state, spec))
}

pub fn load_codebook<T: Scalar>(path: &Path) -> Result<(CodebookState<T>, TransformSpec<T>)> {
    let env: Envelope<T> = serde_json::from_str(&fs::read_to_string(path)?)?;
    codebook_from_envelope(&env)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
