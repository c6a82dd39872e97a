//! Per-location prototype normalizations: softmax, sparsemax, and
//! LayerNorm followed by a winner-takes-all one-hot with a straight-through
//! gradient.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Default multiplier applied to gradients passed straight through the
/// one-hot quantization.
pub const DEFAULT_ARGMAX_GRADIENT_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Softmax,
    Sparsemax,
    Argmax,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::Softmax => "softmax",
            NormKind::Sparsemax => "sparsemax",
            NormKind::Argmax => "argmax",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(NormKind::Softmax),
            "sparsemax" => Ok(NormKind::Sparsemax),
            "argmax" => Ok(NormKind::Argmax),
            other => Err(format!("unknown normalization `{other}`")),
        }
    }
}

/// How prototype similarity scores become a per-location distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeckNormMode {
    pub kind: NormKind,
    pub argmax_gradient_scale: f64,
}

impl NeckNormMode {
    pub fn new(kind: NormKind, argmax_gradient_scale: f64) -> Result<Self> {
        if !(argmax_gradient_scale > 0.0 && argmax_gradient_scale.is_finite()) {
            return Err(Error::config(format!(
                "argmax gradient scale must be positive, got {argmax_gradient_scale}"
            )));
        }
        Ok(NeckNormMode {
            kind,
            argmax_gradient_scale,
        })
    }

    pub fn softmax() -> Self {
        Self::of(NormKind::Softmax)
    }

    pub fn sparsemax() -> Self {
        Self::of(NormKind::Sparsemax)
    }

    pub fn argmax() -> Self {
        Self::of(NormKind::Argmax)
    }

    fn of(kind: NormKind) -> Self {
        NeckNormMode {
            kind,
            argmax_gradient_scale: DEFAULT_ARGMAX_GRADIENT_SCALE,
        }
    }

    pub fn with_kind(self, kind: NormKind) -> Self {
        NeckNormMode { kind, ..self }
    }
}

/// Euclidean projection of `z` onto the probability simplex.
///
/// Sorts descending, takes the largest support size `k` with
/// `1 + k·z_(k) > Σ_{j≤k} z_(j)`, thresholds at
/// `τ = (Σ_{j≤k} z_(j) − 1) / k`, and returns `max(z − τ, 0)`.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let mut sorted = z.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support = 1;
    let mut support_sum = sorted[0];
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// Checked wrapper around [`sparsemax`].
pub fn try_sparsemax(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sparsemax input".into()));
    }
    Ok(sparsemax(z))
}

/// Vector-Jacobian product of sparsemax: on the support `g − mean_S(g)`,
/// zero elsewhere.
pub fn sparsemax_backward(output: &[f64], g: &[f64]) -> Vec<f64> {
    let (sum, count) = output
        .iter()
        .zip(g)
        .filter(|(p, _)| **p > 0.0)
        .fold((0.0, 0usize), |(s, c), (_, gi)| (s + gi, c + 1));
    let mean = sum / count.max(1) as f64;
    output
        .iter()
        .zip(g)
        .map(|(&p, &gi)| if p > 0.0 { gi - mean } else { 0.0 })
        .collect()
}

/// Index of the first maximal entry.
pub fn argmax_index(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// One-hot of the first maximal entry.
pub fn argmax_onehot(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    if !z.is_empty() {
        out[argmax_index(z)] = 1.0;
    }
    out
}

/// Records `argmax_onehot` along `axis` with a straight-through backward
/// scaled by `scale`.
pub fn argmax_onehot_ste(tape: &mut Tape, z: Var, axis: usize, scale: f64) -> Result<Var> {
    tape.argmax_ste(z, axis, scale)
}

/// Turns prototype scores into per-location distributions over the
/// prototype axis `axis`.
///
/// Softmax and sparsemax act on the raw scores. The argmax path first applies
/// LayerNorm with the given `(gain, bias)` and then the one-hot quantizer.
pub fn normalize_prototype_scores(
    tape: &mut Tape,
    scores: Var,
    mode: NeckNormMode,
    layernorm: (Var, Var),
    axis: usize,
) -> Result<Var> {
    match mode.kind {
        NormKind::Softmax => tape.softmax(scores, axis),
        NormKind::Sparsemax => tape.sparsemax(scores, axis),
        NormKind::Argmax => {
            let (gain, bias) = layernorm;
            let normed = tape.layernorm(scores, gain, bias, axis)?;
            tape.argmax_ste(normed, axis, mode.argmax_gradient_scale)
        }
    }
}
