//! The prototype neck: per-location adapter MLP, inner-product similarity to
//! learned prototypes, normalization into prototype maps, and re-embedding.
//!
//! Only the prototype map reaches the re-embedding layer, so everything the
//! detector sees about the image passes through `m_p`.

use rand::Rng;

use crate::activations::{normalize_prototype_scores, NeckNormMode, NormKind};
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, Norm, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Prototype weights start with variance `PROTOTYPE_INIT² / C`, so score
/// spread scales with the adapter activations rather than shrinking with C.
pub const PROTOTYPE_INIT: f64 = 3.0;

#[derive(Clone, Copy, Debug)]
pub struct NeckParams {
    pub adapter1: Linear,
    pub adapter2: Linear,
    /// Rows of the weight matrix are the prototypes.
    pub prototypes: Linear,
    pub out_embed: Linear,
    /// LayerNorm applied to the scores on the argmax path.
    pub score_norm: Norm,
    pub num_prototypes: usize,
    pub channels: usize,
}

impl NeckParams {
    pub fn new(store: &mut ParamStore, backbone_dim: usize, channels: usize, num_prototypes: usize, rng: &mut impl Rng) -> Self {
        NeckParams {
            adapter1: Linear::he(store, "neck.adapter1", backbone_dim, channels, rng),
            adapter2: Linear::he(store, "neck.adapter2", channels, channels, rng),
            prototypes: Linear::uniform(store, "neck.prototypes", channels, num_prototypes, PROTOTYPE_INIT * (3.0 / channels as f64).sqrt(), rng),
            out_embed: Linear::uniform(store, "neck.out_embed", num_prototypes, channels, 3f64.sqrt(), rng),
            score_norm: Norm::new(store, "neck.score_norm", num_prototypes),
            num_prototypes,
            channels,
        }
    }
}

/// Tape handles produced by [`neck_forward`]. All are location-major:
/// row `i·W + j` holds grid cell `(i, j)`.
#[derive(Clone, Copy, Debug)]
pub struct NeckOutput {
    /// `[H·W, P]` similarity scores.
    pub scores: Var,
    /// `[H·W, P]` per-location prototype distributions.
    pub prototype_map: Var,
    /// `[H·W, C]` embeddings handed to the detector.
    pub output: Var,
}

fn ensure_finite(tape: &Tape, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(stage.to_string()))
    }
}

/// Runs the neck on location-major backbone features `[H·W, Cb]`.
pub fn neck_forward(tape: &mut Tape, p: &Bound, params: &NeckParams, features: Var, mode: NeckNormMode) -> Result<NeckOutput> {
    let h1 = params.adapter1.forward(tape, p, features)?;
    let h1 = tape.relu(h1);
    let h2 = params.adapter2.forward(tape, p, h1)?;
    let h2 = tape.relu(h2);
    ensure_finite(tape, h2, "neck adapter")?;
    let scores = params.prototypes.forward(tape, p, h2)?;
    ensure_finite(tape, scores, "prototype scores")?;
    let ln = (p[params.score_norm.gain], p[params.score_norm.bias]);
    let prototype_map = normalize_prototype_scores(tape, scores, mode, ln, 1)?;
    ensure_finite(tape, prototype_map, "prototype map")?;
    let output = embed_prototype_map(tape, p, params, prototype_map)?;
    ensure_finite(tape, output, "neck output")?;
    Ok(NeckOutput {
        scores,
        prototype_map,
        output,
    })
}

/// `ReLU(Wo · m_p(:, i, j) + bo)` at every location.
pub fn embed_prototype_map(tape: &mut Tape, p: &Bound, params: &NeckParams, prototype_map: Var) -> Result<Var> {
    let e = params.out_embed.forward(tape, p, prototype_map)?;
    Ok(tape.relu(e))
}

/// A per-image prototype activation field `[P, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMap {
    values: Vec<f64>,
    pub num_prototypes: usize,
    pub height: usize,
    pub width: usize,
    pub mode: NormKind,
}

impl PrototypeMap {
    /// Builds from a `[P, H, W]` buffer, checking nonnegativity and that every
    /// location sums to one within `1e-9`.
    pub fn new(values: Vec<f64>, num_prototypes: usize, height: usize, width: usize, mode: NormKind) -> Result<Self> {
        if values.len() != num_prototypes * height * width {
            return Err(Error::Shape {
                op: "prototype map",
                lhs: vec![num_prototypes, height, width],
                rhs: vec![values.len()],
            });
        }
        let map = PrototypeMap {
            values,
            num_prototypes,
            height,
            width,
            mode,
        };
        for cell in 0..height * width {
            let mut sum = 0.0;
            for p in 0..num_prototypes {
                let v = map.values[p * height * width + cell];
                if !(v >= 0.0) {
                    return Err(Error::contract(format!("negative or NaN prototype activation {v}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("prototype activations sum to {sum} at cell {cell}")));
            }
            if mode == NormKind::Argmax && (0..num_prototypes).any(|p| !matches!(map.values[p * height * width + cell], 0.0 | 1.0)) {
                return Err(Error::contract(format!("argmax prototype map is not one-hot at cell {cell}")));
            }
        }
        Ok(map)
    }

    /// Converts a location-major `[H·W, P]` tensor.
    pub fn from_locations(t: &Tensor, height: usize, width: usize, mode: NormKind) -> Result<Self> {
        let hw = height * width;
        if t.ndim() != 2 || t.shape()[0] != hw {
            return Err(Error::Shape {
                op: "prototype map",
                lhs: t.shape().to_vec(),
                rhs: vec![hw],
            });
        }
        let np = t.shape()[1];
        let src = t.data();
        let mut values = vec![0.0; src.len()];
        for cell in 0..hw {
            for p in 0..np {
                values[p * hw + cell] = src[cell * np + p];
            }
        }
        Self::new(values, np, height, width, mode)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, p: usize, i: usize, j: usize) -> f64 {
        self.values[(p * self.height + i) * self.width + j]
    }

    /// Activation field of one prototype, row-major `[H, W]`.
    pub fn channel(&self, p: usize) -> &[f64] {
        let hw = self.cells();
        &self.values[p * hw..(p + 1) * hw]
    }

    /// Distribution over prototypes at cell `(i, j)`.
    pub fn location(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.num_prototypes).map(|p| self.get(p, i, j)).collect()
    }

    /// Total activation of each prototype over the grid.
    pub fn totals(&self) -> Vec<f64> {
        (0..self.num_prototypes).map(|p| self.channel(p).iter().sum()).collect()
    }
}

/// Probability of quantizing an image with argmax, in percent, moving
/// linearly from `start_pct` to `end_pct` over training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArgmaxSchedule {
    pub start_pct: f64,
    pub end_pct: f64,
}

impl ArgmaxSchedule {
    pub fn new(start_pct: f64, end_pct: f64) -> Result<Self> {
        for v in [start_pct, end_pct] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::config(format!("argmax schedule percentage {v} outside [0, 100]")));
            }
        }
        Ok(ArgmaxSchedule { start_pct, end_pct })
    }

    pub fn probability(&self, epoch_fraction: f64) -> f64 {
        let f = epoch_fraction.clamp(0.0, 1.0);
        (self.start_pct + (self.end_pct - self.start_pct) * f) / 100.0
    }
}

impl Default for ArgmaxSchedule {
    fn default() -> Self {
        ArgmaxSchedule {
            start_pct: 0.0,
            end_pct: 5.0,
        }
    }
}

/// Chooses the normalization for one training image. An argmax-configured
/// neck always quantizes; otherwise argmax is drawn with the scheduled
/// probability. Exactly one uniform draw is consumed per call.
pub fn pick_norm_mode_for_image(
    epoch_fraction: f64,
    configured: NeckNormMode,
    schedule: ArgmaxSchedule,
    rng: &mut impl Rng,
) -> NeckNormMode {
    let u: f64 = rng.gen();
    if configured.kind == NormKind::Argmax || u < schedule.probability(epoch_fraction) {
        configured.with_kind(NormKind::Argmax)
    } else {
        configured
    }
}
