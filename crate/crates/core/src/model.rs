//! The full detector: patch backbone, prototype neck (or a plain projection
//! for the neck ablation), and the detection transformer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::NeckNormMode;
use crate::detr::{backbone_forward, detector_forward, Backbone, DetectorDims, DetectorOutput, DetectorParams};
use crate::error::{Error, Result};
use crate::neck::{neck_forward, NeckOutput, NeckParams};
use crate::params::{Bound, Linear, Norm, ParamStore};
use crate::tensor::{Tape, Tensor};

/// Architecture sizes; everything needed to rebuild the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub image_size: usize,
    pub patch: usize,
    pub backbone_dim: usize,
    pub channels: usize,
    pub prototypes: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub queries: usize,
    pub classes: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// `false` replaces the prototype neck with `LayerNorm(Linear(x))`.
    pub use_neck: bool,
}

impl ModelDims {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    fn detector(&self) -> DetectorDims {
        DetectorDims {
            channels: self.channels,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            queries: self.queries,
            classes: self.classes,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum NeckVariant {
    Prototype(NeckParams),
    Bypass { proj: Linear, norm: Norm },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub neck: NeckVariant,
    pub detector: DetectorParams,
}

/// Tape handles for one image.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Absent for the neck ablation.
    pub neck: Option<NeckOutput>,
    pub detector: DetectorOutput,
}

impl Model {
    /// Initializes every parameter from `seed`.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.patch == 0 || dims.image_size % dims.patch != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch size {}",
                dims.image_size, dims.patch
            )));
        }
        if dims.channels == 0 || dims.prototypes == 0 || dims.queries == 0 || dims.classes == 0 {
            return Err(Error::config("channels, prototypes, queries and classes must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, dims.patch, dims.backbone_dim, &mut rng);
        let neck = if dims.use_neck {
            NeckVariant::Prototype(NeckParams::new(&mut store, dims.backbone_dim, dims.channels, dims.prototypes, &mut rng))
        } else {
            NeckVariant::Bypass {
                proj: Linear::new(&mut store, "bypass.proj", dims.backbone_dim, dims.channels, &mut rng),
                norm: Norm::new(&mut store, "bypass.norm", dims.channels),
            }
        };
        let detector = DetectorParams::new(&mut store, dims.detector(), &mut rng)?;
        Ok(Model {
            dims,
            store,
            backbone,
            neck,
            detector,
        })
    }

    pub fn neck_params(&self) -> Option<&NeckParams> {
        match &self.neck {
            NeckVariant::Prototype(n) => Some(n),
            NeckVariant::Bypass { .. } => None,
        }
    }

    /// Records one image `[3, S, S]` onto `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: &Tensor, mode: NeckNormMode) -> Result<ModelOutput> {
        let (features, h, w) = backbone_forward(tape, p, &self.backbone, image)?;
        let (neck, embeddings) = match &self.neck {
            NeckVariant::Prototype(params) => {
                let out = neck_forward(tape, p, params, features, mode)?;
                (Some(out), out.output)
            }
            NeckVariant::Bypass { proj, norm } => {
                let x = proj.forward(tape, p, features)?;
                (None, norm.forward(tape, p, x)?)
            }
        };
        let detector = detector_forward(tape, p, &self.detector, embeddings, h, w)?;
        Ok(ModelOutput { neck, detector })
    }
}
