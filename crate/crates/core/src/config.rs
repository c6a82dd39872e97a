//! Run configuration: flat `key = value` lines, `#` starts a comment.
//!
//! ```text
//! preset = sparsemax
//! prototypes = 16
//! align_coef = 1.2:0.7   # linear schedule; a single number is constant
//! ```
//!
//! A `preset` is applied first, wherever it appears; explicit keys then
//! override it. Unknown keys, malformed values and repeated keys are
//! rejected with the offending line number.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::activations::{NeckNormMode, NormKind, DEFAULT_ARGMAX_GRADIENT_SCALE};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::{assign_prototypes, AlignSchedule, LossCoefficients, MatchCoefficients, PrototypeAssignment};
use crate::model::ModelDims;
use crate::neck::ArgmaxSchedule;

/// Neck choice: one of the three normalizations, or no neck at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeckChoice {
    Norm(NormKind),
    None,
}

impl NeckChoice {
    pub fn name(self) -> &'static str {
        match self {
            NeckChoice::Norm(k) => k.name(),
            NeckChoice::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub neck: NeckChoice,
    pub prototypes: usize,
    pub channels: usize,
    pub backbone_dim: usize,
    pub patch: usize,
    pub image_size: usize,
    /// Generated image height when different from `image_size`; samples are
    /// then padded to square.
    pub image_height: usize,
    pub proto_overrides: Vec<(usize, usize)>,
    pub align_coef: AlignSchedule,
    pub argmax_schedule: ArgmaxSchedule,
    pub argmax_grad_scale: f64,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub queries: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub noise: f64,
    pub occlusion: bool,
    pub loss: LossCoefficients,
    /// Also apply the matching losses after every earlier decoder layer.
    pub aux_loss: bool,
    pub matching: MatchCoefficients,
    pub align_eps: f64,
    pub blur_sigma: f64,
    pub topk: usize,
    pub sweep_align: Vec<f64>,
    pub sweep_quantization: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            neck: NeckChoice::Norm(NormKind::Softmax),
            prototypes: 16,
            channels: 64,
            backbone_dim: 64,
            patch: 8,
            image_size: 64,
            image_height: 64,
            proto_overrides: Vec::new(),
            align_coef: AlignSchedule::default(),
            argmax_schedule: ArgmaxSchedule::default(),
            argmax_grad_scale: DEFAULT_ARGMAX_GRADIENT_SCALE,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            queries: 10,
            epochs: 30,
            batch_size: 2,
            lr: 2e-4,
            grad_clip: 0.5,
            seed: 0,
            seeds: vec![0, 1, 2],
            data_seed: 1234,
            classes: 4,
            train_size: 2000,
            val_size: 200,
            min_objects: 1,
            max_objects: 4,
            min_size: 18,
            max_size: 30,
            noise: 0.1,
            occlusion: false,
            loss: LossCoefficients::default(),
            aux_loss: false,
            matching: MatchCoefficients::default(),
            align_eps: crate::losses::ALIGN_EPS,
            blur_sigma: 1.5,
            topk: 5,
            sweep_align: Vec::new(),
            sweep_quantization: Vec::new(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Named variants, one per comparison row.
pub const PRESETS: [&str; 5] = ["base", "few-prototypes", "sparsemax", "argmax", "strong-alignment"];

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as a number"))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse_num).collect()
}

fn parse_pair(v: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = v.split_once(':').ok_or_else(|| format!("expected `start:end`, got `{v}`"))?;
    Ok((parse_num(a.trim())?, parse_num(b.trim())?))
}

fn fmt_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn apply_preset(&mut self, name: &str) -> std::result::Result<(), String> {
        match name {
            "base" => {}
            "few-prototypes" => self.prototypes /= 2,
            "sparsemax" => self.neck = NeckChoice::Norm(NormKind::Sparsemax),
            "argmax" => self.neck = NeckChoice::Norm(NormKind::Argmax),
            "strong-alignment" => self.align_coef = AlignSchedule::Constant(8.0),
            other => return Err(format!("unknown preset `{other}` (known: {})", PRESETS.join(", "))),
        }
        Ok(())
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "neck" => {
                self.neck = match v {
                    "none" => NeckChoice::None,
                    other => NeckChoice::Norm(other.parse()?),
                }
            }
            "prototypes" => self.prototypes = parse_num(v)?,
            "channels" => self.channels = parse_num(v)?,
            "backbone_dim" => self.backbone_dim = parse_num(v)?,
            "patch" => self.patch = parse_num(v)?,
            "image_size" => {
                self.image_size = parse_num(v)?;
                self.image_height = self.image_size;
            }
            "image_height" => self.image_height = parse_num(v)?,
            "proto_overrides" => {
                self.proto_overrides = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|item| {
                        let (c, n) = item.split_once(':').ok_or_else(|| format!("expected `class:extra`, got `{item}`"))?;
                        Ok((parse_num(c.trim())?, parse_num(n.trim())?))
                    })
                    .collect::<std::result::Result<_, String>>()?
            }
            "align_coef" => {
                self.align_coef = if v.contains(':') {
                    let (start, end) = parse_pair(v)?;
                    AlignSchedule::Linear { start, end }
                } else {
                    AlignSchedule::Constant(parse_num(v)?)
                }
            }
            "argmax_schedule" => {
                let (a, b) = parse_pair(v)?;
                self.argmax_schedule = ArgmaxSchedule::new(a, b).map_err(|e| e.to_string())?;
            }
            "argmax_grad_scale" => self.argmax_grad_scale = parse_num(v)?,
            "encoder_layers" => self.encoder_layers = parse_num(v)?,
            "decoder_layers" => self.decoder_layers = parse_num(v)?,
            "heads" => self.heads = parse_num(v)?,
            "ffn_dim" => self.ffn_dim = parse_num(v)?,
            "queries" => self.queries = parse_num(v)?,
            "epochs" => self.epochs = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "lr" => self.lr = parse_num(v)?,
            "grad_clip" => self.grad_clip = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "seeds" => self.seeds = parse_list(v)?,
            "data_seed" => self.data_seed = parse_num(v)?,
            "classes" => self.classes = parse_num(v)?,
            "train_size" => self.train_size = parse_num(v)?,
            "val_size" => self.val_size = parse_num(v)?,
            "min_objects" => self.min_objects = parse_num(v)?,
            "max_objects" => self.max_objects = parse_num(v)?,
            "min_size" => self.min_size = parse_num(v)?,
            "max_size" => self.max_size = parse_num(v)?,
            "noise" => self.noise = parse_num(v)?,
            "occlusion" => self.occlusion = v.parse().map_err(|_| format!("expected true or false, got `{v}`"))?,
            "class_coef" => self.loss.class = parse_num(v)?,
            "no_object_coef" => self.loss.no_object = parse_num(v)?,
            "l1_coef" => self.loss.l1 = parse_num(v)?,
            "giou_coef" => self.loss.giou = parse_num(v)?,
            "aux_loss" => self.aux_loss = v.parse().map_err(|_| format!("expected true or false, got `{v}`"))?,
            "match_class" => self.matching.class = parse_num(v)?,
            "match_l1" => self.matching.l1 = parse_num(v)?,
            "match_giou" => self.matching.giou = parse_num(v)?,
            "align_eps" => self.align_eps = parse_num(v)?,
            "blur_sigma" => self.blur_sigma = parse_num(v)?,
            "topk" => self.topk = parse_num(v)?,
            "sweep_align" => self.sweep_align = parse_list(v)?,
            "sweep_quantization" => self.sweep_quantization = parse_list(v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        let mut preset = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config_at(line_no, format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::config_at(line_no, format!("key `{k}` given twice")));
            }
            if k == "preset" {
                preset = Some((line_no, v.to_string()));
            } else {
                entries.push((line_no, k.to_string(), v.to_string()));
            }
        }
        let mut cfg = RunConfig::default();
        if let Some((line_no, p)) = preset {
            cfg.apply_preset(&p).map_err(|e| Error::config_at(line_no, e))?;
        }
        for (line_no, k, v) in entries {
            cfg.set(&k, &v).map_err(|e| Error::config_at(line_no, e))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("prototypes", self.prototypes),
            ("channels", self.channels),
            ("backbone_dim", self.backbone_dim),
            ("patch", self.patch),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("queries", self.queries),
            ("batch_size", self.batch_size),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{name}` must be positive")));
            }
        }
        if self.max_objects > self.queries {
            return Err(Error::config(format!(
                "max_objects ({}) exceeds the number of queries ({})",
                self.max_objects, self.queries
            )));
        }
        if self.image_height > self.image_size {
            return Err(Error::config("image_height cannot exceed image_size"));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || !(self.align_eps > 0.0) || !(self.blur_sigma >= 0.0) {
            return Err(Error::config("lr, grad_clip and align_eps must be positive, blur_sigma nonnegative"));
        }
        for q in &self.sweep_quantization {
            if !(0.0..=100.0).contains(q) {
                return Err(Error::config(format!("quantization percentage {q} outside [0, 100]")));
            }
        }
        NeckNormMode::new(NormKind::Argmax, self.argmax_grad_scale)?;
        self.dataset().validate()?;
        self.assignment()?;
        if self.channels % self.heads != 0 || self.channels % 4 != 0 {
            return Err(Error::config("channels must be divisible by 4 and by heads"));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            image_size: self.image_size,
            patch: self.patch,
            backbone_dim: self.backbone_dim,
            channels: self.channels,
            prototypes: self.prototypes,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            queries: self.queries,
            classes: self.classes,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            use_neck: self.neck != NeckChoice::None,
        }
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            height: self.image_height,
            width: self.image_size,
            patch: self.patch,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_size: self.min_size,
            max_size: self.max_size,
            noise: self.noise,
            occlusion: self.occlusion,
        }
    }

    /// Normalization used for evaluation and as the soft training mode.
    /// The neck-less variant ignores it.
    pub fn norm_mode(&self) -> NeckNormMode {
        let kind = match self.neck {
            NeckChoice::Norm(k) => k,
            NeckChoice::None => NormKind::Softmax,
        };
        NeckNormMode {
            kind,
            argmax_gradient_scale: self.argmax_grad_scale,
        }
    }

    pub fn assignment(&self) -> Result<PrototypeAssignment> {
        assign_prototypes(self.prototypes, self.classes, &self.proto_overrides)
    }

    /// Every key with its value, in a fixed order. Parsing the joined lines
    /// reproduces the config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let align = match self.align_coef {
            AlignSchedule::Constant(c) => c.to_string(),
            AlignSchedule::Linear { start, end } => format!("{start}:{end}"),
        };
        vec![
            ("neck", self.neck.name().to_string()),
            ("prototypes", self.prototypes.to_string()),
            ("channels", self.channels.to_string()),
            ("backbone_dim", self.backbone_dim.to_string()),
            ("patch", self.patch.to_string()),
            ("image_size", self.image_size.to_string()),
            ("image_height", self.image_height.to_string()),
            (
                "proto_overrides",
                self.proto_overrides.iter().map(|(c, n)| format!("{c}:{n}")).collect::<Vec<_>>().join(","),
            ),
            ("align_coef", align),
            (
                "argmax_schedule",
                format!("{}:{}", self.argmax_schedule.start_pct, self.argmax_schedule.end_pct),
            ),
            ("argmax_grad_scale", self.argmax_grad_scale.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("queries", self.queries.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
            ("seeds", fmt_list(&self.seeds)),
            ("data_seed", self.data_seed.to_string()),
            ("classes", self.classes.to_string()),
            ("train_size", self.train_size.to_string()),
            ("val_size", self.val_size.to_string()),
            ("min_objects", self.min_objects.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("min_size", self.min_size.to_string()),
            ("max_size", self.max_size.to_string()),
            ("noise", self.noise.to_string()),
            ("occlusion", self.occlusion.to_string()),
            ("class_coef", self.loss.class.to_string()),
            ("no_object_coef", self.loss.no_object.to_string()),
            ("l1_coef", self.loss.l1.to_string()),
            ("giou_coef", self.loss.giou.to_string()),
            ("aux_loss", self.aux_loss.to_string()),
            ("match_class", self.matching.class.to_string()),
            ("match_l1", self.matching.l1.to_string()),
            ("match_giou", self.matching.giou.to_string()),
            ("align_eps", self.align_eps.to_string()),
            ("blur_sigma", self.blur_sigma.to_string()),
            ("topk", self.topk.to_string()),
            ("sweep_align", fmt_list(&self.sweep_align)),
            ("sweep_quantization", fmt_list(&self.sweep_quantization)),
            ("out_dir", self.out_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 (first 16 hex digits) of every setting except the seed
    /// choices and the output directory, so runs of one variant share a hash.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if matches!(k, "seed" | "seeds" | "out_dir") {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
