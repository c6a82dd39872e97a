//! Inference over a split and the evaluation report.

use rayon::prelude::*;

use crate::activations::NeckNormMode;
use crate::config::RunConfig;
use crate::data::{load, SceneSample, Split, Target};
use crate::detr::{AttentionMap, Detection};
use crate::error::{Error, Result};
use crate::losses::{cost_matrix, hungarian_match, MatchResult};
use crate::metrics::{alignment_error, avg_active_prototypes, coco_map, exclusion_error, perplexity, MetricsReport, ScoredBox};
use crate::model::Model;
use crate::neck::PrototypeMap;
use crate::tensor::Tape;
use crate::train::thread_pool;

/// Everything inference produces for one image.
#[derive(Clone, Debug)]
pub struct Inference {
    pub detections: Vec<Detection>,
    pub attention: Vec<AttentionMap>,
    pub prototype_map: Option<PrototypeMap>,
    pub matching: MatchResult,
}

impl Inference {
    /// One ranked box per query: its most likely real class and that probability.
    pub fn scored_boxes(&self) -> Vec<ScoredBox> {
        self.detections
            .iter()
            .map(|d| {
                let (class, score) = d.top_class();
                ScoredBox { class, score, bbox: d.bbox }
            })
            .collect()
    }
}

pub fn infer(model: &Model, cfg: &RunConfig, sample: &SceneSample, mode: NeckNormMode) -> Result<Inference> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let out = model.forward(&mut tape, &p, &sample.image, mode)?;
    let detections = out.detector.detections(&tape);
    let attention = out.detector.attention_maps(&tape);
    let prototype_map = match out.neck {
        Some(n) => Some(PrototypeMap::from_locations(
            tape.value(n.prototype_map),
            out.detector.height,
            out.detector.width,
            mode.kind,
        )?),
        None => None,
    };
    let matching = hungarian_match(&cost_matrix(&detections, &sample.targets, &cfg.matching)?)?;
    Ok(Inference {
        detections,
        attention,
        prototype_map,
        matching,
    })
}

/// Scores of one image; `ae` is `None` without matches or without a neck.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub ee: f64,
    pub ae: Option<f64>,
    pub px: f64,
    pub aap: f64,
}

pub fn image_scores(inf: &Inference, targets: &[Target], cfg: &RunConfig) -> Result<Option<ImageScores>> {
    let Some(m) = &inf.prototype_map else {
        return Ok(None);
    };
    let assign = cfg.assignment()?;
    let matched: Vec<(usize, &AttentionMap)> = inf
        .matching
        .pairs
        .iter()
        .map(|&(q, t)| (targets[t].class, &inf.attention[q]))
        .collect();
    Ok(Some(ImageScores {
        ee: exclusion_error(m),
        ae: alignment_error(&matched, m, &assign),
        px: perplexity(m),
        aap: avg_active_prototypes(m),
    }))
}

/// Evaluates `count` images of `split` with normalization `mode`. Scores are
/// computed per image and then averaged; mAP pools all images.
pub fn evaluate(model: &Model, cfg: &RunConfig, split: Split, count: usize, mode: NeckNormMode) -> Result<MetricsReport> {
    if count == 0 {
        return Err(Error::Data(format!("{} split is empty", split.name())));
    }
    let spec = cfg.dataset();
    let pool = thread_pool()?;
    let per_image: Vec<Result<(Vec<ScoredBox>, Vec<Target>, Option<ImageScores>)>> = pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let s = load(cfg.data_seed, split, i, &spec)?;
                let inf = infer(model, cfg, &s, mode)?;
                let scores = image_scores(&inf, &s.targets, cfg)?;
                Ok((inf.scored_boxes(), s.targets, scores))
            })
            .collect()
    });
    let mut preds = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    let mut scores = Vec::with_capacity(count);
    for r in per_image {
        let (p, t, s) = r?;
        preds.push(p);
        targets.push(t);
        scores.extend(s);
    }
    let map = coco_map(&preds, &targets, cfg.classes)?;
    let mean = |f: &dyn Fn(&ImageScores) -> Option<f64>| {
        let v: Vec<f64> = scores.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let has_neck = model.neck_params().is_some();
    Ok(MetricsReport {
        ee: mean(&|s| Some(s.ee)).unwrap_or(f64::NAN),
        ae: mean(&|s| s.ae),
        px: mean(&|s| Some(s.px)).unwrap_or(f64::NAN),
        aap: mean(&|s| Some(s.aap)).unwrap_or(f64::NAN),
        map_50_95: map.map,
        map_50: map.map_50(),
        mode: if has_neck { mode.kind.name().to_string() } else { "none".to_string() },
        prototypes: if has_neck { cfg.prototypes } else { 0 },
        config_hash: cfg.hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::NormKind;

    fn tiny() -> RunConfig {
        RunConfig::parse(
            "image_size = 16\npatch = 4\nchannels = 8\nbackbone_dim = 8\nprototypes = 4\nheads = 2\nffn_dim = 8\n\
             queries = 3\nmax_objects = 2\nmin_size = 5\nmax_size = 8\n",
        )
        .unwrap()
    }

    #[test]
    fn argmax_eval_has_exact_scores() {
        let cfg = tiny();
        let model = Model::new(cfg.dims(), 0).unwrap();
        let r = evaluate(&model, &cfg, Split::Val, 4, cfg.norm_mode().with_kind(NormKind::Argmax)).unwrap();
        assert_eq!(r.ee, 0.0);
        assert_eq!(r.aap, 1.0);
        let s = evaluate(&model, &cfg, Split::Val, 4, cfg.norm_mode()).unwrap();
        assert_eq!(s.aap, 4.0);
        assert!((0.0..=1.0).contains(&s.ae.unwrap()));
    }

    #[test]
    fn empty_split_is_data_error() {
        let cfg = tiny();
        let model = Model::new(cfg.dims(), 0).unwrap();
        assert_eq!(evaluate(&model, &cfg, Split::Val, 0, cfg.norm_mode()).unwrap_err().exit_code(), 4);
    }
}
