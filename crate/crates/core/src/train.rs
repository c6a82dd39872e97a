//! Deterministic training loop.
//!
//! Each image of a batch is forwarded and differentiated on its own tape, so
//! the images may run on a worker pool; their gradients are reduced in batch
//! order, which keeps results independent of the thread count.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::activations::NeckNormMode;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load, SceneSample, Split};
use crate::error::{Error, Result};
use crate::losses::{
    alignment_loss, build_saliency, cost_matrix, detection_losses, hungarian_match, LossTerms, PrototypeAssignment,
};
use crate::model::Model;
use crate::neck::pick_norm_mode_for_image;
use crate::params::{adam_step, AdamConfig, AdamState, Gradients};
use crate::tensor::Tape;

/// Worker pool honoring `PROTONECK_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PROTONECK_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::config(format!("PROTONECK_THREADS must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

/// Loss and gradients for one image.
pub fn image_step(
    model: &Model,
    cfg: &RunConfig,
    assign: &PrototypeAssignment,
    sample: &SceneSample,
    mode: NeckNormMode,
    align_coef: f64,
) -> Result<(Gradients, LossTerms)> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, true);
    let out = model.forward(&mut tape, &p, &sample.image, mode)?;
    let det = &out.detector;
    let dets = det.detections(&tape);
    let cost = cost_matrix(&dets, &sample.targets, &cfg.matching)?;
    let m = hungarian_match(&cost)?;
    let c = &cfg.loss;
    let terms = detection_losses(&mut tape, det.logits, det.boxes, &sample.targets, &m, c)?;
    let ce = tape.scale(terms.ce, c.class);
    let l1 = tape.scale(terms.l1, c.l1);
    let gi = tape.scale(terms.giou, c.giou);
    let mut total = tape.add(ce, l1)?;
    total = tape.add(total, gi)?;
    if cfg.aux_loss {
        for &(logits, boxes) in &det.aux {
            let dets = crate::detr::detections_from(&tape, logits, boxes);
            let am = hungarian_match(&cost_matrix(&dets, &sample.targets, &cfg.matching)?)?;
            let t = detection_losses(&mut tape, logits, boxes, &sample.targets, &am, c)?;
            for (v, w) in [(t.ce, c.class), (t.l1, c.l1), (t.giou, c.giou)] {
                let v = tape.scale(v, w);
                total = tape.add(total, v)?;
            }
        }
    }
    let mut align_value = 0.0;
    if let (Some(neck), true) = (out.neck, align_coef != 0.0) {
        let valid = sample.valid_mask();
        let sal = m
            .pairs
            .iter()
            .map(|&(_, t)| build_saliency(&sample.targets[t].bbox, sample.grid, &valid))
            .collect::<Result<Vec<_>>>()?;
        let matched: Vec<(usize, _)> = m.pairs.iter().zip(&sal).map(|(&(_, t), s)| (sample.targets[t].class, s)).collect();
        let a = alignment_loss(&mut tape, neck.prototype_map, &matched, assign, cfg.align_eps)?;
        align_value = tape.value(a.loss).item();
        let weighted = tape.scale(a.loss, align_coef);
        total = tape.add(total, weighted)?;
    }
    let report = LossTerms {
        ce: tape.value(terms.ce).item(),
        l1: tape.value(terms.l1).item(),
        giou: tape.value(terms.giou).item(),
        align: align_value,
        total: tape.value(total).item(),
    };
    if !report.total.is_finite() {
        return Err(Error::Numeric("training loss".into()));
    }
    tape.backward(total)?;
    Ok((model.store.gradients(&tape, &p), report))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean loss terms per epoch, epochs numbered from 1.
    pub epochs: Vec<(usize, LossTerms)>,
    pub best_epoch: usize,
    pub config_hash: String,
    pub seed: u64,
}

/// Where a run's artifacts go: `{out}/seed_{seed}`.
pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Trains from scratch. With `out`, writes `losses.csv` after every epoch and
/// `checkpoint_best` / `checkpoint_final` into [`run_dir`].
pub fn train(cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<TrainOutcome> {
    train_with_progress(cfg, seed, out, |_, _, _| {})
}

pub fn train_with_progress(
    cfg: &RunConfig,
    seed: u64,
    out: Option<&Path>,
    mut progress: impl FnMut(usize, &LossTerms, &Model),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.train_size == 0 {
        return Err(Error::Data("training split is empty".into()));
    }
    let hash = cfg.hash();
    let spec = cfg.dataset();
    let assign = cfg.assignment()?;
    let mut model = Model::new(cfg.dims(), seed)?;
    let mut adam = AdamState::new(&model.store);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let pool = thread_pool()?;
    let dir = out.map(|o| run_dir(o, seed));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_7A1E);
    let base_mode = cfg.norm_mode();
    let batches = cfg.train_size.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches).max(1) as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize);
    let mut order: Vec<usize> = (0..cfg.train_size).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let frac = (epoch * batches + b) as f64 / total_steps;
            let align_coef = cfg.align_coef.at(frac);
            let modes: Vec<NeckNormMode> = chunk
                .iter()
                .map(|_| pick_norm_mode_for_image(frac, base_mode, cfg.argmax_schedule, &mut rng))
                .collect();
            let results: Vec<Result<(Gradients, LossTerms)>> = pool.install(|| {
                chunk
                    .par_iter()
                    .zip(modes.par_iter())
                    .map(|(&i, &mode)| {
                        let sample = load(cfg.data_seed, Split::Train, i, &spec)?;
                        image_step(&model, cfg, &assign, &sample, mode, align_coef)
                    })
                    .collect()
            });
            let mut grads = Gradients::zeros_like(&model.store);
            for r in results {
                let (g, t) = r?;
                grads.add_assign(&g);
                sum.add(&t);
            }
            grads.scale(1.0 / chunk.len() as f64);
            grads.clip_global_norm(cfg.grad_clip);
            adam_step(&mut model.store, &grads, &mut adam, adam_cfg)?;
        }
        let mean = sum.scaled(1.0 / cfg.train_size as f64);
        history.push((epoch + 1, mean));
        progress(epoch + 1, &mean, &model);
        if let Some(d) = &dir {
            let f = std::fs::File::create(d.join("losses.csv"))?;
            crate::losses::write_loss_csv(std::io::BufWriter::new(f), &history, &hash)?;
            if mean.total < best.0 {
                checkpoint::save(&d.join("checkpoint_best"), &model.store, &hash, seed, epoch + 1)?;
            }
        }
        if mean.total < best.0 {
            best = (mean.total, epoch + 1);
        }
    }
    if let Some(d) = &dir {
        checkpoint::save(&d.join("checkpoint_final"), &model.store, &hash, seed, cfg.epochs)?;
        std::fs::write(d.join("config.txt"), cfg.to_text())?;
    }
    Ok(TrainOutcome {
        model,
        epochs: history,
        best_epoch: best.1,
        config_hash: hash,
        seed,
    })
}
