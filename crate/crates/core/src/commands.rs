//! The work behind each command-line subcommand, usable from code.

use std::path::{Path, PathBuf};

use crate::activations::NeckNormMode;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load, write_export, Split};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::explain::{explain, ExplainRequest};
use crate::metrics::{aggregate, write_aggregate_csv, write_metrics_csv, MetricsReport};
use crate::model::Model;
use crate::sweep::{run_sweep, CellResult};
use crate::train::{run_dir, train_with_progress, TrainOutcome};

/// Trains one run per seed into `{out}/seed_{s}`, logging epochs to stderr.
pub fn train_seeds(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<TrainOutcome>> {
    seeds
        .iter()
        .map(|&seed| {
            train_with_progress(cfg, seed, Some(out), |epoch, t, _| {
                eprintln!(
                    "seed {seed} epoch {epoch}: ce {:.4} l1 {:.4} giou {:.4} align {:.4} total {:.4}",
                    t.ce, t.l1, t.giou, t.align, t.total
                );
            })
        })
        .collect()
}

/// Builds the model for `cfg` and loads a checkpoint into it. The checkpoint
/// must come from a config with the same hash.
pub fn load_model(cfg: &RunConfig, manifest: &Path) -> Result<Model> {
    let m = checkpoint::read_manifest(manifest)?;
    if m.config_hash != cfg.hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} was trained with config {}, current config is {}",
            manifest.display(),
            m.config_hash,
            cfg.hash()
        )));
    }
    let mut model = Model::new(cfg.dims(), m.seed)?;
    checkpoint::load_into(manifest, &mut model.store)?;
    Ok(model)
}

/// Final checkpoint manifest of a seed's run.
pub fn default_checkpoint(out: &Path, seed: u64) -> PathBuf {
    checkpoint::paths(&run_dir(out, seed).join("checkpoint_final")).0
}

fn split_size(cfg: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.train_size,
        Split::Val => cfg.val_size,
    }
}

/// Evaluates each checkpoint and writes `{out}/metrics.csv`; with more than
/// one checkpoint also `{out}/metrics_aggregate.csv` (mean and std per score).
pub fn eval_checkpoints(cfg: &RunConfig, checkpoints: &[PathBuf], split: Split, mode: NeckNormMode, out: &Path) -> Result<Vec<MetricsReport>> {
    let reports = checkpoints
        .iter()
        .map(|c| {
            let model = load_model(cfg, c)?;
            evaluate(&model, cfg, split, split_size(cfg, split), mode)
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    write_metrics_csv(std::io::BufWriter::new(std::fs::File::create(out.join("metrics.csv"))?), &reports)?;
    if reports.len() > 1 {
        let f = std::fs::File::create(out.join("metrics_aggregate.csv"))?;
        write_aggregate_csv(std::io::BufWriter::new(f), &aggregate(&reports), &cfg.hash())?;
    }
    Ok(reports)
}

pub fn explain_checkpoint(cfg: &RunConfig, checkpoint: &Path, req: &ExplainRequest, out: &Path) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg, checkpoint)?;
    explain(&model, cfg, req, out)
}

pub fn sweep(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<CellResult>> {
    run_sweep(cfg, seeds, out)
}

/// Writes `count` samples of `split` (default: the whole split) to `{out}/{split}.bin`.
pub fn export_data(cfg: &RunConfig, split: Split, count: Option<usize>, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let n = count.unwrap_or_else(|| split_size(cfg, split));
    let spec = cfg.dataset();
    let samples = (0..n).map(|i| load(cfg.data_seed, split, i, &spec)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("{}.bin", split.name()));
    write_export(std::io::BufWriter::new(std::fs::File::create(&path)?), &samples)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::parse(
            "image_size = 16\npatch = 4\nchannels = 8\nbackbone_dim = 8\nprototypes = 4\nheads = 2\nffn_dim = 8\n\
             queries = 3\nmax_objects = 2\nmin_size = 5\nmax_size = 8\nepochs = 1\ntrain_size = 4\nval_size = 3\n",
        )
        .unwrap()
    }

    #[test]
    fn train_then_eval_with_aggregate() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        train_seeds(&cfg, &[0, 1], dir.path()).unwrap();
        let cks: Vec<PathBuf> = [0, 1].iter().map(|&s| default_checkpoint(dir.path(), s)).collect();
        let r = eval_checkpoints(&cfg, &cks, Split::Val, cfg.norm_mode(), dir.path()).unwrap();
        assert_eq!(r.len(), 2);
        let agg = std::fs::read_to_string(dir.path().join("metrics_aggregate.csv")).unwrap();
        assert!(agg.starts_with("score,mean,std,runs,config_hash\n"));
    }

    #[test]
    fn foreign_checkpoint_is_rejected() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        train_seeds(&cfg, &[0], dir.path()).unwrap();
        let mut other = cfg.clone();
        other.prototypes = 8;
        let err = load_model(&other, &default_checkpoint(dir.path(), 0)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn export_has_one_record_per_sample() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = export_data(&cfg, Split::Val, None, dir.path()).unwrap();
        let recs = crate::data::read_export(std::fs::File::open(p).unwrap()).unwrap();
        assert_eq!(recs.len(), 3);
    }
}
