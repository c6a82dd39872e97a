//! Explanation maps for one image of a split, plus a text sidecar.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::activations::NeckNormMode;
use crate::config::RunConfig;
use crate::data::{load, Split};
use crate::error::{Error, Result};
use crate::eval::infer;
use crate::model::Model;
use crate::viz::{map_file_name, render_multi, render_product, render_single, Palette};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MapKind {
    /// One overlay per listed prototype.
    Single(Vec<usize>),
    Multi,
    /// One product map per listed query; empty means every matched query.
    Product(Vec<usize>),
}

impl MapKind {
    pub fn name(&self) -> &'static str {
        match self {
            MapKind::Single(_) => "single",
            MapKind::Multi => "multi",
            MapKind::Product(_) => "product",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExplainRequest {
    pub split: Split,
    pub index: usize,
    pub kind: MapKind,
    pub mode: NeckNormMode,
    pub top_k: usize,
}

/// Renders the requested maps into `out` and returns the written paths, the
/// sidecar last.
pub fn explain(model: &Model, cfg: &RunConfig, req: &ExplainRequest, out: &Path) -> Result<Vec<PathBuf>> {
    let size = match req.split {
        Split::Train => cfg.train_size,
        Split::Val => cfg.val_size,
    };
    if req.index >= size {
        return Err(Error::Data(format!(
            "index {} out of range for the {} split of {size} images",
            req.index,
            req.split.name()
        )));
    }
    let sample = load(cfg.data_seed, req.split, req.index, &cfg.dataset())?;
    let inf = infer(model, cfg, &sample, req.mode)?;
    let Some(m) = &inf.prototype_map else {
        return Err(Error::config("the neck-less variant has no prototype maps to explain"));
    };
    let assign = cfg.assignment()?;
    let palette = Palette::default();
    std::fs::create_dir_all(out)?;
    let split = req.split.name();
    let kind = req.kind.name();
    let mut written = Vec::new();
    let mut emit = |name: String, img: crate::viz::Image| -> Result<()> {
        let path = out.join(name);
        img.write_ppm(&path)?;
        written.push(path);
        Ok(())
    };
    match &req.kind {
        MapKind::Single(protos) => {
            for &p in protos {
                emit(map_file_name(split, req.index, kind, Some(('p', p))), render_single(m, p, &sample.image)?)?;
            }
        }
        MapKind::Multi => {
            emit(map_file_name(split, req.index, kind, None), render_multi(m, req.top_k, &palette, &sample.image, Some(&assign))?)?;
        }
        MapKind::Product(queries) => {
            let qs: Vec<usize> = if queries.is_empty() {
                inf.matching.pairs.iter().map(|&(q, _)| q).collect()
            } else {
                queries.clone()
            };
            for q in qs {
                let att = inf
                    .attention
                    .get(q)
                    .ok_or_else(|| Error::Data(format!("query {q} out of range ({} queries)", inf.attention.len())))?;
                let img = render_product(att, m, req.top_k, &palette, &sample.image, cfg.blur_sigma, Some(&assign))?;
                emit(map_file_name(split, req.index, kind, Some(('q', q))), img)?;
            }
        }
    }
    let mut side = format!("config_hash {}\nmode {}\nprototype class mass\n", cfg.hash(), req.mode.kind.name());
    for (p, mass) in m.totals().iter().enumerate() {
        let _ = writeln!(side, "{p} {} {mass:.6}", assign.class_of[p]);
    }
    let path = out.join(format!("{split}_{}_{kind}.txt", req.index));
    std::fs::write(&path, side)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::parse(
            "image_size = 16\npatch = 4\nchannels = 8\nbackbone_dim = 8\nprototypes = 4\nheads = 2\nffn_dim = 8\n\
             queries = 3\nmax_objects = 2\nmin_size = 5\nmax_size = 8\nval_size = 3\n",
        )
        .unwrap()
    }

    fn request(kind: MapKind, index: usize) -> ExplainRequest {
        ExplainRequest {
            split: Split::Val,
            index,
            kind,
            mode: NeckNormMode::softmax(),
            top_k: 3,
        }
    }

    #[test]
    fn writes_maps_and_sidecar() {
        let cfg = tiny();
        let model = Model::new(cfg.dims(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = explain(&model, &cfg, &request(MapKind::Multi, 1), dir.path()).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["val_1_multi.ppm", "val_1_multi.txt"]);
        let side = std::fs::read_to_string(&files[1]).unwrap();
        assert_eq!(side.lines().count(), 3 + 4);

        let files = explain(&model, &cfg, &request(MapKind::Product(vec![0, 2]), 1), dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        assert!(files[1].ends_with("val_1_product_q2.ppm"));
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let cfg = tiny();
        let model = Model::new(cfg.dims(), 0).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = explain(&model, &cfg, &request(MapKind::Single(vec![0, 3]), 0), a.path()).unwrap();
        let fb = explain(&model, &cfg, &request(MapKind::Single(vec![0, 3]), 0), b.path()).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn bad_index_is_data_error() {
        let cfg = tiny();
        let model = Model::new(cfg.dims(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = explain(&model, &cfg, &request(MapKind::Multi, 3), dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
