//! Renders single, multi-prototype and product maps for one validation image.
//!
//!     cargo run --release --example explain_maps
//!
//! Trains a quick model first, so the maps are only loosely structured.

use protoneck::activations::NormKind;
use protoneck::config::RunConfig;
use protoneck::data::Split;
use protoneck::explain::{explain, ExplainRequest, MapKind};
use protoneck::train::train;

fn main() -> protoneck::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train_size = 100;
    cfg.val_size = 10;
    cfg.epochs = 2;
    let run = train(&cfg, 0, None)?;
    let out = std::env::temp_dir().join("protoneck_maps");

    let kinds = [MapKind::Single(vec![0, 1, 2, 3]), MapKind::Multi, MapKind::Product(Vec::new())];
    for kind in kinds {
        let req = ExplainRequest {
            split: Split::Val,
            index: 0,
            kind,
            mode: cfg.norm_mode(),
            top_k: cfg.topk,
        };
        for p in explain(&run.model, &cfg, &req, &out)? {
            println!("{}", p.display());
        }
    }

    // the same image with the quantized neck: every cell shows one prototype
    let req = ExplainRequest {
        split: Split::Val,
        index: 0,
        kind: MapKind::Multi,
        mode: cfg.norm_mode().with_kind(NormKind::Argmax),
        top_k: cfg.topk,
    };
    for p in explain(&run.model, &cfg, &req, &out.join("argmax"))? {
        println!("{}", p.display());
    }
    Ok(())
}
