//! Trains a small prototype-neck detector and evaluates it.
//!
//!     cargo run --release --example train_toy [epochs]
//!
//! The default is a short run on a reduced split; pass a larger epoch count
//! to see the scores settle.

use protoneck::config::RunConfig;
use protoneck::data::Split;
use protoneck::eval::evaluate;
use protoneck::train::train_with_progress;

fn main() -> protoneck::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(3), |a| a.parse()).expect("epochs must be an integer");
    let mut cfg = RunConfig::default();
    cfg.train_size = 200;
    cfg.val_size = 50;
    cfg.epochs = epochs;
    let out = std::env::temp_dir().join("protoneck_train_toy");
    println!("config {}", cfg.hash());
    let run = train_with_progress(&cfg, 0, Some(&out), |epoch, t, _| {
        println!(
            "epoch {epoch:>3}  ce {:.4}  l1 {:.4}  giou {:.4}  align {:.4}  total {:.4}",
            t.ce, t.l1, t.giou, t.align, t.total
        );
    })?;
    let r = evaluate(&run.model, &cfg, Split::Val, cfg.val_size, cfg.norm_mode())?;
    println!("mAP@0.50 {:.3}  mAP@[.5:.95] {:.3}", r.map_50, r.map_50_95);
    let ae = r.ae.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    println!("EE {:.3}  AE {ae}  PX {:.2}  AAP {:.2}", r.ee, r.px, r.aap);
    println!("checkpoints and losses.csv under {}", out.join("seed_0").display());
    Ok(())
}
