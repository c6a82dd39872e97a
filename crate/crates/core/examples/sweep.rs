//! Alignment-strength sweep on a tiny configuration, printed as a table.
//!
//!     cargo run --release --example sweep

use protoneck::config::RunConfig;
use protoneck::sweep::run_sweep;

fn main() -> protoneck::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train_size = 64;
    cfg.val_size = 16;
    cfg.epochs = 2;
    cfg.sweep_align = vec![0.0, 2.0];
    cfg.sweep_quantization = vec![100.0];
    let out = std::env::temp_dir().join("protoneck_sweep");
    let results = run_sweep(&cfg, &[0, 1], &out)?;
    println!("{:<18} {:>14} {:>14} {:>10}", "cell", "AE", "EE", "mAP@0.50");
    for r in &results {
        let s = &r.summary;
        println!(
            "{:<18} {:>7.3}±{:<6.3} {:>7.3}±{:<6.3} {:>10.3}",
            r.cell.label(),
            s.ae.0,
            s.ae.1,
            s.ee.0,
            s.ee.1,
            s.map_50.0
        );
    }
    println!("{}", out.join("sweep.csv").display());
    Ok(())
}
