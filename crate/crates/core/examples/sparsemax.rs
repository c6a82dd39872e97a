//! The three per-location normalizations side by side.
//!
//!     cargo run --example sparsemax

use protoneck::activations::{argmax_onehot, sparsemax};

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn show(name: &str, p: &[f64]) {
    let cells: Vec<String> = p.iter().map(|v| format!("{v:.3}")).collect();
    let active = p.iter().filter(|&&v| v > 0.0).count();
    println!("{name:>9}: [{}]  active {active}", cells.join(", "));
}

fn main() {
    for z in [vec![1.0, 0.5, -1.0], vec![2.0, 1.9, 0.1, -0.4, -3.0], vec![0.0; 4]] {
        println!("scores {z:?}");
        show("softmax", &softmax(&z));
        show("sparsemax", &sparsemax(&z));
        show("argmax", &argmax_onehot(&z));
        println!();
    }
}
