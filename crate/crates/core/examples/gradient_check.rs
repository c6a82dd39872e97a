//! Compares tape gradients of the prototype neck with central differences.
//!
//!     cargo run --example gradient_check

use protoneck::activations::{NeckNormMode, NormKind};
use protoneck::neck::{neck_forward, NeckParams};
use protoneck::params::ParamStore;
use protoneck::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(store: &ParamStore, params: &NeckParams, x: &Tensor, w: &Tensor, mode: NeckNormMode, tape: &mut Tape, grad: bool) -> (protoneck::tensor::Var, protoneck::params::Bound) {
    let p = store.bind(tape, grad);
    let xv = tape.constant(x.clone());
    let out = neck_forward(tape, &p, params, xv, mode).expect("neck");
    let wv = tape.constant(w.clone());
    let y = tape.mul(out.output, wv).expect("shapes");
    (tape.sum(y), p)
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let params = NeckParams::new(&mut store, 6, 8, 5, &mut rng);
    let x = Tensor::new([9, 6], (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::new([9, 8], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let h = 1e-6;
    for kind in [NormKind::Softmax, NormKind::Sparsemax] {
        let mode = NeckNormMode::new(kind, 0.01).unwrap();
        let mut tape = Tape::new();
        let (l, p) = loss(&store, &params, &x, &w, mode, &mut tape, true);
        tape.backward(l).unwrap();
        let grads = store.gradients(&tape, &p);
        println!("{kind}:");
        for id in store.ids().collect::<Vec<_>>() {
            let mut worst: f64 = 0.0;
            for i in 0..store.get(id).numel() {
                let orig = store.get(id).data()[i];
                let mut at = |v: f64| {
                    store.get_mut(id).data_mut()[i] = v;
                    let mut t = Tape::new();
                    let (l, _) = loss(&store, &params, &x, &w, mode, &mut t, false);
                    t.value(l).item()
                };
                let num = (at(orig + h) - at(orig - h)) / (2.0 * h);
                store.get_mut(id).data_mut()[i] = orig;
                let a = grads.get(id)[i];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-4));
            }
            println!("  {:<24} max rel err {worst:.2e}", store.name(id));
        }
    }
}
