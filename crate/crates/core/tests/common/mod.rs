//! Finite-difference gradient checks shared by the gradient and acceptance suites.
#![allow(dead_code)]

use protoneck::activations::{NeckNormMode, NormKind};
use protoneck::bbox::BBox;
use protoneck::data::Target;
use protoneck::detr::{backbone_forward, Backbone};
use protoneck::losses::{
    alignment_loss, assign_prototypes, build_saliency, detection_losses, hungarian_match, cost_matrix, LossCoefficients,
    MatchCoefficients,
};
use protoneck::model::{Model, ModelDims};
use protoneck::neck::{neck_forward, NeckParams};
use protoneck::params::ParamStore;
use protoneck::tensor::{Tape, Tensor, Var};
use protoneck::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `‖analytic − numeric‖ / ‖numeric‖` per input, probing every element.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Vec<f64> {
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = f(&mut t, &vs).unwrap();
        t.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    inputs
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let analytic = tape.grad(vars[k]).unwrap().to_vec();
            let mut num = vec![0.0; x.numel()];
            for (i, n) in num.iter_mut().enumerate() {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += H;
                let up = eval(&xs);
                xs[k].data_mut()[i] -= 2.0 * H;
                *n = (up - eval(&xs)) / (2.0 * H);
            }
            rel_err(&analytic, &num)
        })
        .collect()
}

// Gradients that vanish identically (key biases under softmax attention)
// leave only rounding noise, hence the floor on the norm.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = n.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-4)
}

/// Random projection to a scalar so every output element matters.
pub fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(t.shape(y), &mut rng);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Probes up to `per_param` evenly spaced entries of every parameter.
pub fn check_store(store: &mut ParamStore, per_param: usize, f: &dyn Fn(&ParamStore, &mut Tape, bool) -> (Var, Option<protoneck::params::Bound>)) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let (loss, bound) = f(store, &mut tape, true);
    tape.backward(loss).unwrap();
    let grads = store.gradients(&tape, &bound.unwrap());
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let n = store.get(id).numel();
        let step = (n / per_param).max(1);
        let mut a = Vec::new();
        let mut num = Vec::new();
        for i in (0..n).step_by(step) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + H;
            let up = {
                let mut t = Tape::new();
                let (l, _) = f(store, &mut t, false);
                t.value(l).item()
            };
            store.get_mut(id).data_mut()[i] = orig - H;
            let down = {
                let mut t = Tape::new();
                let (l, _) = f(store, &mut t, false);
                t.value(l).item()
            };
            store.get_mut(id).data_mut()[i] = orig;
            a.push(grads.get(id)[i]);
            num.push((up - down) / (2.0 * H));
        }
        out.push((store.name(id).to_string(), rel_err(&a, &num)));
    }
    out
}

/// `(check, relative error, tolerance)` for the primitive ops.
pub fn op_errors() -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[4, 5], &mut rng);
    let b = random(&[5, 3], &mut rng);
    for (i, e) in check_inputs(&[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, 10)
    })
    .into_iter()
    .enumerate()
    {
        out.push((format!("matmul input {i}"), e, 1e-4));
    }

    // inputs kept away from the kink
    let x = Tensor::new([12], (0..12).map(|i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.2 - i as f64 * 0.1 }).collect()).unwrap();
    let e = check_inputs(&[x], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 11)
    });
    out.push(("relu".into(), e[0], 1e-4));

    let e = check_inputs(&[a.clone()], |t, v| {
        let y = t.softmax(v[0], 1)?;
        project(t, y, 12)
    });
    out.push(("softmax".into(), e[0], 1e-4));

    let g = random(&[5], &mut rng);
    let bias = random(&[5], &mut rng);
    for (i, e) in check_inputs(&[a, g, bias], |t, v| {
        let y = t.layernorm(v[0], v[1], v[2], 1)?;
        project(t, y, 13)
    })
    .into_iter()
    .enumerate()
    {
        out.push((format!("layernorm input {i}"), e, 1e-4));
    }

    let mut tested = 0;
    while tested < 20 {
        let z = random(&[3, 6], &mut rng);
        // skip inputs within 1e-3 of a support change
        let stable = z.data().chunks(6).all(|row| {
            let p = protoneck::activations::sparsemax(row);
            let tau = row.iter().zip(&p).find(|(_, &pi)| pi > 0.0).map(|(zi, pi)| zi - pi).unwrap();
            row.iter().all(|zi| (zi - tau).abs() > 1e-3)
        });
        if !stable {
            continue;
        }
        let e = check_inputs(&[z], |t, v| {
            let y = t.sparsemax(v[0], 1)?;
            project(t, y, 14)
        });
        out.push((format!("sparsemax #{tested}"), e[0], 1e-5));
        tested += 1;
    }
    out
}

pub fn neck_setup(seed: u64) -> (ParamStore, NeckParams, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = NeckParams::new(&mut store, 6, 8, 5, &mut rng);
    // nonzero biases so no ReLU sits exactly at its kink
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".bias") {
            let n = store.get(id).numel();
            *store.get_mut(id) = random(&[n], &mut rng);
        }
    }
    let features = random(&[9, 6], &mut rng);
    (store, params, features)
}

/// Per-parameter relative errors of the neck. The argmax-only LayerNorm is
/// left out: it is not on the softmax or sparsemax path.
pub fn neck_errors(kind: NormKind) -> Vec<(String, f64)> {
    let (mut store, params, features) = neck_setup(3);
    let mode = NeckNormMode::new(kind, 0.01).unwrap();
    check_store(&mut store, 64, &|s, t, grad| {
        let p = s.bind(t, grad);
        let x = t.constant(features.clone());
        let out = neck_forward(t, &p, &params, x, mode).unwrap();
        (project(t, out.output, 20).unwrap(), Some(p))
    })
    .into_iter()
    .filter(|(name, _)| !name.starts_with("neck.score_norm"))
    .collect()
}

/// Largest deviation between argmax-path parameter gradients and 0.01× the
/// gradients obtained with a unit straight-through scale (parameters after
/// the argmax must be unchanged). Also reports whether any upstream gradient
/// was nonzero.
pub fn argmax_scale_deviation() -> (f64, bool) {
    let (store, params, features) = neck_setup(4);
    let grads = |scale: f64| {
        let mut t = Tape::new();
        let p = store.bind(&mut t, true);
        let x = t.constant(features.clone());
        let out = neck_forward(&mut t, &p, &params, x, NeckNormMode::new(NormKind::Argmax, scale).unwrap()).unwrap();
        let l = project(&mut t, out.output, 21).unwrap();
        t.backward(l).unwrap();
        store.gradients(&t, &p)
    };
    let scaled = grads(0.01);
    let unit = grads(1.0);
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let upstream = !store.name(id).starts_with("neck.out_embed");
        for (a, b) in scaled.get(id).iter().zip(unit.get(id)) {
            let expect = if upstream { 0.01 * b } else { *b };
            worst = worst.max((a - expect).abs() / expect.abs().max(1e-300));
        }
    }
    let nonzero = scaled.get(params.prototypes.weight).iter().any(|g| *g != 0.0);
    (worst, nonzero)
}

pub fn patch_embed_errors() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, 4, 6, &mut rng);
    let image = Tensor::new([3, 8, 8], (0..192).map(|_| rng.gen::<f64>()).collect()).unwrap();
    check_store(&mut store, 1000, &|s, t, grad| {
        let p = s.bind(t, grad);
        let (y, _, _) = backbone_forward(t, &p, &bb, &image).unwrap();
        (project(t, y, 22).unwrap(), Some(p))
    })
}

/// Backbone → neck (softmax) → detector → training loss on a 16×16 image,
/// with the matching frozen at the unperturbed point.
pub fn full_model_errors() -> Vec<(String, f64)> {
    let dims = ModelDims {
        image_size: 16,
        patch: 4,
        backbone_dim: 8,
        channels: 8,
        prototypes: 4,
        heads: 2,
        ffn_dim: 12,
        queries: 3,
        classes: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        use_neck: true,
    };
    let mut model = Model::new(dims, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.name(id).ends_with(".bias") {
            let n = model.store.get(id).numel();
            *model.store.get_mut(id) = Tensor::new([n], (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap();
        }
    }
    let image = Tensor::new([3, 16, 16], (0..768).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let targets = vec![
        Target {
            class: 0,
            bbox: BBox::new(0.3, 0.35, 0.3, 0.4),
        },
        Target {
            class: 1,
            bbox: BBox::new(0.7, 0.6, 0.25, 0.3),
        },
    ];
    let assign = assign_prototypes(4, 2, &[]).unwrap();
    let valid = vec![true; 16];
    let sal: Vec<_> = targets.iter().map(|t| build_saliency(&t.bbox, (4, 4), &valid).unwrap()).collect();
    let matching = {
        let mut t = Tape::new();
        let p = model.store.bind(&mut t, false);
        let out = model.forward(&mut t, &p, &image, NeckNormMode::softmax()).unwrap();
        hungarian_match(&cost_matrix(&out.detector.detections(&t), &targets, &MatchCoefficients::default()).unwrap()).unwrap()
    };
    let frozen = model.clone();
    check_store(&mut model.store, 16, &|s, t, grad| {
        let p = s.bind(t, grad);
        let out = frozen.forward(t, &p, &image, NeckNormMode::softmax()).unwrap();
        let d = detection_losses(t, out.detector.logits, out.detector.boxes, &targets, &matching, &LossCoefficients::default()).unwrap();
        let matched: Vec<(usize, _)> = matching.pairs.iter().map(|&(_, j)| (targets[j].class, &sal[j])).collect();
        let a = alignment_loss(t, out.neck.unwrap().prototype_map, &matched, &assign, 1e-3).unwrap();
        let l1 = t.scale(d.l1, 5.0);
        let gi = t.scale(d.giou, 2.0);
        let mut total = t.add(d.ce, l1).unwrap();
        total = t.add(total, gi).unwrap();
        total = t.add(total, a.loss).unwrap();
        (total, Some(p))
    })
    .into_iter()
    .filter(|(name, _)| !name.starts_with("neck.score_norm"))
    .collect()
}
