//! Named parameter storage, layer building blocks and the Adam optimizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every trainable array of a model, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| tape.leaf(v.clone(), requires_grad))
                .collect(),
        )
    }

    /// Reads the gradient of each bound parameter (zeros where none flowed).
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Gradients {
        Gradients(
            bound
                .0
                .iter()
                .zip(&self.values)
                .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
                .collect(),
        )
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(store.values.iter().map(|v| vec![0.0; v.numel()]).collect())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= c);
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Dense layer `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self::uniform(store, name, fan_in, fan_out, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
    }

    /// He-uniform weights for layers followed by a ReLU, zero bias.
    pub fn he(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self::uniform(store, name, fan_in, fan_out, (6.0 / fan_in as f64).sqrt(), rng)
    }

    /// Weights uniform in `(-limit, limit)`, zero bias.
    pub fn uniform(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, limit: f64, rng: &mut impl Rng) -> Self {
        let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        let weight = store.add(format!("{name}.weight"), Tensor::new([fan_out, fan_in], w).expect("linear shape"));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul_t(x, p[self.weight])?;
        tape.add(y, p[self.bias])
    }
}

/// LayerNorm over the last axis with learnable gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        tape.layernorm(x, p[self.gain], p[self.bias], axis)
    }
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.values.iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Fails without touching any parameter if a
/// gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, cfg: AdamConfig) -> Result<()> {
    if state.m.len() != store.len() || grads.0.len() != store.len() {
        return Err(Error::contract("optimizer state does not match parameters"));
    }
    for (i, g) in grads.0.iter().enumerate() {
        if g.len() != store.values[i].numel() || state.m[i].len() != g.len() {
            return Err(Error::contract(format!("gradient shape mismatch for `{}`", store.names[i])));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training(store.names[i].clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.0.iter().enumerate() {
        let p = store.values[i].data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new([1], vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = one_param(3.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &Gradients(vec![vec![0.0]]), &mut st, AdamConfig::default()).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one_param(1.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &Gradients(vec![vec![1.0]]), &mut st, cfg).unwrap();
        // mhat = 1, vhat = 1 → Δ = lr / (1 + eps)
        let after = s.get(ParamId(0)).data()[0];
        assert!((1.0 - after - 0.1).abs() < 1e-7, "{after}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = one_param(1.0);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &Gradients(vec![vec![f64::NAN]]), &mut st, AdamConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Training(name) if name == "w"));
        assert_eq!(s.get(ParamId(0)).data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut s = ParamStore::new();
            let lin = Linear::new(&mut s, "l", 4, 3, &mut rng);
            let mut st = AdamState::new(&s);
            for step in 0..5 {
                let mut tape = Tape::new();
                let b = s.bind(&mut tape, true);
                let x = tape.constant(Tensor::new([2, 4], (0..8).map(|i| (i + step) as f64 * 0.1).collect()).unwrap());
                let y = lin.forward(&mut tape, &b, x).unwrap();
                let y2 = tape.mul(y, y).unwrap();
                let l = tape.sum(y2);
                tape.backward(l).unwrap();
                let g = s.gradients(&tape, &b);
                adam_step(&mut s, &g, &mut st, AdamConfig::default()).unwrap();
            }
            s
        };
        let (a, b) = (run(), run());
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = Gradients(vec![vec![3.0, 4.0]]);
        let n = g.clip_global_norm(1.0);
        assert_eq!(n, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
