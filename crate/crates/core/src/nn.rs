//! Parameter storage, layer building blocks and the optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{PulseError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named `f32` parameter tensors owned by one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<f32>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn load(&mut self, named: Vec<(String, Tensor<f32>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(PulseError::Shape(format!(
                "expected {} parameters, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(PulseError::Shape(format!(
                    "parameter {} `{}` {:?} does not match `{}` {:?}",
                    i,
                    name,
                    t.shape(),
                    self.names[i],
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Inserts every parameter into `g` as a leaf.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Binding {
        Binding {
            vars: self
                .tensors
                .iter()
                .map(|t| g.leaf(t.cast(), trainable))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Graph nodes standing in for a [`ParamSet`] during one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Option<Vec<f32>>> {
        self.vars
            .iter()
            .map(|&v| g.grad(v).map(|s| s.iter().map(|x| x.f64() as f32).collect()))
            .collect()
    }
}

/// Truncated normal (±2σ) initialiser.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v as f32;
        }
    })
}

pub const INIT_STD: f64 = 0.02;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add(format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], INIT_STD));
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    /// Linear layer initialised to the identity map (square only).
    pub fn identity(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let w = ps.add(
            format!("{name}.weight"),
            Tensor::from_fn(vec![dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 }),
        );
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(vec![dim]));
        Self {
            w,
            b,
            fan_in: dim,
            fan_out: dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        let h = g.matmul(x, p.get(self.w));
        g.add(h, p.get(self.b))
    }
}

/// Layer normalisation with learnable scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        g.layer_norm(x, Some(p.get(self.gamma)), Some(p.get(self.beta)))
    }
}

/// Adaptive-moment optimizer state for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ps.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: ps.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters whose gradient is `None` (or masked out by
    /// `active`) are left untouched, moments included.
    pub fn step(
        &mut self,
        ps: &mut ParamSet,
        grads: &[Option<Vec<f32>>],
        lr: f64,
        active: impl Fn(usize) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if !active(i) {
                continue;
            }
            let data = ps.tensors[i].data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let gj = grad[j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= (lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
    }
}

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    None,
    /// Cosine decay to 1e-2 of the base rate, no warmup.
    Cosine,
}

impl Schedule {
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::None => base,
            Schedule::Cosine => {
                let floor = base * 1e-2;
                if total <= 1 {
                    return base;
                }
                let p = (step as f64 / (total - 1) as f64).min(1.0);
                floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::new(vec![2], vec![3.0f32, -2.0]).unwrap());
        let mut opt = Adam::new(&ps);
        for _ in 0..500 {
            let mut g = Graph::<f32>::new();
            let b = ps.bind(&mut g, true);
            let x = b.get(id);
            let sq = g.mul(x, x);
            let loss = g.sum_all(sq);
            g.backward(loss);
            opt.step(&mut ps, &b.grads(&g), 0.05, |_| true);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = Schedule::Cosine;
        assert!((s.lr(1.0, 0, 11) - 1.0).abs() < 1e-12);
        assert!((s.lr(1.0, 10, 11) - 0.01).abs() < 1e-12);
        assert_eq!(Schedule::None.lr(0.3, 5, 10), 0.3);
    }

    #[test]
    fn trunc_normal_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = trunc_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn fingerprint_changes_with_values() {
        let mut ps = ParamSet::new();
        let id = ps.add("a", Tensor::zeros(vec![3]));
        let h0 = ps.fingerprint();
        ps.get_mut(id).data_mut()[1] = 1.0;
        assert_ne!(h0, ps.fingerprint());
    }
}
