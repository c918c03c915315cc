//! Named parameter collections, graph binding and optimizers.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Ordered, named collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = value;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, value));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n, t.clone());
        }
        out
    }

    /// Copies every entry of `other` into `self`, replacing same-named entries.
    pub fn merge(&mut self, other: &Self) {
        for (n, t) in other.iter() {
            self.insert(n, t.clone());
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for (n, t) in self.iter() {
            h.bytes(n.as_bytes());
            for &d in t.shape() {
                h.u64(d as u64);
            }
            for &x in t.data() {
                h.u64(x.as_f64().to_bits());
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Incremental FNV-1a hasher used for content fingerprints.
#[derive(Clone, Copy, Debug)]
pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn u64(&mut self, x: u64) {
        self.bytes(&x.to_le_bytes());
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters registered as leaves on a graph.
pub struct Bound {
    vars: HashMap<String, Var>,
    fingerprint: u64,
}

impl Bound {
    /// Registers every parameter. `trainable = false` binds them as constants.
    pub fn new<T: Real>(g: &Graph<T>, params: &ParameterSet<T>, trainable: bool) -> Self {
        let mut vars = HashMap::with_capacity(params.len());
        for (n, t) in params.iter() {
            let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            vars.insert(n.to_string(), v);
        }
        Self { vars, fingerprint: params.fingerprint() }
    }

    /// Binds entries accepted by `trainable` as parameters and the rest as constants.
    pub fn with_trainable<T: Real>(g: &Graph<T>, params: &ParameterSet<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let mut vars = HashMap::with_capacity(params.len());
        for (n, t) in params.iter() {
            let v = if trainable(n) { g.param(t.clone()) } else { g.constant(t.clone()) };
            vars.insert(n.to_string(), v);
        }
        Self { vars, fingerprint: params.fingerprint() }
    }

    /// Fingerprint of the values that were bound.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects gradients for the bound parameters; missing ones are zero.
    pub fn grads<T: Real>(&self, params: &ParameterSet<T>, grads: &Gradients<T>) -> ParameterSet<T> {
        let mut out = ParameterSet::new();
        for (n, t) in params.iter() {
            let g = self
                .vars
                .get(n)
                .and_then(|&v| grads.get(v))
                .map(|g| g.clone().reshape(t.shape()).expect("gradient shape"))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(n, g);
        }
        out
    }
}

/// Adds `scale · src` into `dst` for matching names.
pub fn accumulate<T: Real>(dst: &mut ParameterSet<T>, src: &ParameterSet<T>, scale: T) {
    for (n, t) in src.iter() {
        match dst.get_mut(n) {
            Some(d) => d.add_assign_scaled(t, scale),
            None => dst.insert(n, t.map(|x| x * scale)),
        }
    }
}

/// Deterministic initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(std * self.rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Fan-in scaled linear weight `[fan_in, fan_out]`.
    pub fn linear<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }
}

pub trait Optimizer<T: Real> {
    fn step(&mut self, params: &mut ParameterSet<T>, grads: &ParameterSet<T>);
}

/// Plain gradient descent: `θ ← θ − lr·g`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl<T: Real> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut ParameterSet<T>, grads: &ParameterSet<T>) {
        let lr = T::lit(self.lr);
        for (n, g) in grads.iter() {
            if let Some(p) = params.get_mut(n) {
                p.add_assign_scaled(g, -lr);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u32,
    m: ParameterSet<T>,
    v: ParameterSet<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            t: 0,
            m: ParameterSet::new(),
            v: ParameterSet::new(),
        }
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParameterSet<T>, grads: &ParameterSet<T>) {
        self.t += 1;
        let norm: f64 = grads.iter().map(|(_, g)| g.sq_norm().as_f64()).sum::<f64>().sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = T::lit(self.lr * bc2.sqrt() / bc1);
        let (tb1, tb2, eps, tclip) = (T::lit(b1), T::lit(b2), T::lit(self.eps), T::lit(clip));
        for (n, g) in grads.iter() {
            let Some(p) = params.get_mut(n) else { continue };
            if !self.m.contains(n) {
                self.m.insert(n, Tensor::zeros(g.shape()));
                self.v.insert(n, Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(n).unwrap();
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = tb1 * *mi + (T::one() - tb1) * gi * tclip;
            }
            let v = self.v.get_mut(n).unwrap();
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                let gc = gi * tclip;
                *vi = tb2 * *vi + (T::one() - tb2) * gc * gc;
            }
            let (m, v) = (self.m.get(n).unwrap(), self.v.get(n).unwrap());
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= step * mi / (vi.sqrt() + eps);
            }
        }
    }
}
