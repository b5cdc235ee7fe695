//! Dense layers with explicit backward passes, and SGD with momentum.
//!
//! Models expose their parameters as an ordered list of slices. The same
//! order is used for gradient buffers (a zeroed clone of the model), the
//! optimizer's velocity, finite-difference checks and checkpoints.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Fully connected layer `y = W x + b` with row-major `W` (out × in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub out_dim: usize,
    pub in_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense { out_dim, in_dim, w: vec![0.0; out_dim * in_dim], b: vec![0.0; out_dim] }
    }

    /// He-normal weights, zero bias.
    pub fn random(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("positive std");
        let w = (0..out_dim * in_dim).map(|_| normal.sample(rng)).collect();
        Dense { out_dim, in_dim, w, b: vec![0.0; out_dim] }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.w[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, yo) in y.iter_mut().enumerate().take(self.out_dim) {
            *yo = self.b[o] + dot(self.row(o), x);
        }
    }

    /// Accumulates parameter gradients into `grad` and, if requested,
    /// overwrites `gx` with the input gradient.
    pub fn backward(&self, x: &[f64], gy: &[f64], gx: Option<&mut [f64]>, grad: &mut Dense) {
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[o] += g;
            let row = &mut grad.w[o * self.in_dim..(o + 1) * self.in_dim];
            for (r, xi) in row.iter_mut().zip(x) {
                *r += g * xi;
            }
        }
        if let Some(gx) = gx {
            gx.iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in gy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (gi, wi) in gx.iter_mut().zip(self.row(o)) {
                    *gi += g * wi;
                }
            }
        }
    }

    pub fn params(&self) -> [&[f64]; 2] {
        [&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.w, &mut self.b]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero gradients
/// from turning round-off into large relative errors.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Ordered parameter access shared by models and their gradient buffers.
pub trait Params {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v = value);
        }
    }

    /// `self += other`, parameter by parameter.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn flat(&self) -> Vec<f64> {
        self.params().concat()
    }

    /// Mutable reference to the `index`-th scalar in flat order.
    fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for p in self.params_mut() {
            if index < p.len() {
                return &mut p[index];
            }
            index -= p.len();
        }
        panic!("parameter index out of range");
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Stochastic gradient descent with classical momentum:
/// `v = m v + g; θ -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn step<P: Params>(&mut self, model: &mut P, grad: &P) {
        let g = grad.flat();
        if self.velocity.len() != g.len() {
            self.velocity = vec![0.0; g.len()];
        }
        let mut i = 0;
        for p in model.params_mut() {
            for x in p.iter_mut() {
                self.velocity[i] = self.momentum * self.velocity[i] + g[i];
                *x -= self.lr * self.velocity[i];
                i += 1;
            }
        }
    }
}
