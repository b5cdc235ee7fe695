//! The per-voxel classifier and the ray-query head.

use rand::Rng;

use crate::grid::CylGrid;
use crate::nn::{relu_inplace, Dense, Params};

/// Upper clamp of the density pre-activation.
pub const DENSITY_CLAMP: f64 = 15.0;

pub const NERF_HIDDEN: usize = 64;

/// `exp(min(x, 15))`.
pub fn trunc_exp(x: f64) -> f64 {
    x.min(DENSITY_CLAMP).exp()
}

/// Derivative convention: zero at and beyond the clamp.
pub fn trunc_exp_grad(x: f64) -> f64 {
    if x < DENSITY_CLAMP {
        x.exp()
    } else {
        0.0
    }
}

/// 2-layer MLP: feature → 64 (ReLU) → C logits and one density
/// pre-activation (last output), density = `trunc_exp(raw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NerfHead {
    pub l1: Dense,
    pub l2: Dense,
    pub classes: usize,
}

/// Forward values kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NerfEval {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub raw_density: f64,
    pub density: f64,
}

impl NerfHead {
    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        NerfHead { l1: Dense::zeros(NERF_HIDDEN, feature_dim), l2: Dense::zeros(classes + 1, NERF_HIDDEN), classes }
    }

    /// He-initialized weights. The density row starts with non-negative
    /// weights and bias `density_bias`, so that empty space (zero feature,
    /// zero hidden activity) begins nearly transparent.
    pub fn random(feature_dim: usize, classes: usize, density_bias: f64, rng: &mut impl Rng) -> Self {
        let l1 = Dense::random(NERF_HIDDEN, feature_dim, rng);
        let mut l2 = Dense::random(classes + 1, NERF_HIDDEN, rng);
        let row = classes * NERF_HIDDEN;
        for w in &mut l2.w[row..row + NERF_HIDDEN] {
            *w = w.abs();
        }
        l2.b[classes] = density_bias;
        NerfHead { l1, l2, classes }
    }

    pub fn feature_dim(&self) -> usize {
        self.l1.in_dim
    }

    pub fn forward(&self, feature: &[f64]) -> NerfEval {
        let mut hidden = vec![0.0; NERF_HIDDEN];
        self.l1.forward(feature, &mut hidden);
        relu_inplace(&mut hidden);
        let mut out = vec![0.0; self.classes + 1];
        self.l2.forward(&hidden, &mut out);
        let raw_density = out.pop().expect("density output");
        NerfEval { hidden, logits: out, raw_density, density: trunc_exp(raw_density) }
    }

    /// Accumulates head gradients; writes the feature gradient if requested.
    pub fn backward(
        &self,
        feature: &[f64],
        eval: &NerfEval,
        d_logits: &[f64],
        d_density: f64,
        grad: &mut NerfHead,
        d_feature: Option<&mut [f64]>,
    ) {
        let mut d_out = Vec::with_capacity(self.classes + 1);
        d_out.extend_from_slice(d_logits);
        d_out.push(d_density * trunc_exp_grad(eval.raw_density));
        let mut d_hidden = vec![0.0; NERF_HIDDEN];
        self.l2.backward(&eval.hidden, &d_out, Some(&mut d_hidden), &mut grad.l2);
        for (d, h) in d_hidden.iter_mut().zip(&eval.hidden) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        self.l1.backward(feature, &d_hidden, d_feature, &mut grad.l1);
    }

    pub fn zeros_like(&self) -> Self {
        NerfHead::zeros(self.feature_dim(), self.classes)
    }
}

impl Params for NerfHead {
    fn params(&self) -> Vec<&[f64]> {
        [self.l1.params(), self.l2.params()].concat()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let [a, b] = self.l1.params_mut();
        let [c, d] = self.l2.params_mut();
        vec![a, b, c, d]
    }
}

/// Linear per-voxel classifier `W U + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxHead {
    pub layer: Dense,
}

impl VoxHead {
    pub fn zeros(feature_dim: usize, classes: usize) -> Self {
        VoxHead { layer: Dense::zeros(classes, feature_dim) }
    }

    pub fn random(feature_dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        VoxHead { layer: Dense::random(classes, feature_dim, rng) }
    }

    pub fn classes(&self) -> usize {
        self.layer.out_dim
    }

    /// Slot-major `occupied × C` logits.
    pub fn forward(&self, grid: &CylGrid) -> Vec<f64> {
        let c = self.classes();
        let mut out = vec![0.0; grid.occupancy.len() * c];
        for (slot, row) in out.chunks_exact_mut(c).enumerate() {
            self.layer.forward(grid.feature(slot), row);
        }
        out
    }

    /// Accumulates head gradients and adds feature gradients into `d_features`.
    pub fn backward(&self, grid: &CylGrid, d_logits: &[f64], grad: &mut VoxHead, d_features: &mut [f64]) {
        let c = self.classes();
        let dim = grid.dim;
        let mut gx = vec![0.0; dim];
        for (slot, g) in d_logits.chunks_exact(c).enumerate() {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.layer.backward(grid.feature(slot), g, Some(&mut gx), &mut grad.layer);
            for (d, x) in d_features[slot * dim..(slot + 1) * dim].iter_mut().zip(&gx) {
                *d += x;
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        VoxHead::zeros(self.layer.in_dim, self.classes())
    }
}

impl Params for VoxHead {
    fn params(&self) -> Vec<&[f64]> {
        self.layer.params().to_vec()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layer.params_mut().into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_outputs() {
        let head = NerfHead::zeros(5, 3);
        let e = head.forward(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(e.logits, vec![0.0; 3]);
        assert_eq!(e.density, 1.0);
    }

    #[test]
    fn density_is_clamped() {
        assert_eq!(trunc_exp(20.0), 15f64.exp());
        assert_eq!(trunc_exp_grad(20.0), 0.0);
        assert_eq!(trunc_exp_grad(1.0), 1f64.exp());
    }

    #[test]
    fn density_init_is_transparent_for_empty_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = NerfHead::random(4, 3, -6.0, &mut rng);
        assert!((head.forward(&[0.0; 4]).density - (-6f64).exp()).abs() < 1e-15);
    }
}
