//! Per-voxel feature network over pooled point statistics.
//!
//! Each occupied cell is summarized by eight statistics, pushed through a
//! 2-layer MLP, and then blended with the mean output of its occupied face
//! neighbors:
//!
//! `U_i = (1 − κ) g_i + κ · mean_{j ∈ N(i)} g_j`, `g = W2 relu(W1 s + b1) + b2`.
//!
//! A cell without occupied neighbors keeps `U_i = g_i`.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::geom::Vec3;
use crate::grid::{CylGrid, GridSpec, Occupancy, Voxelization};
use crate::nn::{relu_inplace, Dense, Params};
use crate::{Error, Result};

pub const STATS_DIM: usize = 8;

/// Cells per parallel work unit. Reductions combine chunks in index order,
/// so results do not depend on the thread count.
const CHUNK: usize = 256;

/// Pooled statistics of the points in one cell: mean offset from the cell
/// center in the local (radial, tangential, vertical) frame divided by the
/// cell extent (3), per-axis variance in the same frame as a fraction of a
/// uniform distribution over the cell (3), mean intensity, ln(count).
pub fn cell_stats(spec: &GridSpec, cell: u32, points: &[Vec3], intensity: &[f64]) -> [f64; STATS_DIM] {
    let n = points.len() as f64;
    let center = spec.cell_center(cell);
    let (r_c, theta, _) = GridSpec::to_cylindrical(&center);
    let [dr, da, dz] = spec.cell_size();
    let size = [dr, r_c * da, dz];
    let e_r = Vec3::new(theta.cos(), theta.sin(), 0.0);
    let e_t = Vec3::new(-theta.sin(), theta.cos(), 0.0);
    let local = |p: &Vec3| {
        let d = p - center;
        [d.dot(&e_r), d.dot(&e_t), d.z]
    };
    let mut mean = [0.0; 3];
    for p in points {
        let l = local(p);
        for a in 0..3 {
            mean[a] += l[a] / n;
        }
    }
    let mut var = [0.0; 3];
    for p in points {
        let l = local(p);
        for a in 0..3 {
            var[a] += (l[a] - mean[a]).powi(2) / n;
        }
    }
    let mut s = [0.0; STATS_DIM];
    for a in 0..3 {
        s[a] = mean[a] / size[a];
        s[3 + a] = 12.0 * var[a] / (size[a] * size[a]);
    }
    s[6] = 4.0 * (intensity.iter().sum::<f64>() / n - 0.5);
    s[7] = 0.5 * n.ln() - 1.0;
    s
}

/// Everything the backbone needs from one voxelized scan.
#[derive(Debug, Clone)]
pub struct BackboneInput {
    pub occupancy: Arc<Occupancy>,
    pub stats: Vec<[f64; STATS_DIM]>,
    /// Occupied face-neighbor slots of each slot.
    pub neighbors: Vec<Vec<u32>>,
}

impl BackboneInput {
    pub fn new(vox: &Voxelization, points: &[Vec3], intensity: &[f64]) -> Self {
        let occ = &vox.occupancy;
        let stats = occ
            .cells()
            .iter()
            .zip(&vox.slot_points)
            .map(|(&cell, idx)| {
                let pts: Vec<Vec3> = idx.iter().map(|&i| points[i as usize]).collect();
                let it: Vec<f64> = idx.iter().map(|&i| intensity[i as usize]).collect();
                cell_stats(occ.spec(), cell, &pts, &it)
            })
            .collect();
        let neighbors = occ
            .cells()
            .iter()
            .map(|&cell| occ.spec().neighbors6(cell).filter_map(|nb| occ.slot(nb).map(|s| s as u32)).collect())
            .collect();
        BackboneInput { occupancy: Arc::clone(&vox.occupancy), stats, neighbors }
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniVoxNet {
    pub l1: Dense,
    pub l2: Dense,
    /// Neighbor blend weight κ in [0, 1].
    pub kappa: f64,
}

/// Forward intermediates needed by [`MiniVoxNet::backward`].
#[derive(Debug, Clone)]
pub struct BackboneCache {
    hidden: Vec<f64>,
    pre_mix: Vec<f64>,
}

impl MiniVoxNet {
    pub fn zeros(hidden_dim: usize, feature_dim: usize, kappa: f64) -> Self {
        MiniVoxNet { l1: Dense::zeros(hidden_dim, STATS_DIM), l2: Dense::zeros(feature_dim, hidden_dim), kappa }
    }

    pub fn random(hidden_dim: usize, feature_dim: usize, kappa: f64, rng: &mut impl Rng) -> Result<Self> {
        let net = MiniVoxNet {
            l1: Dense::random(hidden_dim, STATS_DIM, rng),
            l2: Dense::random(feature_dim, hidden_dim, rng),
            kappa,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l1.out_dim < 4 {
            return Err(Error::Invalid("backbone hidden width must be >= 4".into()));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Invalid(format!("neighbor mix must be in [0, 1], got {}", self.kappa)));
        }
        if !self.all_finite() {
            return Err(Error::Invalid("backbone weights must be finite".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.l1.out_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.l2.out_dim
    }

    pub fn zeros_like(&self) -> Self {
        MiniVoxNet::zeros(self.hidden_dim(), self.feature_dim(), self.kappa)
    }

    pub fn forward(&self, input: &BackboneInput) -> (CylGrid, BackboneCache) {
        let (h, f, n) = (self.hidden_dim(), self.feature_dim(), input.len());
        let mut hidden = vec![0.0; n * h];
        let mut pre_mix = vec![0.0; n * f];
        hidden
            .par_chunks_mut(CHUNK * h)
            .zip(pre_mix.par_chunks_mut(CHUNK * f))
            .enumerate()
            .for_each(|(chunk, (hs, gs))| {
                for (k, (hrow, grow)) in hs.chunks_exact_mut(h).zip(gs.chunks_exact_mut(f)).enumerate() {
                    let slot = chunk * CHUNK + k;
                    self.l1.forward(&input.stats[slot], hrow);
                    relu_inplace(hrow);
                    self.l2.forward(hrow, grow);
                }
            });

        // second phase reads the completed pre-mix buffer
        let mut features = vec![0.0; n * f];
        features.par_chunks_mut(CHUNK * f).enumerate().for_each(|(chunk, out)| {
            for (k, row) in out.chunks_exact_mut(f).enumerate() {
                let slot = chunk * CHUNK + k;
                let own = &pre_mix[slot * f..(slot + 1) * f];
                let nbs = &input.neighbors[slot];
                if nbs.is_empty() || self.kappa == 0.0 {
                    row.copy_from_slice(own);
                    continue;
                }
                let w = self.kappa / nbs.len() as f64;
                for (c, r) in row.iter_mut().enumerate() {
                    *r = (1.0 - self.kappa) * own[c];
                }
                for &nb in nbs {
                    let other = &pre_mix[nb as usize * f..(nb as usize + 1) * f];
                    for (r, o) in row.iter_mut().zip(other) {
                        *r += w * o;
                    }
                }
            }
        });
        let grid = CylGrid { occupancy: Arc::clone(&input.occupancy), dim: f, features };
        (grid, BackboneCache { hidden, pre_mix })
    }

    /// Accumulates weight gradients given `∂L/∂U` (slot-major).
    pub fn backward(&self, input: &BackboneInput, cache: &BackboneCache, d_features: &[f64], grad: &mut MiniVoxNet) {
        let (h, f, n) = (self.hidden_dim(), self.feature_dim(), input.len());
        if cache.pre_mix.len() != n * f {
            panic!("backbone cache does not belong to this input");
        }
        // transpose of the neighbor mix
        let mut d_pre = vec![0.0; n * f];
        for slot in 0..n {
            let d_u = &d_features[slot * f..(slot + 1) * f];
            let nbs = &input.neighbors[slot];
            if nbs.is_empty() || self.kappa == 0.0 {
                for (d, u) in d_pre[slot * f..(slot + 1) * f].iter_mut().zip(d_u) {
                    *d += u;
                }
                continue;
            }
            for (d, u) in d_pre[slot * f..(slot + 1) * f].iter_mut().zip(d_u) {
                *d += (1.0 - self.kappa) * u;
            }
            let w = self.kappa / nbs.len() as f64;
            for &nb in nbs {
                for (d, u) in d_pre[nb as usize * f..(nb as usize + 1) * f].iter_mut().zip(d_u) {
                    *d += w * u;
                }
            }
        }

        let partials: Vec<MiniVoxNet> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let mut g = self.zeros_like();
                let mut d_hidden = vec![0.0; h];
                for slot in chunk * CHUNK..((chunk + 1) * CHUNK).min(n) {
                    let dg = &d_pre[slot * f..(slot + 1) * f];
                    if dg.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let hrow = &cache.hidden[slot * h..(slot + 1) * h];
                    self.l2.backward(hrow, dg, Some(&mut d_hidden), &mut g.l2);
                    for (d, hv) in d_hidden.iter_mut().zip(hrow) {
                        if *hv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    self.l1.backward(&input.stats[slot], &d_hidden, None, &mut g.l1);
                }
                g
            })
            .collect();
        for p in &partials {
            grad.add_assign(p);
        }
    }

    /// Pre-mix MLP output of every slot (for diagnostics and tests).
    pub fn pre_mix<'a>(&self, cache: &'a BackboneCache) -> &'a [f64] {
        &cache.pre_mix
    }
}

impl Params for MiniVoxNet {
    fn params(&self) -> Vec<&[f64]> {
        [self.l1.params(), self.l2.params()].concat()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let [a, b] = self.l1.params_mut();
        let [c, d] = self.l2.params_mut();
        vec![a, b, c, d]
    }
}

#[cfg(test)]
mod tests;
