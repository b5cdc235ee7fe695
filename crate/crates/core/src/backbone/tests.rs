use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::grid::voxelize;
use crate::nn::rel_err;

fn spec() -> GridSpec {
    GridSpec::new([6, 16, 4], (1.0, 7.0), (-1.0, 1.0)).unwrap()
}

fn random_cloud(seed: u64, n: usize) -> (Vec<Vec3>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let mut it = Vec::new();
    // clustered so that cells hold several points and have neighbors
    for _ in 0..n {
        let r: f64 = rng.random_range(2.0..4.0);
        let th: f64 = rng.random_range(0.0..1.2);
        let z: f64 = rng.random_range(-0.9..0.9);
        pts.push(Vec3::new(r * th.cos(), r * th.sin(), z));
        it.push(rng.random_range(0.0..1.0));
    }
    (pts, it)
}

fn setup(seed: u64, kappa: f64) -> (MiniVoxNet, BackboneInput) {
    let (pts, it) = random_cloud(seed, 300);
    let vox = voxelize(&pts, &spec());
    let input = BackboneInput::new(&vox, &pts, &it);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut net = MiniVoxNet::random(8, 5, kappa, &mut rng).unwrap();
    for b in net.l1.b.iter_mut().chain(net.l2.b.iter_mut()) {
        *b = rng.random_range(-0.3..0.3);
    }
    (net, input)
}

// Straight-line evaluation with explicit index arithmetic.
fn reference_features(net: &MiniVoxNet, input: &BackboneInput) -> Vec<f64> {
    let (h, f) = (net.l1.out_dim, net.l2.out_dim);
    let g: Vec<Vec<f64>> = input
        .stats
        .iter()
        .map(|s| {
            let hidden: Vec<f64> = (0..h)
                .map(|j| {
                    let mut a = net.l1.b[j];
                    for (k, sk) in s.iter().enumerate() {
                        a += net.l1.w[j * STATS_DIM + k] * sk;
                    }
                    a.max(0.0)
                })
                .collect();
            (0..f)
                .map(|c| {
                    let mut a = net.l2.b[c];
                    for j in 0..h {
                        a += net.l2.w[c * h + j] * hidden[j];
                    }
                    a
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for (slot, nbs) in input.neighbors.iter().enumerate() {
        for c in 0..f {
            if nbs.is_empty() {
                out.push(g[slot][c]);
            } else {
                let m: f64 = nbs.iter().map(|&j| g[j as usize][c]).sum::<f64>() / nbs.len() as f64;
                out.push((1.0 - net.kappa) * g[slot][c] + net.kappa * m);
            }
        }
    }
    out
}

#[test]
fn forward_matches_reference() {
    let (net, input) = setup(1, 0.4);
    assert!(input.neighbors.iter().any(|n| !n.is_empty()));
    let (grid, _) = net.forward(&input);
    let want = reference_features(&net, &input);
    for (a, b) in grid.features.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_weights_give_zero_features() {
    let (_, input) = setup(2, 0.5);
    let net = MiniVoxNet::zeros(8, 5, 0.5);
    let (grid, _) = net.forward(&input);
    assert!(grid.features.iter().all(|&v| v == 0.0));
}

#[test]
fn zero_upstream_gives_zero_grads() {
    let (net, input) = setup(3, 0.5);
    let (grid, cache) = net.forward(&input);
    let mut g = net.zeros_like();
    net.backward(&input, &cache, &vec![0.0; grid.features.len()], &mut g);
    assert!(g.flat().iter().all(|&v| v == 0.0));
}

#[test]
fn without_mixing_cells_are_independent() {
    let (pts, mut it) = random_cloud(4, 300);
    let s = spec();
    let vox = voxelize(&pts, &s);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = MiniVoxNet::random(8, 5, 0.0, &mut rng).unwrap();
    let (a, _) = net.forward(&BackboneInput::new(&vox, &pts, &it));
    // perturb every point of slot 0
    for &i in &vox.slot_points[0] {
        it[i as usize] += 0.3;
    }
    let (b, _) = net.forward(&BackboneInput::new(&vox, &pts, &it));
    assert_ne!(a.feature(0), b.feature(0));
    for slot in 1..vox.occupancy.len() {
        assert_eq!(a.feature(slot), b.feature(slot));
    }
}

#[test]
fn point_order_within_cells_is_irrelevant() {
    let (pts, it) = random_cloud(5, 200);
    let s = spec();
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.reverse();
    let pts2: Vec<Vec3> = idx.iter().map(|&i| pts[i]).collect();
    let it2: Vec<f64> = idx.iter().map(|&i| it[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = MiniVoxNet::random(8, 5, 0.3, &mut rng).unwrap();
    let (a, _) = net.forward(&BackboneInput::new(&voxelize(&pts, &s), &pts, &it));
    let (b, _) = net.forward(&BackboneInput::new(&voxelize(&pts2, &s), &pts2, &it2));
    for (x, y) in a.features.iter().zip(&b.features) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn single_cell_reduces_to_mlp_backprop() {
    let s = spec();
    let pts = vec![Vec3::new(3.0, 0.2, 0.1), Vec3::new(3.1, 0.25, 0.0)];
    let it = vec![0.2, 0.4];
    let vox = voxelize(&pts, &s);
    assert_eq!(vox.occupancy.len(), 1);
    let input = BackboneInput::new(&vox, &pts, &it);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = MiniVoxNet::random(4, 2, 0.0, &mut rng).unwrap();
    let (_, cache) = net.forward(&input);
    let up = [1.0, -2.0];
    let mut g = net.zeros_like();
    net.backward(&input, &cache, &up, &mut g);
    // analytic: dW2 = up ⊗ h, dh = W2ᵀ up ⊙ [h > 0], dW1 = dh ⊗ s
    let s0 = input.stats[0];
    let h: Vec<f64> =
        (0..4).map(|j| (net.l1.b[j] + (0..8).map(|k| net.l1.w[j * 8 + k] * s0[k]).sum::<f64>()).max(0.0)).collect();
    for c in 0..2 {
        for j in 0..4 {
            assert!((g.l2.w[c * 4 + j] - up[c] * h[j]).abs() < 1e-12);
        }
    }
    for j in 0..4 {
        let dh = if h[j] > 0.0 { up[0] * net.l2.w[j] + up[1] * net.l2.w[4 + j] } else { 0.0 };
        for k in 0..8 {
            assert!((g.l1.w[j * 8 + k] - dh * s0[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_matches_finite_differences() {
    let (mut net, input) = setup(6, 0.35);
    let (grid, cache) = net.forward(&input);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let up: Vec<f64> = (0..grid.features.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = net.zeros_like();
    net.backward(&input, &cache, &up, &mut g);
    let analytic = g.flat();
    let objective = |n: &MiniVoxNet| crate::nn::dot(&n.forward(&input).0.features, &up);
    let eps = 1e-4;
    let total = net.param_count();
    for _ in 0..50 {
        let i = rng.random_range(0..total);
        let w0 = *net.scalar_mut(i);
        *net.scalar_mut(i) = w0 + eps;
        let up_v = objective(&net);
        *net.scalar_mut(i) = w0 - eps;
        let dn_v = objective(&net);
        *net.scalar_mut(i) = w0;
        let fd = (up_v - dn_v) / (2.0 * eps);
        assert!(rel_err(analytic[i], fd, 1e-6) < 1e-5, "param {i}: {} vs {fd}", analytic[i]);
    }
}
