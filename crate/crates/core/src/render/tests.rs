use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geom::Vec3;
use crate::grid::{GridSpec, Occupancy};
use crate::nn::{dot, rel_err};

#[test]
fn transparent_ray() {
    let at = compute_alpha_t(&[0.0; 4], &[0.5; 4]);
    assert_eq!(at.alphas, vec![0.0; 4]);
    assert_eq!(at.trans, vec![1.0; 4]);
    let (lp, yp) = render_pixel(&at, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 1.0, 2.0, 3.0], 3);
    assert_eq!(lp, vec![0.0; 3]);
    for y in yp {
        assert!((y - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn half_opacity() {
    let at = compute_alpha_t(&[std::f64::consts::LN_2], &[1.0]);
    assert!((at.alphas[0] - 0.5).abs() < 1e-15);
}

#[test]
fn three_sample_example() {
    let sigma = [1.0, 0.5, 2.0];
    let at = compute_alpha_t(&sigma, &[1.0; 3]);
    // direct evaluation
    let alpha: Vec<f64> = sigma.iter().map(|s| 1.0 - (-s).exp()).collect();
    let trans = [1.0, 1.0 - alpha[0], (1.0 - alpha[0]) * (1.0 - alpha[1])];
    for m in 0..3 {
        assert!((at.alphas[m] - alpha[m]).abs() < 1e-15);
        assert!((at.trans[m] - trans[m]).abs() < 1e-15);
    }
    for (a, b) in at.alphas.iter().zip([0.632121, 0.393469, 0.864665]) {
        assert!((a - b).abs() < 1e-6);
    }
    for (a, b) in at.trans.iter().zip([1.0, 0.367879, 0.223130]) {
        assert!((a - b).abs() < 1e-6);
    }

    let logits = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let (lp, yp) = render_pixel(&at, &logits, 2);
    let want_lp = [trans[0] * alpha[0], trans[1] * alpha[1]];
    let z = want_lp[0].exp() + want_lp[1].exp();
    let want_yp = [want_lp[0].exp() / z, want_lp[1].exp() / z];
    for c in 0..2 {
        assert!((lp[c] - want_lp[c]).abs() < 1e-15);
        assert!((yp[c] - want_yp[c]).abs() < 1e-15);
    }
    assert!((lp[0] - 0.632121).abs() < 1e-6 && (lp[1] - 0.144749).abs() < 1e-6);
    assert!((yp[0] - 0.6195).abs() < 1e-4 && (yp[1] - 0.3805).abs() < 1e-4);
}

#[test]
fn opaque_single_sample() {
    let at = compute_alpha_t(&[1e3], &[1.0]);
    let (lp, _) = render_pixel(&at, &[0.3, -2.0], 2);
    assert_eq!(lp, vec![0.3, -2.0]);
}

#[test]
fn single_sample_density_gradient_closed_form() {
    let (sigma, delta) = (0.7, 0.4);
    let l1 = [1.5, -0.5];
    let g = [0.3, 2.0];
    let at = compute_alpha_t(&[sigma], &[delta]);
    let (_, ds) = render_backward(&at, &[delta], &l1, 2, &g);
    let want = delta * (-sigma * delta).exp() * dot(&l1, &g);
    assert!((ds[0] - want).abs() < 1e-15);
    let (dl, ds) = render_backward(&at, &[delta], &l1, 2, &[0.0, 0.0]);
    assert!(dl.iter().chain(&ds).all(|&v| v == 0.0));
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (m, c) = (8, 4);
    let mut sigma: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
    let deltas: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..0.6)).collect();
    let mut logits: Vec<f64> = (0..m * c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let g: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |s: &[f64], l: &[f64]| dot(&render_pixel(&compute_alpha_t(s, &deltas), l, c).0, &g);
    let (dl, ds) = render_backward(&compute_alpha_t(&sigma, &deltas), &deltas, &logits, c, &g);
    let eps = 1e-5;
    for k in 0..m {
        let s0 = sigma[k];
        sigma[k] = s0 + eps;
        let up = objective(&sigma, &logits);
        sigma[k] = s0 - eps;
        let dn = objective(&sigma, &logits);
        sigma[k] = s0;
        assert!(rel_err(ds[k], (up - dn) / (2.0 * eps), 1e-8) < 1e-5);
    }
    for i in 0..m * c {
        let l0 = logits[i];
        logits[i] = l0 + eps;
        let up = objective(&sigma, &logits);
        logits[i] = l0 - eps;
        let dn = objective(&sigma, &logits);
        logits[i] = l0;
        assert!(rel_err(dl[i], (up - dn) / (2.0 * eps), 1e-8) < 1e-5);
    }
}

#[test]
fn occluder_hides_later_samples() {
    let sigma = [0.1, 50.0, 3.0, 3.0];
    let deltas = [0.4; 4];
    let at = compute_alpha_t(&sigma, &deltas);
    let total: f64 = (0..4).map(|m| at.weight(m)).sum();
    let behind: f64 = (2..4).map(|m| at.weight(m)).sum();
    assert!(behind / total < 1e-8);
}

#[test]
fn default_spacing() {
    let s = RaySampling::default();
    assert_eq!(s.samples, 458);
    assert!((s.delta() - 0.104148).abs() < 1e-6);
    assert!((s.distance(0) - (2.3 + 0.5 * s.delta())).abs() < 1e-12);
}

fn test_grid(seed: u64, dim: usize) -> CylGrid {
    let spec = GridSpec::new([10, 36, 4], (1.0, 11.0), (-2.0, 2.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a band of occupied cells in front of the camera
    let cells: Vec<u32> = (0..spec.cell_count() as u32)
        .filter(|&c| {
            let [ir, ia, _] = spec.unlinear(c);
            (3..8).contains(&ir) && !(4..32).contains(&ia) && rng.random_bool(0.6)
        })
        .collect();
    let occ = Occupancy::from_cells(spec, cells);
    let mut g = CylGrid::zeros(Arc::new(occ), dim);
    for v in g.features.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    g
}

#[test]
fn empty_grid_renders_uniform() {
    let spec = GridSpec::new([4, 8, 2], (0.0, 20.0), (-2.0, 2.0)).unwrap();
    let grid = CylGrid::zeros(Arc::new(Occupancy::from_cells(spec, vec![])), 3);
    let head = NerfHead::zeros(3, 4);
    let cam = CameraModel::forward_facing(8, 4, 90.0, Vec3::zeros()).unwrap();
    let sampling = RaySampling::new(1.0, 10.0, 16).unwrap();
    let b = render_bundle(&cam, &grid, &head, &all_pixels(&cam), sampling, true).unwrap();
    for t in b.traces.as_ref().unwrap() {
        assert!(t.densities.iter().all(|&d| d == 1.0));
    }
    assert!(b.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn invalid_pixel_is_an_error() {
    let grid = test_grid(1, 3);
    let head = NerfHead::zeros(3, 2);
    let cam = CameraModel::forward_facing(8, 4, 90.0, Vec3::zeros()).unwrap();
    let r = render_bundle(&cam, &grid, &head, &[(8, 0)], RaySampling::new(1.0, 10.0, 4).unwrap(), false);
    assert!(matches!(r, Err(Error::PixelOutOfBounds { .. })));
}

#[test]
fn end_to_end_feature_gradient() {
    let mut grid = test_grid(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let head = NerfHead::random(4, 3, -1.0, &mut rng);
    let cam = CameraModel::forward_facing(12, 6, 100.0, Vec3::new(0.2, 0.1, 0.0)).unwrap();
    let sampling = RaySampling::new(1.5, 11.0, 40).unwrap();
    let pixels = all_pixels(&cam);
    let up: Vec<f64> = (0..pixels.len() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |g: &CylGrid| {
        dot(&render_bundle(&cam, g, &head, &pixels, sampling, false).unwrap().logits, &up)
    };
    let mut hg = head.zeros_like();
    let mut gg = vec![0.0; grid.features.len()];
    render_bundle_backward(&cam, &grid, &head, &pixels, sampling, &up, &mut hg, &mut gg).unwrap();
    // entries with a nonzero analytic gradient, plus a few random ones
    let mut idx: Vec<usize> = (0..gg.len()).filter(|&i| gg[i].abs() > 1e-6).take(15).collect();
    idx.extend((0..5).map(|_| rng.random_range(0..gg.len())));
    assert!(idx.len() > 10);
    let eps = 1e-5;
    for i in idx {
        let v0 = grid.features[i];
        grid.features[i] = v0 + eps;
        let a = objective(&grid);
        grid.features[i] = v0 - eps;
        let b = objective(&grid);
        grid.features[i] = v0;
        let fd = (a - b) / (2.0 * eps);
        assert!(rel_err(gg[i], fd, 1e-6) < 1e-4, "entry {i}: {} vs {fd}", gg[i]);
    }
}

#[test]
fn entropy_dump_scaling() {
    let b = RayBundle {
        sampling: RaySampling::default(),
        classes: 4,
        pixels: vec![(0, 0), (1, 0)],
        logits: vec![0.0; 8],
        probs: vec![1.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25],
        traces: None,
    };
    let img = entropy_image(&b, 2, 1);
    assert_eq!(img.data, vec![0, 255]);
}

proptest! {
    #[test]
    fn render_invariants(
        sigma in prop::collection::vec(0.0f64..30.0, 1..40),
        delta in 0.01f64..1.0,
        seed in any::<u64>(),
    ) {
        let m = sigma.len();
        let deltas = vec![delta; m];
        let at = compute_alpha_t(&sigma, &deltas);
        prop_assert_eq!(at.trans[0], 1.0);
        for k in 1..m {
            prop_assert!(at.trans[k] <= at.trans[k - 1]);
        }
        prop_assert!(at.alphas.iter().all(|a| (0.0..=1.0).contains(a)));
        let wsum: f64 = (0..m).map(|k| at.weight(k)).sum();
        prop_assert!((wsum - (1.0 - at.t_final)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..m * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (_, yp) = render_pixel(&at, &logits, 3);
        prop_assert!((yp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(yp.iter().all(|&p| p >= 0.0));
    }
}
