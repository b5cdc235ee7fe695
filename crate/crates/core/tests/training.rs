use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use raysem_core::eval::{boundary_band, parallax_report, ParallaxSettings};
use raysem_core::geom::Vec3;
use raysem_core::nn::Sgd;
use raysem_core::pseudo::{oracle_masks, perspective_baseline};
use raysem_core::scene::{self, SceneConfig};
use raysem_core::train::dataset::Dataset;
use raysem_core::train::{prepare_all, run_experiment, train_step, Model, Mode, TrainConfig, TrainState};
use raysem_core::{GridSpec, LossWeights, RaySampling, IGNORE};

fn small_scenes() -> SceneConfig {
    SceneConfig {
        lidar_azimuth_beams: 90,
        lidar_elevation_beams: 10,
        camera_width: 32,
        camera_height: 16,
        grid: GridSpec::new([24, 90, 8], (1.0, 25.0), (-2.0, 4.0)).unwrap(),
        ..SceneConfig::default()
    }
}

#[test]
fn repeated_steps_on_one_scene_reduce_the_loss() {
    let mut decreasing = 0;
    for seed in 0..5 {
        let ds = Dataset::generate(&small_scenes(), seed, 2, 1).unwrap();
        let cfg = TrainConfig {
            mode: Mode::Full,
            seed,
            lr: 1e-2,
            hidden_dim: 16,
            feature_dim: 8,
            sampling: RaySampling::new(2.3, 25.0, 32).unwrap(),
            ..TrainConfig::default()
        };
        let sc = prepare_all(&ds, &cfg);
        let mut st = TrainState { model: Model::init(&cfg, ds.classes()).unwrap(), optimizer: Sgd::new(cfg.lr, cfg.momentum) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let losses: Vec<f64> =
            (0..50).map(|_| train_step(&mut st, &cfg, &sc[0], Some(&sc[1]), 0, &mut rng).unwrap().total).collect();
        if losses[49] < losses[0] {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 4, "{decreasing} of 5 seeds decreased");
}

#[test]
fn fully_labeled_trivial_scenes_are_learned() {
    // reflectivity is an exact class signature
    let scenes = SceneConfig { intensity_noise: 0.0, intensity_spread: 0.0, ..SceneConfig::default() };
    let ds = Dataset::generate(&scenes, 1, 40, 0).unwrap();
    let cfg = TrainConfig {
        mode: Mode::SupOnly,
        labeled_fraction: 1.0,
        heldout_fraction: 0.2,
        steps_per_epoch: 100,
        hidden_dim: 64,
        feature_dim: 32,
        sampling: RaySampling::new(2.3, 25.0, 32).unwrap(),
        render_eval_scenes: 0,
        weights: LossWeights { epochs: 10, ..LossWeights::default() },
        ..TrainConfig::default()
    };
    let report = run_experiment(&ds, &cfg, None).unwrap();
    assert!(report.miou() > 0.9, "held-out mIoU {}, per class {:?}", report.miou(), report.iou());
}

#[test]
fn perspective_errors_concentrate_at_silhouettes() {
    let config = small_scenes();
    let pattern = config.lidar_pattern();
    let (mut band, mut interior) = ((0usize, 0usize), (0usize, 0usize));
    for s in scene::scene_seeds(3, 8) {
        let base = scene::generate_scene(&config, s).unwrap();
        let scan = scene::simulate_lidar(&base, &pattern);
        let sc = base.with_camera_offset(Vec3::new(0.0, 1.0, 0.0));
        let img = scene::render_label_image(&sc, &sc.camera);
        let near_edge = boundary_band(&img, 2);
        let masks = oracle_masks(&img, s, 0);
        // perfect 3D predictions isolate the projection error
        let labels = perspective_baseline(&scan, &sc.camera, &scan.labels, &masks, config.classes);
        for (i, p) in scan.points.iter().enumerate() {
            let (Some(proj), true) = (sc.camera.project_point(p), labels[i] != IGNORE) else { continue };
            let (u, v) = proj.pixel();
            let bucket = if near_edge[img.index(u, v)] { &mut band } else { &mut interior };
            bucket.1 += 1;
            if labels[i] != scan.labels[i] {
                bucket.0 += 1;
            }
        }
    }
    let rate = |(wrong, n): (usize, usize)| wrong as f64 / n as f64;
    assert!(band.1 > 0 && interior.1 > 0);
    assert!(rate(band) > rate(interior), "band {band:?} interior {interior:?}");
}

#[test]
fn perspective_accuracy_degrades_with_offset() {
    let settings = ParallaxSettings {
        scenes: 6,
        seed: 2,
        direction: Vec3::new(0.0, 1.0, 0.0),
        sampling: RaySampling::new(0.5, 26.0, 128).unwrap(),
        mask_perturbation: 1,
        entropy_threshold: 1.6,
        band_radius: 2,
    };
    let rows = parallax_report(&small_scenes(), &settings, &[0.0, 0.5, 1.0, 2.0]).unwrap();
    let acc: Vec<f64> = rows.iter().map(|r| r.perspective.accuracy()).collect();
    assert!(acc.windows(2).all(|w| w[1] < w[0]), "{acc:?}");
    assert!(rows[2].ray.band_accuracy() > rows[2].perspective.band_accuracy());
}
