use super::*;

fn cube_scene(offset: Vec3) -> Scene {
    let cube = Primitive {
        shape: Shape::Cuboid { min: Vec3::new(9.5, -0.5, -1.7), max: Vec3::new(10.5, 0.5, -0.7) },
        class: 1,
        instance: 2,
        intensity: 0.5,
    };
    Scene {
        objects: vec![ground_plane(1.7), cube],
        camera: CameraModel::forward_facing(160, 80, 90.0, offset).unwrap(),
        classes: 2,
        max_range: 40.0,
        rng_seed: 1,
        intensity_noise: 0.0,
    }
}

// Independent box oracle: intersect each face plane and test the hit inside
// the face rectangle.
fn box_faces_hit(min: &Vec3, max: &Vec3, o: &Vec3, d: &Vec3) -> Option<f64> {
    let mut best: Option<f64> = None;
    for axis in 0..3 {
        for bound in [min[axis], max[axis]] {
            if d[axis] == 0.0 {
                continue;
            }
            let t = (bound - o[axis]) / d[axis];
            if t <= 1e-9 {
                continue;
            }
            let p = o + d * t;
            let inside = (0..3).filter(|&a| a != axis).all(|a| p[a] >= min[a] - 1e-12 && p[a] <= max[a] + 1e-12);
            if inside && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

fn cylinder_hit(c: [f64; 2], r: f64, z0: f64, z1: f64, o: &Vec3, d: &Vec3) -> Option<f64> {
    let mut ts = Vec::new();
    // side: |(o + t d)_xy - c|^2 = r^2, solved with the half-b form
    let (px, py) = (o.x - c[0], o.y - c[1]);
    let a = d.x * d.x + d.y * d.y;
    let hb = px * d.x + py * d.y;
    let cc = px * px + py * py - r * r;
    let disc = hb * hb - a * cc;
    if a > 0.0 && disc >= 0.0 {
        for t in [(-hb - disc.sqrt()) / a, (-hb + disc.sqrt()) / a] {
            let z = o.z + t * d.z;
            if (z0..=z1).contains(&z) {
                ts.push(t);
            }
        }
    }
    for zc in [z0, z1] {
        if d.z != 0.0 {
            let t = (zc - o.z) / d.z;
            let p = o + d * t;
            if (p.x - c[0]).powi(2) + (p.y - c[1]).powi(2) <= r * r {
                ts.push(t);
            }
        }
    }
    ts.into_iter().filter(|&t| t > 1e-9).min_by(f64::total_cmp)
}

fn brute_force_range(scene: &Scene, d: &Vec3) -> Option<f64> {
    let o = Vec3::zeros();
    scene
        .objects
        .iter()
        .filter_map(|prim| match &prim.shape {
            Shape::Plane { normal, offset } => {
                let t = (offset - normal.dot(&o)) / normal.dot(d);
                (t.is_finite() && t > 1e-9).then_some(t)
            }
            Shape::Cuboid { min, max } => box_faces_hit(min, max, &o, d),
            Shape::Cylinder { center, radius, z0, z1 } => cylinder_hit(*center, *radius, *z0, *z1, &o, d),
        })
        .filter(|&t| t <= scene.max_range)
        .min_by(f64::total_cmp)
}

#[test]
fn generation_is_deterministic() {
    let cfg = SceneConfig::default();
    let a = synthesize(&cfg, 7).unwrap();
    let b = synthesize(&cfg, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(io::encode_scan(&a.scan), io::encode_scan(&b.scan));
    assert_ne!(a.scene, synthesize(&cfg, 8).unwrap().scene);
}

#[test]
fn no_objects_gives_ground_only() {
    let cfg = SceneConfig { objects_min: 0, objects_max: 0, ..SceneConfig::default() };
    let s = synthesize(&cfg, 3).unwrap();
    assert_eq!(s.scene.objects.len(), 1);
    assert!(!s.scan.is_empty());
    assert!(s.scan.labels.iter().all(|&l| l == 0));
}

#[test]
fn generated_primitives_respect_invariants() {
    let cfg = SceneConfig::default();
    for seed in 0..20 {
        let s = generate_scene(&cfg, seed).unwrap();
        for o in &s.objects {
            assert!((o.class as usize) < cfg.classes);
            if let Some((c, r)) = o.shape.footprint() {
                let rc = c[0].hypot(c[1]);
                assert!(rc - r >= cfg.grid.r_min && rc + r <= cfg.grid.r_max);
            }
        }
    }
}

#[test]
fn config_errors() {
    let cfg = SceneConfig { classes: 1, ..SceneConfig::default() };
    assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
    let cfg = SceneConfig { camera_offset: Vec3::new(0.0, 0.0, 10.0), ..SceneConfig::default() };
    assert!(matches!(generate_scene(&cfg, 0), Err(Error::Config(_))));
    let mut kv = KeyValues::parse("classes = 4\nbogus = 1\n", "t").unwrap();
    SceneConfig::from_kv(&mut kv).unwrap();
    assert!(kv.finish().is_err());
}

#[test]
fn config_kv_round_trip() {
    let cfg = SceneConfig { camera_offset: Vec3::new(0.0, 1.0, 0.25), classes: 5, ..SceneConfig::default() };
    let mut kv = KeyValues::parse(&cfg.to_kv(), "t").unwrap();
    assert_eq!(SceneConfig::from_kv(&mut kv).unwrap(), cfg);
    kv.finish().unwrap();
}

#[test]
fn beam_at_plane_five_meters() {
    let wall = Primitive {
        shape: Shape::Plane { normal: Vec3::x(), offset: 5.0 },
        class: 1,
        instance: 1,
        intensity: 0.5,
    };
    let mut scene = cube_scene(Vec3::zeros());
    scene.objects = vec![wall];
    let pattern = LidarPattern { azimuths: vec![0.0], elevations: vec![0.0] };
    let scan = simulate_lidar(&scene, &pattern);
    assert_eq!(scan.len(), 1);
    assert_eq!(scan.points[0].norm(), 5.0);
    assert_eq!(scan.labels[0], 1);

    let miss = LidarPattern { azimuths: vec![PI], elevations: vec![0.0] };
    assert!(simulate_lidar(&scene, &miss).is_empty());
}

#[test]
fn full_sweep_matches_brute_force() {
    let cfg = SceneConfig {
        lidar_azimuth: (-180.0, 179.0),
        lidar_azimuth_beams: 360,
        objects_min: 6,
        objects_max: 6,
        object_azimuth: (-180.0, 180.0),
        ..SceneConfig::default()
    };
    let scene = generate_scene(&cfg, 11).unwrap();
    let pattern = cfg.lidar_pattern();
    let scan = simulate_lidar(&scene, &pattern);
    let expected: Vec<f64> = pattern.directions().filter_map(|d| brute_force_range(&scene, &d)).collect();
    assert_eq!(scan.len(), expected.len());
    for (p, r) in scan.points.iter().zip(&expected) {
        assert!((p.norm() - r).abs() < 1e-9, "{} vs {r}", p.norm());
    }
}

#[test]
fn camera_over_ground_sees_ground_below_horizon() {
    let mut scene = cube_scene(Vec3::zeros());
    scene.objects.truncate(1);
    scene.max_range = 1e9;
    let img = render_label_image(&scene, &scene.camera);
    let cam = &scene.camera;
    for v in 0..cam.height {
        for u in 0..cam.width {
            let below = (v as f64 + 0.5) > cam.cy;
            let c = img.class_at(u, v);
            if below {
                assert_eq!(c, 0);
            } else {
                assert_eq!(c, IGNORE);
            }
        }
    }
}

fn cube_columns(img: &LabelImage) -> Option<(u32, u32)> {
    let cols: Vec<u32> =
        (0..img.width).filter(|&u| (0..img.height).any(|v| img.class_at(u, v) == 1)).collect();
    Some((*cols.first()?, *cols.last()?))
}

#[test]
fn lateral_offset_shifts_cube_silhouette() {
    let lidar_view = cube_scene(Vec3::zeros());
    let shifted = cube_scene(Vec3::new(0.0, 1.0, 0.0));
    let (left0, _) = cube_columns(&render_label_image(&lidar_view, &lidar_view.camera)).unwrap();
    let (left1, _) = cube_columns(&render_label_image(&shifted, &shifted.camera)).unwrap();

    // exact pinhole projection of the cube corners from both origins
    let corners: Vec<Vec3> = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 0 { 9.5 } else { 10.5 },
                if i & 2 == 0 { -0.5 } else { 0.5 },
                if i & 4 == 0 { -1.7 } else { -0.7 },
            )
        })
        .collect();
    let min_u = |cam: &CameraModel| {
        corners.iter().filter_map(|c| cam.project_point(c)).map(|p| p.u).fold(f64::INFINITY, f64::min)
    };
    let oracle_shift = min_u(&shifted.camera) - min_u(&lidar_view.camera);
    let image_shift = left1 as f64 - left0 as f64;
    assert!(oracle_shift > 0.0);
    assert!(image_shift > 0.0);
    assert!((image_shift - oracle_shift).abs() <= 1.5, "{image_shift} vs {oracle_shift}");
}

fn mismatch_fraction(scene: &Scene, pattern: &LidarPattern) -> f64 {
    let scan = simulate_lidar(scene, pattern);
    let img = render_label_image(scene, &scene.camera);
    let (bad, total) = projection_mismatch(&scan, &img, &scene.camera);
    assert!(total > 0);
    bad as f64 / total as f64
}

#[test]
fn zero_offset_projection_is_consistent() {
    let cfg = SceneConfig { camera_width: 320, camera_height: 160, ..SceneConfig::default() };
    let pattern = cfg.lidar_pattern();
    for seed in 0..5 {
        let scene = generate_scene(&cfg, seed).unwrap();
        let f = mismatch_fraction(&scene, &pattern);
        assert!(f < 0.01, "seed {seed}: {f}");
    }
}

#[test]
fn lateral_offset_mislabels_points_near_cube_edge() {
    let pattern = LidarPattern::grid((-30.0, 30.0), 600, (-15.0, 5.0), 40);
    let scene = cube_scene(Vec3::new(0.0, 1.0, 0.0));
    let scan = simulate_lidar(&scene, &pattern);
    let img = render_label_image(&scene, &scene.camera);
    let cam = &scene.camera;
    let cube = &scene.objects[1].shape;
    let near_class = |u: u32, v: u32, want: ClassId| {
        (u.saturating_sub(1)..=(u + 1).min(img.width - 1))
            .any(|x| (v.saturating_sub(1)..=(v + 1).min(img.height - 1)).any(|y| img.class_at(x, y) == want))
    };
    let mut occluded = 0;
    for (p, &l) in scan.points.iter().zip(&scan.labels) {
        let Some(proj) = cam.project_point(p) else { continue };
        let (u, v) = proj.pixel();
        let c = img.class_at(u, v);
        if c == IGNORE || c == l {
            continue;
        }
        let to_point = p - cam.translation;
        let hidden = cube.intersect(&cam.translation, &to_point.normalize()).is_some_and(|t| t < to_point.norm() - 1e-6);
        if l == 0 && hidden {
            // ground seen by the LiDAR but behind the cube for the camera
            occluded += 1;
        } else {
            // otherwise only pixel quantization at a silhouette
            assert!(near_class(u, v, l), "{p:?} label {l} pixel class {c}");
        }
    }
    assert!(occluded > 0);
}

#[test]
fn mismatch_grows_with_offset() {
    let cfg = SceneConfig::default();
    let pattern = cfg.lidar_pattern();
    for seed in [2, 5] {
        let base = generate_scene(&cfg, seed).unwrap();
        let fr: Vec<f64> = [0.0, 0.5, 1.0, 2.0]
            .iter()
            .map(|&dy| mismatch_fraction(&base.with_camera_offset(Vec3::new(0.0, dy, 0.0)), &pattern))
            .collect();
        // small offsets are within quantization noise of each other
        assert!(fr[1..].iter().all(|&f| f > fr[0]), "seed {seed}: {fr:?}");
        assert!(fr[3] > fr[1], "seed {seed}: {fr:?}");
    }
}

#[test]
fn label_image_files_round_trip() {
    let s = synthesize(&SceneConfig::default(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (c, i) = (dir.path().join("c.pgm"), dir.path().join("i.pgm"));
    io::write_label_image(&c, &i, &s.label_image).unwrap();
    assert_eq!(io::read_label_image(&c, &i).unwrap(), s.label_image);
}
