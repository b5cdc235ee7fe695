//! Synthetic multi-modal scenes: a ground plane plus boxes and vertical
//! cylinders, a LiDAR at the origin and a camera that may be displaced from
//! it. Displacing the camera reproduces the sensor parallax that corrupts
//! perspective-projected labels.

pub mod io;

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{KeyValues, KvWriter};
use crate::geom::{CameraModel, Vec3};
use crate::grid::GridSpec;
use crate::{ClassId, Error, Result, IGNORE};

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Infinite plane `normal · x = offset`.
    Plane { normal: Vec3, offset: f64 },
    /// Axis-aligned box.
    Cuboid { min: Vec3, max: Vec3 },
    /// Vertical capped cylinder.
    Cylinder { center: [f64; 2], radius: f64, z0: f64, z1: f64 },
}

impl Shape {
    /// Smallest hit distance `t > 0` along `origin + t * dir`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match self {
            Shape::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (offset - normal.dot(origin)) / denom;
                (t > HIT_EPS).then_some(t)
            }
            Shape::Cuboid { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (min[a] - origin[a]) / dir[a];
                    let tb = (max[a] - origin[a]) / dir[a];
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > HIT_EPS {
                    Some(t0)
                } else if t1 > HIT_EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Cylinder { center, radius, z0, z1 } => {
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > HIT_EPS && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                let (ox, oy) = (origin.x - center[0], origin.y - center[1]);
                let a = dir.x * dir.x + dir.y * dir.y;
                if a > 1e-15 {
                    let b = 2.0 * (ox * dir.x + oy * dir.y);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                            let z = origin.z + t * dir.z;
                            if z >= *z0 && z <= *z1 {
                                consider(t);
                            }
                        }
                    }
                }
                if dir.z.abs() > 1e-15 {
                    for zc in [*z0, *z1] {
                        let t = (zc - origin.z) / dir.z;
                        let (x, y) = (ox + t * dir.x, oy + t * dir.y);
                        if x * x + y * y <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
        }
    }

    /// Horizontal bounding radius around the footprint center (planes: none).
    fn footprint(&self) -> Option<([f64; 2], f64)> {
        match self {
            Shape::Plane { .. } => None,
            Shape::Cuboid { min, max } => {
                let c = [(min.x + max.x) / 2.0, (min.y + max.y) / 2.0];
                Some((c, ((max.x - min.x).powi(2) + (max.y - min.y).powi(2)).sqrt() / 2.0))
            }
            Shape::Cylinder { center, radius, .. } => Some((*center, *radius)),
        }
    }

    fn contains_point(&self, p: &Vec3) -> bool {
        match self {
            Shape::Plane { .. } => false,
            Shape::Cuboid { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Cylinder { center, radius, z0, z1 } => {
                (p.x - center[0]).hypot(p.y - center[1]) <= *radius && p.z >= *z0 && p.z <= *z1
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class: ClassId,
    /// Instance id, >= 1 (0 means background in instance maps).
    pub instance: u16,
    /// Mean LiDAR reflectivity of the surface, in [0, 1].
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Plane,
    Cuboid,
    Cylinder,
}

/// Per-class object family: shape kind, size ranges, reflectivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassTemplate {
    pub name: &'static str,
    pub kind: ShapeKind,
    /// Cuboids: x, y, z extents. Cylinders: radius, height, unused.
    pub size: [(f64, f64); 3],
    /// Height of the object's bottom above the ground.
    pub lift: f64,
    pub intensity: f64,
    pub intensity_halfwidth: f64,
}

pub const CLASS_TEMPLATES: [ClassTemplate; 8] = [
    ClassTemplate {
        name: "ground",
        kind: ShapeKind::Plane,
        size: [(0.0, 0.0); 3],
        lift: 0.0,
        intensity: 0.25,
        intensity_halfwidth: 0.1,
    },
    ClassTemplate {
        name: "building",
        kind: ShapeKind::Cuboid,
        size: [(3.0, 6.0), (5.0, 10.0), (3.0, 5.0)],
        lift: 0.0,
        intensity: 0.45,
        intensity_halfwidth: 0.15,
    },
    ClassTemplate {
        name: "car",
        kind: ShapeKind::Cuboid,
        size: [(3.6, 4.8), (1.6, 2.0), (1.3, 1.7)],
        lift: 0.0,
        intensity: 0.6,
        intensity_halfwidth: 0.2,
    },
    ClassTemplate {
        name: "pole",
        kind: ShapeKind::Cylinder,
        size: [(0.08, 0.15), (3.0, 5.0), (0.0, 0.0)],
        lift: 0.0,
        intensity: 0.7,
        intensity_halfwidth: 0.15,
    },
    ClassTemplate {
        name: "trunk",
        kind: ShapeKind::Cylinder,
        size: [(0.25, 0.5), (1.5, 3.5), (0.0, 0.0)],
        lift: 0.0,
        intensity: 0.3,
        intensity_halfwidth: 0.15,
    },
    ClassTemplate {
        name: "pedestrian",
        kind: ShapeKind::Cuboid,
        size: [(0.4, 0.7), (0.4, 0.7), (1.5, 1.9)],
        lift: 0.0,
        intensity: 0.5,
        intensity_halfwidth: 0.2,
    },
    ClassTemplate {
        name: "barrier",
        kind: ShapeKind::Cuboid,
        size: [(0.3, 0.5), (2.0, 5.0), (0.8, 1.1)],
        lift: 0.0,
        intensity: 0.65,
        intensity_halfwidth: 0.1,
    },
    ClassTemplate {
        name: "sign",
        kind: ShapeKind::Cuboid,
        size: [(0.05, 0.1), (0.6, 1.0), (0.6, 1.0)],
        lift: 2.0,
        intensity: 0.9,
        intensity_halfwidth: 0.08,
    },
];

/// LiDAR beam layout: every (elevation, azimuth) pair is one beam.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarPattern {
    /// Radians, counter-clockwise from +x.
    pub azimuths: Vec<f64>,
    /// Radians above the horizontal.
    pub elevations: Vec<f64>,
}

impl LidarPattern {
    /// Evenly spaced beams over inclusive degree ranges.
    pub fn grid(azimuth_deg: (f64, f64), azimuth_beams: usize, elevation_deg: (f64, f64), elevation_beams: usize) -> Self {
        let lin = |(a, b): (f64, f64), n: usize| -> Vec<f64> {
            if n == 1 {
                return vec![(0.5 * (a + b)).to_radians()];
            }
            (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).to_radians()).collect()
        };
        LidarPattern { azimuths: lin(azimuth_deg, azimuth_beams), elevations: lin(elevation_deg, elevation_beams) }
    }

    pub fn directions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.elevations.iter().flat_map(move |&el| {
            self.azimuths.iter().map(move |&az| Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Distance range (m) of object footprint centers from the LiDAR.
    pub object_range: (f64, f64),
    /// Azimuth range (deg) of object placement.
    pub object_azimuth: (f64, f64),
    pub lidar_height: f64,
    pub lidar_azimuth: (f64, f64),
    pub lidar_azimuth_beams: usize,
    pub lidar_elevation: (f64, f64),
    pub lidar_elevation_beams: usize,
    /// Returns (LiDAR) and visible surfaces (camera) beyond this range are dropped.
    pub max_range: f64,
    pub intensity_noise: f64,
    /// Scales each class's reflectivity spread; 0 makes reflectivity a pure
    /// class signature.
    pub intensity_spread: f64,
    pub camera_width: u32,
    pub camera_height: u32,
    pub camera_hfov: f64,
    pub camera_offset: Vec3,
    /// Uniform per-axis jitter (m) added to the camera offset.
    pub camera_offset_jitter: f64,
    pub grid: GridSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            classes: 6,
            objects_min: 3,
            objects_max: 6,
            object_range: (5.0, 18.0),
            object_azimuth: (-50.0, 50.0),
            lidar_height: 1.7,
            lidar_azimuth: (-70.0, 70.0),
            lidar_azimuth_beams: 240,
            lidar_elevation: (-30.0, 10.0),
            lidar_elevation_beams: 20,
            max_range: 24.0,
            intensity_noise: 0.03,
            intensity_spread: 0.3,
            camera_width: 80,
            camera_height: 32,
            camera_hfov: 110.0,
            camera_offset: Vec3::zeros(),
            camera_offset_jitter: 0.0,
            grid: GridSpec { res: [48, 180, 12], r_min: 1.0, r_max: 25.0, z_min: -2.0, z_max: 4.0 },
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.classes > CLASS_TEMPLATES.len() {
            return Err(Error::config(format!("at most {} classes supported", CLASS_TEMPLATES.len())));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::config("objects_min exceeds objects_max"));
        }
        if !(self.object_range.0 > 0.0 && self.object_range.0 <= self.object_range.1) {
            return Err(Error::config("object_range must be increasing and positive"));
        }
        if self.lidar_azimuth_beams == 0 || self.lidar_elevation_beams == 0 {
            return Err(Error::config("LiDAR pattern needs at least one beam per axis"));
        }
        if !(self.max_range > 0.0 && self.intensity_noise >= 0.0 && self.intensity_spread >= 0.0) {
            return Err(Error::config("max_range must be positive, noise and spread non-negative"));
        }
        if self.camera_offset_jitter < 0.0 {
            return Err(Error::config("camera_offset_jitter must be non-negative"));
        }
        self.grid.validate().map_err(|e| Error::config(e.to_string()))?;
        if -self.lidar_height < self.grid.z_min {
            return Err(Error::config("ground plane lies below the grid"));
        }
        let max_offset = self.camera_offset.abs() + Vec3::repeat(self.camera_offset_jitter);
        self.check_camera_position(&max_offset)?;
        CameraModel::forward_facing(self.camera_width, self.camera_height, self.camera_hfov, Vec3::zeros())
            .map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    fn check_camera_position(&self, p: &Vec3) -> Result<()> {
        let r = p.x.hypot(p.y);
        if r > self.grid.r_max || p.z < self.grid.z_min || p.z > self.grid.z_max {
            return Err(Error::config(format!(
                "camera offset ({:.3}, {:.3}, {:.3}) places the camera outside the grid bounds",
                p.x, p.y, p.z
            )));
        }
        Ok(())
    }

    pub fn lidar_pattern(&self) -> LidarPattern {
        LidarPattern::grid(self.lidar_azimuth, self.lidar_azimuth_beams, self.lidar_elevation, self.lidar_elevation_beams)
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = SceneConfig::default();
        let pair = |v: Option<[f64; 2]>, dflt: (f64, f64)| v.map(|a| (a[0], a[1])).unwrap_or(dflt);
        let grid_res: [usize; 3] = kv.take_array("grid_res")?.unwrap_or(d.grid.res);
        let grid_r = pair(kv.take_array("grid_r")?, (d.grid.r_min, d.grid.r_max));
        let grid_z = pair(kv.take_array("grid_z")?, (d.grid.z_min, d.grid.z_max));
        let cfg = SceneConfig {
            classes: kv.take_or("classes", d.classes)?,
            objects_min: kv.take_or("objects_min", d.objects_min)?,
            objects_max: kv.take_or("objects_max", d.objects_max)?,
            object_range: pair(kv.take_array("object_range")?, d.object_range),
            object_azimuth: pair(kv.take_array("object_azimuth")?, d.object_azimuth),
            lidar_height: kv.take_or("lidar_height", d.lidar_height)?,
            lidar_azimuth: pair(kv.take_array("lidar_azimuth")?, d.lidar_azimuth),
            lidar_azimuth_beams: kv.take_or("lidar_azimuth_beams", d.lidar_azimuth_beams)?,
            lidar_elevation: pair(kv.take_array("lidar_elevation")?, d.lidar_elevation),
            lidar_elevation_beams: kv.take_or("lidar_elevation_beams", d.lidar_elevation_beams)?,
            max_range: kv.take_or("max_range", d.max_range)?,
            intensity_noise: kv.take_or("intensity_noise", d.intensity_noise)?,
            intensity_spread: kv.take_or("intensity_spread", d.intensity_spread)?,
            camera_width: kv.take_or("camera_width", d.camera_width)?,
            camera_height: kv.take_or("camera_height", d.camera_height)?,
            camera_hfov: kv.take_or("camera_hfov", d.camera_hfov)?,
            camera_offset: kv.take_array::<f64, 3>("camera_offset")?.map(Vec3::from).unwrap_or(d.camera_offset),
            camera_offset_jitter: kv.take_or("camera_offset_jitter", d.camera_offset_jitter)?,
            grid: GridSpec { res: grid_res, r_min: grid_r.0, r_max: grid_r.1, z_min: grid_z.0, z_max: grid_z.1 },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        let o = &self.camera_offset;
        w.put("classes", self.classes)
            .put("objects_min", self.objects_min)
            .put("objects_max", self.objects_max)
            .put_list("object_range", &[self.object_range.0, self.object_range.1])
            .put_list("object_azimuth", &[self.object_azimuth.0, self.object_azimuth.1])
            .put("lidar_height", self.lidar_height)
            .put_list("lidar_azimuth", &[self.lidar_azimuth.0, self.lidar_azimuth.1])
            .put("lidar_azimuth_beams", self.lidar_azimuth_beams)
            .put_list("lidar_elevation", &[self.lidar_elevation.0, self.lidar_elevation.1])
            .put("lidar_elevation_beams", self.lidar_elevation_beams)
            .put("max_range", self.max_range)
            .put("intensity_noise", self.intensity_noise)
            .put("intensity_spread", self.intensity_spread)
            .put("camera_width", self.camera_width)
            .put("camera_height", self.camera_height)
            .put("camera_hfov", self.camera_hfov)
            .put_list("camera_offset", &[o.x, o.y, o.z])
            .put("camera_offset_jitter", self.camera_offset_jitter)
            .put_list("grid_res", &self.grid.res)
            .put_list("grid_r", &[self.grid.r_min, self.grid.r_max])
            .put_list("grid_z", &[self.grid.z_min, self.grid.z_max]);
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        self.write_kv(&mut w);
        w.finish()
    }
}

/// Primitives plus sensor rig. The LiDAR sits at the origin with identity
/// pose; the camera pose lives in `camera`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<Primitive>,
    pub camera: CameraModel,
    pub classes: usize,
    pub max_range: f64,
    pub rng_seed: u64,
    pub intensity_noise: f64,
}

impl Scene {
    /// Nearest primitive hit within `max_range`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, &Primitive)> {
        let mut best: Option<(f64, &Primitive)> = None;
        for prim in &self.objects {
            if let Some(t) = prim.shape.intersect(origin, dir) {
                if t <= self.max_range && best.is_none_or(|(b, _)| t < b) {
                    best = Some((t, prim));
                }
            }
        }
        best
    }

    pub fn camera_offset(&self) -> Vec3 {
        self.camera.translation
    }

    /// The same scene seen from a camera displaced by `offset`.
    pub fn with_camera_offset(&self, offset: Vec3) -> Scene {
        let mut s = self.clone();
        s.camera.translation = offset;
        s
    }
}

pub fn ground_plane(lidar_height: f64) -> Primitive {
    Primitive {
        shape: Shape::Plane { normal: Vec3::z(), offset: -lidar_height },
        class: 0,
        instance: 1,
        intensity: CLASS_TEMPLATES[0].intensity,
    }
}

/// Deterministic random scene for `(config, seed)`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_z = -config.lidar_height;
    let mut objects = vec![ground_plane(config.lidar_height)];
    objects[0].intensity = draw_intensity(&CLASS_TEMPLATES[0], config.intensity_spread, &mut rng);

    let count = rng.random_range(config.objects_min..=config.objects_max);
    let mut footprints: Vec<([f64; 2], f64)> = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(1..config.classes) as ClassId;
        let tpl = &CLASS_TEMPLATES[class as usize];
        for _attempt in 0..50 {
            let dist = rng.random_range(config.object_range.0..=config.object_range.1);
            let az = rng.random_range(config.object_azimuth.0..=config.object_azimuth.1).to_radians();
            let c = [dist * az.cos(), dist * az.sin()];
            let shape = sample_shape(tpl, c, ground_z, &mut rng);
            let (fc, fr) = shape.footprint().expect("objects have footprints");
            let r_c = fc[0].hypot(fc[1]);
            let inside_grid = r_c - fr > config.grid.r_min + 0.5 && r_c + fr < config.grid.r_max - 0.5;
            let clear = footprints.iter().all(|(oc, or)| (oc[0] - fc[0]).hypot(oc[1] - fc[1]) > or + fr + 0.5);
            let top_ok = match &shape {
                Shape::Cuboid { max, .. } => max.z < config.grid.z_max,
                Shape::Cylinder { z1, .. } => *z1 < config.grid.z_max,
                Shape::Plane { .. } => true,
            };
            if inside_grid && clear && top_ok {
                footprints.push((fc, fr));
                let intensity = draw_intensity(tpl, config.intensity_spread, &mut rng);
                let instance = objects.len() as u16 + 1;
                objects.push(Primitive { shape, class, instance, intensity });
                break;
            }
        }
    }

    let jitter = config.camera_offset_jitter;
    let offset = config.camera_offset
        + if jitter > 0.0 {
            Vec3::new(
                rng.random_range(-jitter..=jitter),
                rng.random_range(-jitter..=jitter),
                rng.random_range(-jitter..=jitter),
            )
        } else {
            Vec3::zeros()
        };
    config.check_camera_position(&offset)?;
    if objects.iter().any(|o| o.shape.contains_point(&offset)) {
        return Err(Error::Invalid("camera placed inside an object".into()));
    }
    let camera = CameraModel::forward_facing(config.camera_width, config.camera_height, config.camera_hfov, offset)?;
    Ok(Scene {
        objects,
        camera,
        classes: config.classes,
        max_range: config.max_range,
        rng_seed: seed,
        intensity_noise: config.intensity_noise,
    })
}

fn draw_intensity(tpl: &ClassTemplate, spread: f64, rng: &mut ChaCha8Rng) -> f64 {
    let hw = tpl.intensity_halfwidth * spread;
    let u: f64 = rng.random_range(-1.0..=1.0);
    (tpl.intensity + u * hw).clamp(0.0, 1.0)
}

fn sample_shape(tpl: &ClassTemplate, c: [f64; 2], ground_z: f64, rng: &mut ChaCha8Rng) -> Shape {
    let mut pick = |(a, b): (f64, f64)| if b > a { rng.random_range(a..=b) } else { a };
    match tpl.kind {
        ShapeKind::Cuboid => {
            let (sx, sy, sz) = (pick(tpl.size[0]), pick(tpl.size[1]), pick(tpl.size[2]));
            let z0 = ground_z + tpl.lift;
            Shape::Cuboid {
                min: Vec3::new(c[0] - sx / 2.0, c[1] - sy / 2.0, z0),
                max: Vec3::new(c[0] + sx / 2.0, c[1] + sy / 2.0, z0 + sz),
            }
        }
        ShapeKind::Cylinder => {
            let (radius, h) = (pick(tpl.size[0]), pick(tpl.size[1]));
            let z0 = ground_z + tpl.lift;
            Shape::Cylinder { center: c, radius, z0, z1: z0 + h }
        }
        ShapeKind::Plane => unreachable!("the ground plane is placed separately"),
    }
}

/// A LiDAR sweep: points in the LiDAR frame with reflectivity and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub points: Vec<Vec3>,
    pub intensity: Vec<f64>,
    pub labels: Vec<ClassId>,
    pub classes: usize,
}

impl Scan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same points with every label replaced by [`IGNORE`].
    pub fn unlabeled(&self) -> Scan {
        Scan { labels: vec![IGNORE; self.len()], ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.intensity.len() || self.points.len() != self.labels.len() {
            return Err(Error::Invalid("scan arrays differ in length".into()));
        }
        if self.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Invalid("scan contains non-finite coordinates".into()));
        }
        if self.labels.iter().any(|&l| l != IGNORE && l as usize >= self.classes) {
            return Err(Error::Invalid("scan label out of range".into()));
        }
        Ok(())
    }
}

/// Nearest-hit returns for every beam; misses produce no point.
pub fn simulate_lidar(scene: &Scene, pattern: &LidarPattern) -> Scan {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.rng_seed ^ 0x5eed_11da_0000_0001);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let origin = Vec3::zeros();
    let mut scan = Scan { points: Vec::new(), intensity: Vec::new(), labels: Vec::new(), classes: scene.classes };
    for dir in pattern.directions() {
        if let Some((t, prim)) = scene.cast(&origin, &dir) {
            let n: f64 = noise.sample(&mut rng);
            scan.points.push(origin + dir * t);
            scan.intensity.push((prim.intensity + scene.intensity_noise * n).clamp(0.0, 1.0));
            scan.labels.push(prim.class);
        }
    }
    scan
}

/// Per-pixel class and instance of the nearest visible surface.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub class: Vec<ClassId>,
    /// Instance id per pixel, 0 for background.
    pub instance: Vec<u16>,
}

impl LabelImage {
    pub fn index(&self, u: u32, v: u32) -> usize {
        (v * self.width + u) as usize
    }

    pub fn class_at(&self, u: u32, v: u32) -> ClassId {
        self.class[self.index(u, v)]
    }
}

pub fn render_label_image(scene: &Scene, cam: &CameraModel) -> LabelImage {
    let n = cam.pixel_count();
    let mut img = LabelImage { width: cam.width, height: cam.height, class: vec![IGNORE; n], instance: vec![0; n] };
    for v in 0..cam.height {
        for u in 0..cam.width {
            let ray = cam.pixel_ray_unchecked(u, v);
            if let Some((_, prim)) = scene.cast(&ray.origin, &ray.direction) {
                let i = img.index(u, v);
                img.class[i] = prim.class;
                img.instance[i] = prim.instance;
            }
        }
    }
    img
}

/// Scene, its LiDAR sweep and the camera's label image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene: Scene,
    pub scan: Scan,
    pub label_image: LabelImage,
}

pub fn synthesize(config: &SceneConfig, seed: u64) -> Result<SceneSample> {
    let scene = generate_scene(config, seed)?;
    Ok(sample_scene(scene, &config.lidar_pattern()))
}

pub fn sample_scene(scene: Scene, pattern: &LidarPattern) -> SceneSample {
    let scan = simulate_lidar(&scene, pattern);
    let label_image = render_label_image(&scene, &scene.camera);
    SceneSample { scene, scan, label_image }
}

/// Per-scene seeds derived from one dataset seed.
pub fn scene_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// Counts of LiDAR points that project onto a labeled pixel, and of those
/// whose class differs from the pixel's class.
pub fn projection_mismatch(scan: &Scan, image: &LabelImage, cam: &CameraModel) -> (usize, usize) {
    let mut total = 0;
    let mut mismatched = 0;
    for (p, &label) in scan.points.iter().zip(&scan.labels) {
        let Some(proj) = cam.project_point(p) else { continue };
        let (u, v) = proj.pixel();
        let pixel_class = image.class_at(u, v);
        if pixel_class == IGNORE || label == IGNORE {
            continue;
        }
        total += 1;
        if pixel_class != label {
            mismatched += 1;
        }
    }
    (mismatched, total)
}

/// Azimuth of a direction in degrees, for diagnostics.
pub fn azimuth_deg(p: &Vec3) -> f64 {
    p.y.atan2(p.x) * 180.0 / PI
}

#[cfg(test)]
mod tests;
