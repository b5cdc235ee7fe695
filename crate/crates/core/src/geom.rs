//! Pinhole camera, LiDAR-frame ray generation and the coverage pixel sampler.
//!
//! Frames: the camera frame is x right, y down, z forward. `rotation` and
//! `translation` map camera coordinates into the LiDAR frame,
//! `p_lidar = rotation * p_cam + translation`, so `translation` is the camera
//! center expressed in LiDAR coordinates.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::config::{KeyValues, KvWriter};
use crate::grid::Occupancy;
use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Integer pixel containing the projection.
    pub fn pixel(&self) -> (u32, u32) {
        (self.u.floor() as u32, self.v.floor() as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: (u32, u32),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Uniform mid-bin sampling between the near and far distances along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySampling {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
}

impl Default for RaySampling {
    fn default() -> Self {
        RaySampling { near: 2.3, far: 50.0, samples: 458 }
    }
}

impl RaySampling {
    pub fn new(near: f64, far: f64, samples: usize) -> Result<Self> {
        if !(near.is_finite() && far.is_finite() && near >= 0.0 && near < far) {
            return Err(Error::Invalid(format!("ray sampling needs 0 <= near < far, got {near}, {far}")));
        }
        if samples == 0 {
            return Err(Error::Invalid("ray sampling needs at least one sample".into()));
        }
        Ok(RaySampling { near, far, samples })
    }

    /// Constant spacing between consecutive samples.
    pub fn delta(&self) -> f64 {
        (self.far - self.near) / self.samples as f64
    }

    /// Distance of sample `k` from the ray origin.
    pub fn distance(&self, k: usize) -> f64 {
        self.near + (k as f64 + 0.5) * self.delta()
    }
}

/// Rotation taking camera axes (x right, y down, z forward) to a LiDAR frame
/// with x forward, y left, z up.
pub fn forward_camera_rotation() -> Matrix3<f64> {
    Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    )
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vec3,
    ) -> Result<Self> {
        let cam = CameraModel { fx, fy, cx, cy, width, height, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera looking along the LiDAR +x axis from `position`, square pixels,
    /// principal point at the image center.
    pub fn forward_facing(width: u32, height: u32, hfov_deg: f64, position: Vec3) -> Result<Self> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(Error::Invalid(format!("horizontal FOV must be in (0, 180), got {hfov_deg}")));
        }
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height, forward_camera_rotation(), position)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("image must be non-empty".into()));
        }
        let det = self.rotation.determinant();
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if (det - 1.0).abs() >= 1e-9 || ortho >= 1e-9 {
            return Err(Error::Invalid("rotation must be orthonormal with determinant 1".into()));
        }
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("camera parameters must be finite".into()));
        }
        Ok(())
    }

    /// Camera center in the LiDAR frame.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Pixel coordinates and depth of a LiDAR-frame point, if it lies in front
    /// of the camera and inside the image.
    pub fn project_point(&self, p: &Vec3) -> Option<Projection> {
        let pc = self.to_camera(p);
        if pc.z <= 0.0 {
            return None;
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        let inside = u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        inside.then_some(Projection { u, v, depth: pc.z })
    }

    /// Ray through the center of pixel `(u, v)`, in the LiDAR frame.
    pub fn pixel_ray(&self, u: u32, v: u32) -> Result<Ray> {
        if u >= self.width || v >= self.height {
            return Err(Error::PixelOutOfBounds { u, v, width: self.width, height: self.height });
        }
        Ok(self.pixel_ray_unchecked(u, v))
    }

    pub(crate) fn pixel_ray_unchecked(&self, u: u32, v: u32) -> Ray {
        let d = Vec3::new((u as f64 + 0.5 - self.cx) / self.fx, (v as f64 + 0.5 - self.cy) / self.fy, 1.0);
        Ray { origin: self.translation, direction: (self.rotation * d).normalize(), pixel: (u, v) }
    }

    pub fn to_kv(&self) -> String {
        let r = &self.rotation;
        let rot: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect();
        KvWriter::new()
            .put("fx", format_args!("{:?}", self.fx))
            .put("fy", format_args!("{:?}", self.fy))
            .put("cx", format_args!("{:?}", self.cx))
            .put("cy", format_args!("{:?}", self.cy))
            .put("width", self.width)
            .put("height", self.height)
            .put_list("rotation", &rot.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>())
            .put_list("translation", &self.translation.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>())
            .finish()
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let need = |v: Option<f64>, k: &str| v.ok_or_else(|| Error::config(format!("calibration missing `{k}`")));
        let fx = need(kv.take("fx")?, "fx")?;
        let fy = need(kv.take("fy")?, "fy")?;
        let cx = need(kv.take("cx")?, "cx")?;
        let cy = need(kv.take("cy")?, "cy")?;
        let width = kv.take::<u32>("width")?.ok_or_else(|| Error::config("calibration missing `width`"))?;
        let height = kv.take::<u32>("height")?.ok_or_else(|| Error::config("calibration missing `height`"))?;
        let rot: [f64; 9] =
            kv.take_array("rotation")?.ok_or_else(|| Error::config("calibration missing `rotation`"))?;
        let t: [f64; 3] =
            kv.take_array("translation")?.ok_or_else(|| Error::config("calibration missing `translation`"))?;
        let rotation = Matrix3::from_row_slice(&rot);
        Self::new(fx, fy, cx, cy, width, height, rotation, Vec3::from(t)).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let cam = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }
}

/// Occupied cells containing at least one of the ray's sample positions.
pub fn traversed_cells(occ: &Occupancy, ray: &Ray, sampling: &RaySampling) -> Vec<u32> {
    let mut out = Vec::new();
    for k in 0..sampling.samples {
        if let Some(cell) = occ.spec().cell_of(&ray.at(sampling.distance(k))) {
            if occ.slot(cell).is_some() && out.last() != Some(&cell) && !out.contains(&cell) {
                out.push(cell);
            }
        }
    }
    out
}

/// Occupied cells whose centers project into the image at a distance from
/// the camera center within `[near, far]`. Occlusion is not considered.
pub fn frustum_cells(cam: &CameraModel, occ: &Occupancy, sampling: &RaySampling) -> Vec<(u32, Projection, f64)> {
    let origin = cam.center();
    occ.cells()
        .iter()
        .filter_map(|&cell| {
            let c = occ.spec().cell_center(cell);
            let dist = (c - origin).norm();
            if dist < sampling.near || dist > sampling.far {
                return None;
            }
            cam.project_point(&c).map(|proj| (cell, proj, dist))
        })
        .collect()
}

/// Small set of pixels whose sample sets together traverse every occupied
/// in-frustum cell that any pixel can reach.
///
/// Greedy set cover: cells are visited far-to-near; an uncovered cell emits
/// the pixel containing its center projection, or the nearest pixel (by
/// square rings) whose samples land in the cell. Every cell traversed by an
/// emitted ray is marked covered.
pub fn min_cover_pixels(cam: &CameraModel, occ: &Occupancy, sampling: &RaySampling) -> Vec<(u32, u32)> {
    let mut cells = frustum_cells(cam, occ, sampling);
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));

    let mut covered: HashSet<u32> = HashSet::new();
    let mut emitted: HashSet<(u32, u32)> = HashSet::new();
    let mut pixels = Vec::new();
    let (w, h) = (cam.width as i64, cam.height as i64);

    for (cell, proj, _) in cells {
        if covered.contains(&cell) {
            continue;
        }
        let (pu, pv) = proj.pixel();
        let max_ring = w.max(h);
        let mut found = None;
        'rings: for ring in 0..=max_ring {
            for (u, v) in ring_pixels(pu as i64, pv as i64, ring) {
                if u < 0 || v < 0 || u >= w || v >= h {
                    continue;
                }
                let ray = cam.pixel_ray_unchecked(u as u32, v as u32);
                let hit = traversed_cells(occ, &ray, sampling);
                if hit.contains(&cell) {
                    found = Some(((u as u32, v as u32), hit));
                    break 'rings;
                }
            }
        }
        // unreachable by every pixel's sample set: nothing can cover it
        let Some((pixel, hit)) = found else {
            covered.insert(cell);
            continue;
        };
        covered.extend(hit);
        if emitted.insert(pixel) {
            pixels.push(pixel);
        }
    }
    pixels
}

fn ring_pixels(cu: i64, cv: i64, ring: i64) -> Vec<(i64, i64)> {
    if ring == 0 {
        return vec![(cu, cv)];
    }
    let mut out = Vec::with_capacity((8 * ring) as usize);
    for dv in -ring..=ring {
        for du in -ring..=ring {
            if du.abs() == ring || dv.abs() == ring {
                out.push((cu + du, cv + dv));
            }
        }
    }
    out
}
