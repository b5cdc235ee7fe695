//! Volumetric compositing of per-sample semantic logits along camera rays.
//!
//! For samples `m = 1..M` with densities `σ_m` and spacings `δ_m`:
//! `α_m = 1 − exp(−σ_m δ_m)`, `T_m = Π_{j<m} (1 − α_j)`, and the pixel
//! logits are `l_p = Σ_m T_m α_m l_m`, `y_p = softmax(l_p)`.
//!
//! Backward, with upstream `g = ∂L/∂l_p`, `w_m = T_m α_m` and `s_m = g · l_m`:
//! `∂L/∂l_m = w_m g` and
//! `∂L/∂σ_k = δ_k (T_{k+1} s_k − Σ_{m>k} w_m s_m)`.
//!
//! Ray rendering keeps nothing between the forward and backward passes: the
//! backward pass re-evaluates the ray. Samples whose trilinear stencil touches
//! no occupied cell share a single head evaluation at the zero feature.

use rayon::prelude::*;

use crate::geom::{CameraModel, Ray, RaySampling};
use crate::grid::{scatter, CylGrid, Stencil};
use crate::heads::{NerfEval, NerfHead};
use crate::imageio::GrayImage;
use crate::loss::{argmax, entropy, softmax};
use crate::nn::Params;
use crate::{ClassId, Error, Result};

/// Rays per parallel work unit; partial gradients are summed in chunk order.
const RAY_CHUNK: usize = 32;

/// Opacities and transmittances of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaT {
    pub alphas: Vec<f64>,
    /// `T_1..T_M`.
    pub trans: Vec<f64>,
    /// `T_{M+1}`, the light that passes every sample.
    pub t_final: f64,
}

impl AlphaT {
    pub fn weight(&self, m: usize) -> f64 {
        self.trans[m] * self.alphas[m]
    }
}

pub fn compute_alpha_t(densities: &[f64], deltas: &[f64]) -> AlphaT {
    assert_eq!(densities.len(), deltas.len());
    let mut alphas = Vec::with_capacity(densities.len());
    let mut trans = Vec::with_capacity(densities.len());
    let mut t = 1.0;
    for (&s, &d) in densities.iter().zip(deltas) {
        let x = s * d;
        alphas.push(-(-x).exp_m1());
        trans.push(t);
        t *= (-x).exp();
    }
    AlphaT { alphas, trans, t_final: t }
}

/// `(l_p, y_p)` from row-major `M × C` sample logits.
pub fn render_pixel(at: &AlphaT, logits: &[f64], classes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lp = vec![0.0; classes];
    for (m, row) in logits.chunks_exact(classes).enumerate() {
        let w = at.weight(m);
        for (o, l) in lp.iter_mut().zip(row) {
            *o += w * l;
        }
    }
    let yp = softmax(&lp);
    (lp, yp)
}

/// Gradients of `g · l_p` with respect to the sample logits (`M × C`) and
/// the densities.
pub fn render_backward(
    at: &AlphaT,
    deltas: &[f64],
    logits: &[f64],
    classes: usize,
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let m_count = at.alphas.len();
    let mut d_logits = vec![0.0; logits.len()];
    let mut d_sigma = vec![0.0; m_count];
    let s: Vec<f64> = logits.chunks_exact(classes).map(|row| crate::nn::dot(row, upstream)).collect();
    let mut suffix = 0.0;
    for k in (0..m_count).rev() {
        let w = at.weight(k);
        for (d, g) in d_logits[k * classes..(k + 1) * classes].iter_mut().zip(upstream) {
            *d = w * g;
        }
        let t_next = if k + 1 < m_count { at.trans[k + 1] } else { at.t_final };
        d_sigma[k] = deltas[k] * (t_next * s[k] - suffix);
        suffix += w * s[k];
    }
    (d_logits, d_sigma)
}

/// Per-sample record of a traced ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayTrace {
    pub distances: Vec<f64>,
    pub deltas: Vec<f64>,
    pub features: Vec<f64>,
    pub densities: Vec<f64>,
    /// `M × C`.
    pub logits: Vec<f64>,
    pub alpha_t: AlphaT,
}

/// Rendered rays: pixel coordinates, logits `l_p` and probabilities `y_p`
/// (both `P × C`), and optional per-sample traces.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    pub sampling: RaySampling,
    pub classes: usize,
    pub pixels: Vec<(u32, u32)>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub traces: Option<Vec<RayTrace>>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn logits_of(&self, i: usize) -> &[f64] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }

    pub fn probs_of(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn argmax(&self, i: usize) -> ClassId {
        argmax(self.probs_of(i)) as ClassId
    }

    pub fn entropy(&self, i: usize) -> f64 {
        entropy(self.probs_of(i))
    }
}

/// Grid, head and sampling for ray queries.
pub struct Renderer<'a> {
    pub grid: &'a CylGrid,
    pub head: &'a NerfHead,
    pub sampling: RaySampling,
    empty: NerfEval,
    zero_feature: Vec<f64>,
}

enum Sample {
    Empty,
    Occupied { stencil: Stencil, feature: Vec<f64>, eval: NerfEval },
}

impl<'a> Renderer<'a> {
    pub fn new(grid: &'a CylGrid, head: &'a NerfHead, sampling: RaySampling) -> Self {
        assert_eq!(grid.dim, head.feature_dim(), "grid and head feature widths differ");
        let zero_feature = vec![0.0; grid.dim];
        let empty = head.forward(&zero_feature);
        Renderer { grid, head, sampling, empty, zero_feature }
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    fn sample(&self, ray: &Ray, k: usize) -> Sample {
        let p = ray.at(self.sampling.distance(k));
        let Some(stencil) = self.grid.occupancy.slot_stencil(&p) else {
            return Sample::Empty;
        };
        let mut feature = vec![0.0; self.grid.dim];
        if !self.grid.gather(&stencil, &mut feature) {
            return Sample::Empty;
        }
        let eval = self.head.forward(&feature);
        Sample::Occupied { stencil, feature, eval }
    }

    fn eval_of<'s>(&'s self, s: &'s Sample) -> &'s NerfEval {
        match s {
            Sample::Empty => &self.empty,
            Sample::Occupied { eval, .. } => eval,
        }
    }

    fn march(&self, ray: &Ray) -> (Vec<Sample>, AlphaT, Vec<f64>) {
        let m = self.sampling.samples;
        let samples: Vec<Sample> = (0..m).map(|k| self.sample(ray, k)).collect();
        let densities: Vec<f64> = samples.iter().map(|s| self.eval_of(s).density).collect();
        let deltas = vec![self.sampling.delta(); m];
        let at = compute_alpha_t(&densities, &deltas);
        (samples, at, deltas)
    }

    fn sample_logits(&self, samples: &[Sample]) -> Vec<f64> {
        samples.iter().flat_map(|s| self.eval_of(s).logits.iter().copied()).collect()
    }

    /// `(l_p, y_p)` of one ray.
    pub fn render_ray(&self, ray: &Ray) -> (Vec<f64>, Vec<f64>) {
        let (samples, at, _) = self.march(ray);
        render_pixel(&at, &self.sample_logits(&samples), self.classes())
    }

    pub fn trace_ray(&self, ray: &Ray) -> RayTrace {
        let (samples, alpha_t, deltas) = self.march(ray);
        let features = samples
            .iter()
            .flat_map(|s| match s {
                Sample::Empty => self.zero_feature.clone(),
                Sample::Occupied { feature, .. } => feature.clone(),
            })
            .collect();
        RayTrace {
            distances: (0..self.sampling.samples).map(|k| self.sampling.distance(k)).collect(),
            deltas,
            features,
            densities: samples.iter().map(|s| self.eval_of(s).density).collect(),
            logits: self.sample_logits(&samples),
            alpha_t,
        }
    }

    /// Accumulates head and grid-feature gradients of `upstream · l_p`.
    pub fn backward_ray(&self, ray: &Ray, upstream: &[f64], head_grad: &mut NerfHead, grid_grad: &mut [f64]) {
        if upstream.iter().all(|&g| g == 0.0) {
            return;
        }
        let c = self.classes();
        let (samples, at, deltas) = self.march(ray);
        let logits = self.sample_logits(&samples);
        let (d_logits, d_sigma) = render_backward(&at, &deltas, &logits, c, upstream);
        let mut empty_dl = vec![0.0; c];
        let mut empty_ds = 0.0;
        let mut any_empty = false;
        let mut d_feature = vec![0.0; self.grid.dim];
        for (k, s) in samples.iter().enumerate() {
            let dl = &d_logits[k * c..(k + 1) * c];
            match s {
                Sample::Empty => {
                    any_empty = true;
                    for (a, b) in empty_dl.iter_mut().zip(dl) {
                        *a += b;
                    }
                    empty_ds += d_sigma[k];
                }
                Sample::Occupied { stencil, feature, eval } => {
                    self.head.backward(feature, eval, dl, d_sigma[k], head_grad, Some(&mut d_feature));
                    scatter(stencil, &d_feature, self.grid.dim, grid_grad);
                }
            }
        }
        if any_empty {
            // the head is linear in its upstream, so one pass covers them all
            self.head.backward(&self.zero_feature, &self.empty, &empty_dl, empty_ds, head_grad, None);
        }
    }
}

fn rays_for(cam: &CameraModel, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(u, v)| cam.pixel_ray(u, v)).collect()
}

/// Renders the given pixels. With `trace`, per-sample records are kept.
pub fn render_bundle(
    cam: &CameraModel,
    grid: &CylGrid,
    head: &NerfHead,
    pixels: &[(u32, u32)],
    sampling: RaySampling,
    trace: bool,
) -> Result<RayBundle> {
    if sampling.samples == 0 || !(sampling.near < sampling.far) {
        return Err(Error::Invalid("ray sampling needs M >= 1 and near < far".into()));
    }
    let rays = rays_for(cam, pixels)?;
    let r = Renderer::new(grid, head, sampling);
    let c = head.classes;
    let out: Vec<(Vec<f64>, Vec<f64>, Option<RayTrace>)> = rays
        .par_iter()
        .map(|ray| {
            if trace {
                let t = r.trace_ray(ray);
                let (lp, yp) = render_pixel(&t.alpha_t, &t.logits, c);
                (lp, yp, Some(t))
            } else {
                let (lp, yp) = r.render_ray(ray);
                (lp, yp, None)
            }
        })
        .collect();
    let mut bundle = RayBundle {
        sampling,
        classes: c,
        pixels: pixels.to_vec(),
        logits: Vec::with_capacity(pixels.len() * c),
        probs: Vec::with_capacity(pixels.len() * c),
        traces: trace.then(Vec::new),
    };
    for (lp, yp, t) in out {
        bundle.logits.extend(lp);
        bundle.probs.extend(yp);
        if let (Some(ts), Some(t)) = (bundle.traces.as_mut(), t) {
            ts.push(t);
        }
    }
    Ok(bundle)
}

/// Every pixel of the image, row-major.
pub fn all_pixels(cam: &CameraModel) -> Vec<(u32, u32)> {
    (0..cam.height).flat_map(|v| (0..cam.width).map(move |u| (u, v))).collect()
}

/// Accumulates head and grid gradients for `Σ_p d_logits[p] · l_p`.
pub fn render_bundle_backward(
    cam: &CameraModel,
    grid: &CylGrid,
    head: &NerfHead,
    pixels: &[(u32, u32)],
    sampling: RaySampling,
    d_logits: &[f64],
    head_grad: &mut NerfHead,
    grid_grad: &mut [f64],
) -> Result<()> {
    let c = head.classes;
    let rays = rays_for(cam, pixels)?;
    let r = Renderer::new(grid, head, sampling);
    let active: Vec<usize> = (0..rays.len()).filter(|&i| d_logits[i * c..(i + 1) * c].iter().any(|&g| g != 0.0)).collect();
    let partials: Vec<(NerfHead, Vec<f64>)> = active
        .par_chunks(RAY_CHUNK)
        .map(|chunk| {
            let mut hg = head.zeros_like();
            let mut gg = vec![0.0; grid_grad.len()];
            for &i in chunk {
                r.backward_ray(&rays[i], &d_logits[i * c..(i + 1) * c], &mut hg, &mut gg);
            }
            (hg, gg)
        })
        .collect();
    for (hg, gg) in partials {
        head_grad.add_assign(&hg);
        for (a, b) in grid_grad.iter_mut().zip(gg) {
            *a += b;
        }
    }
    Ok(())
}

/// Fixed class palette; index `C` and beyond cycle.
pub const PALETTE: [[u8; 3]; 8] = [
    [128, 64, 128],
    [70, 70, 70],
    [0, 0, 142],
    [153, 153, 153],
    [107, 142, 35],
    [220, 20, 60],
    [190, 153, 153],
    [220, 220, 0],
];

/// Color for unrendered or unlabeled pixels.
pub const BACKGROUND_RGB: [u8; 3] = [0, 0, 0];

pub fn class_rgb(c: ClassId) -> [u8; 3] {
    if c == crate::IGNORE {
        BACKGROUND_RGB
    } else {
        PALETTE[c as usize % PALETTE.len()]
    }
}

/// Argmax class of each rendered pixel as RGB; unrendered pixels black.
pub fn semantic_rgb(bundle: &RayBundle, width: u32, height: u32) -> Vec<[u8; 3]> {
    let mut img = vec![BACKGROUND_RGB; (width * height) as usize];
    for (i, &(u, v)) in bundle.pixels.iter().enumerate() {
        img[(v * width + u) as usize] = class_rgb(bundle.argmax(i));
    }
    img
}

/// Pixel entropy scaled by `255 / ln C`; unrendered pixels 0.
pub fn entropy_image(bundle: &RayBundle, width: u32, height: u32) -> GrayImage<u8> {
    let scale = 255.0 / (bundle.classes as f64).ln();
    let mut img = GrayImage::new(width, height, 0u8);
    for (i, &(u, v)) in bundle.pixels.iter().enumerate() {
        img.data[(v * width + u) as usize] = (bundle.entropy(i) * scale).round().clamp(0.0, 255.0) as u8;
    }
    img
}

#[cfg(test)]
mod tests;
