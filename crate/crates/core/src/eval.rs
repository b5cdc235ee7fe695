//! Per-class IoU and mIoU, image dumps, boundary bands and the parallax
//! diagnostic.

use std::fmt::Write as _;
use std::path::Path;

use crate::geom::{RaySampling, Vec3};
use crate::grid::{voxelize, CylGrid, GridSpec};
use crate::heads::{NerfHead, NERF_HIDDEN};
use crate::imageio::{self, GrayImage};
use crate::pseudo::{confidence_sampler, majority, oracle_masks, PixelPseudoLabels, SegmentMaskSet};
use crate::render::{all_pixels, class_rgb, entropy_image, render_bundle, semantic_rgb, RayBundle};
use crate::scene::{self, LabelImage, Scan, Scene, SceneConfig};
use crate::{ClassId, Error, Result, IGNORE};

/// Counts indexed `[target][pred]`. Predictions of [`IGNORE`] against a
/// valid target are kept in `missed` so they still count as false negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
    pub missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes], missed: vec![0; classes] }
    }

    pub fn add(&mut self, pred: ClassId, target: ClassId) {
        if target == IGNORE {
            return;
        }
        let t = target as usize;
        if pred == IGNORE {
            self.missed[t] += 1;
        } else {
            self.counts[t * self.classes + pred as usize] += 1;
        }
    }

    pub fn add_all(&mut self, preds: &[ClassId], targets: &[ClassId]) -> Result<()> {
        if preds.len() != targets.len() {
            return Err(Error::Invalid(format!("{} predictions for {} targets", preds.len(), targets.len())));
        }
        for (&p, &t) in preds.iter().zip(targets) {
            self.add(p, t);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.missed.iter_mut().zip(&other.missed) {
            *a += b;
        }
    }

    pub fn get(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.classes + pred]
    }

    /// Number of non-IGNORE targets seen.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// IoU per class; `None` where the class appears in neither predictions
    /// nor targets.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum::<u64>() + self.missed[c];
                let fp: u64 = (0..self.classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over classes with defined IoU (0 if none).
    pub fn miou(&self) -> f64 {
        let v: Vec<f64> = self.iou().into_iter().flatten().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

pub fn miou(preds: &[ClassId], targets: &[ClassId], classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add_all(preds, targets)?;
    Ok((cm.iou(), cm.miou()))
}

/// Pixels within `radius` (Chebyshev) of a place where the instance id
/// changes between 4-neighbors.
pub fn boundary_band(img: &LabelImage, radius: u32) -> Vec<bool> {
    let (w, h) = (img.width as i64, img.height as i64);
    let idx = |u: i64, v: i64| (v * w + u) as usize;
    let mut edge = vec![false; (w * h) as usize];
    for v in 0..h {
        for u in 0..w {
            let id = img.instance[idx(u, v)];
            if (u + 1 < w && img.instance[idx(u + 1, v)] != id) || (v + 1 < h && img.instance[idx(u, v + 1)] != id) {
                edge[idx(u, v)] = true;
                if u + 1 < w && img.instance[idx(u + 1, v)] != id {
                    edge[idx(u + 1, v)] = true;
                }
                if v + 1 < h && img.instance[idx(u, v + 1)] != id {
                    edge[idx(u, v + 1)] = true;
                }
            }
        }
    }
    let r = radius as i64;
    let mut band = vec![false; edge.len()];
    for v in 0..h {
        for u in 0..w {
            if !edge[idx(u, v)] {
                continue;
            }
            for dv in -r..=r {
                for du in -r..=r {
                    let (x, y) = (u + du, v + dv);
                    if x >= 0 && y >= 0 && x < w && y < h {
                        band[idx(x, y)] = true;
                    }
                }
            }
        }
    }
    band
}

/// Mean rendered-pixel entropy in the boundary band and in the interior,
/// over pixels with a valid ground-truth class.
pub fn band_entropy(bundle: &RayBundle, img: &LabelImage, radius: u32) -> (f64, f64) {
    let band = boundary_band(img, radius);
    let (mut sb, mut nb, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for (i, &(u, v)) in bundle.pixels.iter().enumerate() {
        let p = img.index(u, v);
        if img.class[p] == IGNORE {
            continue;
        }
        let h = bundle.entropy(i);
        if band[p] {
            sb += h;
            nb += 1;
        } else {
            si += h;
            ni += 1;
        }
    }
    (sb / nb.max(1) as f64, si / ni.max(1) as f64)
}

/// Writes `<prefix>semantic.ppm`, `entropy.pgm`, `correct.ppm` (green
/// correct, red wrong, black unrendered or unlabeled) and `pseudo.ppm`.
pub fn dump_images(
    bundle: &RayBundle,
    pseudo: Option<&PixelPseudoLabels>,
    img: &LabelImage,
    dir: &Path,
    prefix: &str,
) -> Result<()> {
    let (w, h) = (img.width, img.height);
    let path = |name: &str| dir.join(format!("{prefix}{name}"));
    imageio::write_bytes(&path("semantic.ppm"), &imageio::encode_ppm(w, h, &semantic_rgb(bundle, w, h)))?;
    imageio::write_bytes(&path("entropy.pgm"), &imageio::encode_pgm8(&entropy_image(bundle, w, h)))?;
    let mut correct = vec![[0u8; 3]; (w * h) as usize];
    for (i, &(u, v)) in bundle.pixels.iter().enumerate() {
        let gt = img.class_at(u, v);
        if gt != IGNORE {
            correct[img.index(u, v)] = if bundle.argmax(i) == gt { [0, 200, 0] } else { [220, 0, 0] };
        }
    }
    imageio::write_bytes(&path("correct.ppm"), &imageio::encode_ppm(w, h, &correct))?;
    if let Some(p) = pseudo {
        let rgb: Vec<[u8; 3]> = p.labels.iter().map(|&c| class_rgb(c)).collect();
        imageio::write_bytes(&path("pseudo.ppm"), &imageio::encode_ppm(w, h, &rgb))?;
    }
    Ok(())
}

pub fn entropy_pgm(bundle: &RayBundle, w: u32, h: u32) -> GrayImage<u8> {
    entropy_image(bundle, w, h)
}

/// Density/semantics field built directly from labeled points: each
/// occupied cell stores the one-hot majority label, and the head reads the
/// class from the feature and the density from its sum. Opaque where the
/// interpolated occupancy exceeds 1/2, nearly transparent in empty space.
pub fn oracle_field(scan: &Scan, spec: &GridSpec, classes: usize) -> (CylGrid, NerfHead) {
    let vox = voxelize(&scan.points, spec);
    let mut grid = CylGrid::zeros(std::sync::Arc::clone(&vox.occupancy), classes);
    for (slot, pts) in vox.slot_points.iter().enumerate() {
        let mut counts = vec![0usize; classes];
        for &i in pts {
            let l = scan.labels[i as usize];
            if l != IGNORE {
                counts[l as usize] += 1;
            }
        }
        if let Some(c) = majority(&counts) {
            grid.feature_mut(slot)[c] = 1.0;
        }
    }
    let mut head = NerfHead::zeros(classes, classes);
    assert!(classes < NERF_HIDDEN, "oracle head needs C < hidden width");
    for c in 0..classes {
        head.l1.w[c * classes + c] = 1.0;
        head.l1.w[classes * classes + c] = 1.0;
        head.l2.w[c * NERF_HIDDEN + c] = 10.0;
    }
    head.l2.w[classes * NERF_HIDDEN + classes] = 20.0;
    head.l2.b[classes] = -10.0;
    (grid, head)
}

/// Pixel labels from projected points: each segment takes the majority of
/// the labels of points projecting into it and stamps all its pixels;
/// overlaps go to the lower segment index.
pub fn perspective_pixel_labels(
    scan: &Scan,
    scene: &Scene,
    masks: &SegmentMaskSet,
    classes: usize,
) -> PixelPseudoLabels {
    let cam = &scene.camera;
    let mut owner = vec![u32::MAX; (masks.width * masks.height) as usize];
    for (s, m) in masks.masks.iter().enumerate().rev() {
        for &p in m {
            owner[p as usize] = s as u32;
        }
    }
    let mut counts = vec![vec![0usize; classes]; masks.len()];
    for (p, &l) in scan.points.iter().zip(&scan.labels) {
        let Some(proj) = cam.project_point(p) else { continue };
        let (u, v) = proj.pixel();
        let s = owner[(v * masks.width + u) as usize];
        if s != u32::MAX && l != IGNORE {
            counts[s as usize][l as usize] += 1;
        }
    }
    let mut labels = PixelPseudoLabels::empty(masks.width, masks.height);
    for (s, m) in masks.masks.iter().enumerate().rev() {
        if let Some(c) = majority(&counts[s]) {
            for &p in m {
                labels.labels[p as usize] = c as ClassId;
            }
        }
    }
    labels
}

/// Correct and labeled pixel counts, overall and in the boundary band.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PixelAccuracy {
    pub correct: u64,
    pub labeled: u64,
    pub band_correct: u64,
    pub band_labeled: u64,
}

impl PixelAccuracy {
    pub fn measure(labels: &PixelPseudoLabels, img: &LabelImage, band: &[bool]) -> Self {
        let mut a = PixelAccuracy::default();
        for (p, (&l, &gt)) in labels.labels.iter().zip(&img.class).enumerate() {
            if l == IGNORE || gt == IGNORE {
                continue;
            }
            let ok = (l == gt) as u64;
            a.labeled += 1;
            a.correct += ok;
            if band[p] {
                a.band_labeled += 1;
                a.band_correct += ok;
            }
        }
        a
    }

    pub fn add(&mut self, o: &PixelAccuracy) {
        self.correct += o.correct;
        self.labeled += o.labeled;
        self.band_correct += o.band_correct;
        self.band_labeled += o.band_labeled;
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.labeled.max(1) as f64
    }

    pub fn band_accuracy(&self) -> f64 {
        self.band_correct as f64 / self.band_labeled.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallaxSettings {
    pub scenes: usize,
    pub seed: u64,
    /// Camera displacement direction (normalized internally).
    pub direction: Vec3,
    pub sampling: RaySampling,
    pub mask_perturbation: u32,
    pub entropy_threshold: f64,
    pub band_radius: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParallaxRow {
    pub offset: f64,
    pub ray: PixelAccuracy,
    pub perspective: PixelAccuracy,
}

/// Pixel pseudo-label accuracy of ray-based labeling (oracle field rendered
/// from the camera, then the confidence sampler) against perspective
/// projection of labeled points, per camera offset.
pub fn parallax_report(config: &SceneConfig, settings: &ParallaxSettings, offsets: &[f64]) -> Result<Vec<ParallaxRow>> {
    let dir = settings.direction.normalize();
    let pattern = config.lidar_pattern();
    let seeds = scene::scene_seeds(settings.seed, settings.scenes);
    let mut rows: Vec<ParallaxRow> = offsets
        .iter()
        .map(|&o| ParallaxRow { offset: o, ray: PixelAccuracy::default(), perspective: PixelAccuracy::default() })
        .collect();
    for &s in &seeds {
        let base = scene::generate_scene(config, s)?;
        let scan = scene::simulate_lidar(&base, &pattern);
        let (grid, head) = oracle_field(&scan, &config.grid, config.classes);
        for row in rows.iter_mut() {
            let sc = base.with_camera_offset(config.camera_offset + dir * row.offset);
            let img = scene::render_label_image(&sc, &sc.camera);
            let band = boundary_band(&img, settings.band_radius);
            let masks = oracle_masks(&img, s, settings.mask_perturbation);
            let bundle = render_bundle(&sc.camera, &grid, &head, &all_pixels(&sc.camera), settings.sampling, false)?;
            let (_, ray_labels) = confidence_sampler(&bundle, &masks, settings.entropy_threshold);
            let persp = perspective_pixel_labels(&scan, &sc, &masks, config.classes);
            row.ray.add(&PixelAccuracy::measure(&ray_labels, &img, &band));
            row.perspective.add(&PixelAccuracy::measure(&persp, &img, &band));
        }
    }
    Ok(rows)
}

pub fn format_parallax(rows: &[ParallaxRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>8} {:>10} {:>10} {:>10} {:>10}", "offset", "ray_all", "ray_band", "persp_all", "persp_band");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>8.3} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.offset,
            r.ray.accuracy(),
            r.ray.band_accuracy(),
            r.perspective.accuracy(),
            r.perspective.band_accuracy()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = [0, 1, 2, 1];
        assert_eq!(miou(&t, &t, 3).unwrap().1, 1.0);
    }

    #[test]
    fn hand_counted_example() {
        let (iou, m) = miou(&[0, 0, 1, 1, 0], &[0, 0, 0, 1, 1], 2).unwrap();
        // class 0: TP 2, FP 1, FN 1; class 1: TP 1, FP 1, FN 1
        assert_eq!(iou, vec![Some(0.5), Some(1.0 / 3.0)]);
        assert!((m - 5.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn constant_prediction_on_balanced_targets() {
        let (_, m) = miou(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((m - 0.25).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded_and_ignore_counts() {
        let mut cm = ConfusionMatrix::new(4);
        cm.add_all(&[0, IGNORE, 1], &[0, 1, IGNORE]).unwrap();
        assert_eq!(cm.total(), 2);
        let iou = cm.iou();
        assert_eq!(iou[0], Some(1.0));
        assert_eq!(iou[1], Some(0.0));
        assert_eq!(iou[2], None);
        assert!((cm.miou() - 0.5).abs() < 1e-15);
        assert!(miou(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn band_marks_both_sides_of_an_edge() {
        let img = LabelImage { width: 8, height: 1, class: vec![0; 8], instance: vec![1, 1, 1, 1, 2, 2, 2, 2] };
        let band = boundary_band(&img, 1);
        assert_eq!(band, vec![false, false, true, true, true, true, false, false]);
    }
}
