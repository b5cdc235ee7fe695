//! Segment masks and pseudo-labels for unlabeled scans.
//!
//! The confidence sampler turns rendered pixel distributions and generic
//! segment masks into per-segment labels: each segment takes the majority
//! of its pixels' argmax classes, the distributions of the agreeing pixels
//! are averaged, and the segment is kept only if that mean distribution has
//! entropy below the threshold. A kept segment labels all of its pixels,
//! including those whose own prediction disagreed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::CameraModel;
use crate::imageio::{self, GrayImage};
use crate::loss::{argmax, entropy};
use crate::render::RayBundle;
use crate::scene::{LabelImage, Scan};
use crate::{ClassId, Error, Result, IGNORE};

const UNSET: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentStatus {
    Accepted,
    /// Mean agreeing distribution too uncertain.
    HighEntropy,
    /// No rendered pixel inside the segment.
    NoCoverage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentVerdict {
    pub status: SegmentStatus,
    /// Majority class; `None` without coverage.
    pub class: Option<ClassId>,
    /// Entropy of the agreeing pixels' mean distribution, nats.
    pub entropy: Option<f64>,
}

impl SegmentVerdict {
    pub fn accepted_class(&self) -> Option<ClassId> {
        (self.status == SegmentStatus::Accepted).then_some(self.class).flatten()
    }
}

/// Label-agnostic pixel masks of one image; masks may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMaskSet {
    pub width: u32,
    pub height: u32,
    /// Sorted linear pixel indices (`v * width + u`) per segment.
    pub masks: Vec<Vec<u32>>,
    /// Filled by [`confidence_sampler`]; empty before.
    pub verdicts: Vec<SegmentVerdict>,
}

impl SegmentMaskSet {
    pub fn new(width: u32, height: u32, mut masks: Vec<Vec<u32>>) -> Result<Self> {
        let n = width * height;
        for m in &mut masks {
            m.sort_unstable();
            m.dedup();
            if m.is_empty() {
                return Err(Error::Invalid("segment masks must be non-empty".into()));
            }
            if m.last().is_some_and(|&p| p >= n) {
                return Err(Error::Invalid("segment pixel outside the image".into()));
            }
        }
        Ok(SegmentMaskSet { width, height, masks, verdicts: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Non-overlapping export: each pixel holds the 1-based id of the first
    /// segment containing it, 0 elsewhere.
    pub fn flatten(&self) -> GrayImage<u16> {
        let mut img = GrayImage::new(self.width, self.height, 0u16);
        for (s, m) in self.masks.iter().enumerate().rev() {
            for &p in m {
                img.data[p as usize] = (s + 1) as u16;
            }
        }
        img
    }

    /// `"id: start,len start,len ..."` per segment (1-based ids).
    pub fn to_rle(&self) -> String {
        let mut out = String::new();
        for (s, m) in self.masks.iter().enumerate() {
            let _ = write!(out, "{}:", s + 1);
            let mut i = 0;
            while i < m.len() {
                let start = m[i];
                let mut len = 1;
                while i + len < m.len() && m[i + len] == start + len as u32 {
                    len += 1;
                }
                let _ = write!(out, " {start},{len}");
                i += len;
            }
            out.push('\n');
        }
        out
    }

    pub fn from_rle(text: &str, width: u32, height: u32, path: &Path) -> Result<Self> {
        let mut by_id: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::format(path, format!("line {}: expected `id: start,len ...`", lineno + 1));
            let (id, runs) = line.split_once(':').ok_or_else(bad)?;
            let id: u32 = id.trim().parse().map_err(|_| bad())?;
            let pixels = by_id.entry(id).or_default();
            for run in runs.split_whitespace() {
                let (s, l) = run.split_once(',').ok_or_else(bad)?;
                let s: u32 = s.parse().map_err(|_| bad())?;
                let l: u32 = l.parse().map_err(|_| bad())?;
                pixels.extend(s..s.checked_add(l).ok_or_else(bad)?);
            }
        }
        Self::new(width, height, by_id.into_values().collect()).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Segments from a flattened id image, ordered by id.
    pub fn from_flat(img: &GrayImage<u16>) -> Result<Self> {
        let mut by_id: BTreeMap<u16, Vec<u32>> = BTreeMap::new();
        for (p, &id) in img.data.iter().enumerate() {
            if id != 0 {
                by_id.entry(id).or_default().push(p as u32);
            }
        }
        Self::new(img.width, img.height, by_id.into_values().collect())
    }

    /// Writes the flattened 16-bit PGM and, if given, the RLE sidecar.
    pub fn save(&self, pgm: &Path, rle: Option<&Path>) -> Result<()> {
        imageio::write_bytes(pgm, &imageio::encode_pgm16(&self.flatten()))?;
        if let Some(rle) = rle {
            imageio::write_bytes(rle, self.to_rle().as_bytes())?;
        }
        Ok(())
    }

    /// Prefers the sidecar (which keeps overlaps) when it exists.
    pub fn load(pgm: &Path, rle: Option<&Path>) -> Result<Self> {
        let flat = imageio::read_pgm16(pgm)?;
        match rle {
            Some(rle) if rle.exists() => {
                let text = std::fs::read_to_string(rle).map_err(|e| Error::io(rle, e))?;
                Self::from_rle(&text, flat.width, flat.height, rle)
            }
            _ => Self::from_flat(&flat),
        }
    }
}

/// Per-pixel class or [`IGNORE`].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPseudoLabels {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<ClassId>,
}

impl PixelPseudoLabels {
    pub fn empty(width: u32, height: u32) -> Self {
        PixelPseudoLabels { width, height, labels: vec![IGNORE; (width * height) as usize] }
    }

    pub fn at(&self, u: u32, v: u32) -> ClassId {
        self.labels[(v * self.width + u) as usize]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Labels of the bundle's pixels, in bundle order.
    pub fn for_bundle(&self, bundle: &RayBundle) -> Vec<ClassId> {
        bundle.pixels.iter().map(|&(u, v)| self.at(u, v)).collect()
    }
}

fn bundle_index(bundle: &RayBundle, width: u32, height: u32) -> Vec<u32> {
    let mut idx = vec![UNSET; (width * height) as usize];
    for (i, &(u, v)) in bundle.pixels.iter().enumerate() {
        idx[(v * width + u) as usize] = i as u32;
    }
    idx
}

/// Smallest class among those with the highest count.
pub fn majority(counts: &[usize]) -> Option<usize> {
    let best = *counts.iter().max()?;
    (best > 0).then(|| counts.iter().position(|&c| c == best).expect("max exists"))
}

/// Segment verdicts and stamped pixel labels. Overlaps go to the accepted
/// segment with the lowest entropy, ties to the smaller segment index.
pub fn confidence_sampler(
    bundle: &RayBundle,
    masks: &SegmentMaskSet,
    threshold: f64,
) -> (SegmentMaskSet, PixelPseudoLabels) {
    let c = bundle.classes;
    let index = bundle_index(bundle, masks.width, masks.height);
    let argmaxes: Vec<usize> = (0..bundle.len()).map(|i| argmax(bundle.probs_of(i))).collect();
    let mut verdicts = Vec::with_capacity(masks.len());
    for mask in &masks.masks {
        let rows: Vec<usize> =
            mask.iter().map(|&p| index[p as usize]).filter(|&i| i != UNSET).map(|i| i as usize).collect();
        let mut counts = vec![0usize; c];
        for &i in &rows {
            counts[argmaxes[i]] += 1;
        }
        let Some(cls) = majority(&counts) else {
            verdicts.push(SegmentVerdict { status: SegmentStatus::NoCoverage, class: None, entropy: None });
            continue;
        };
        let mut mean = vec![0.0; c];
        for &i in rows.iter().filter(|&&i| argmaxes[i] == cls) {
            for (m, p) in mean.iter_mut().zip(bundle.probs_of(i)) {
                *m += p;
            }
        }
        let n = counts[cls] as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let h = entropy(&mean);
        let status = if h < threshold { SegmentStatus::Accepted } else { SegmentStatus::HighEntropy };
        verdicts.push(SegmentVerdict { status, class: Some(cls as ClassId), entropy: Some(h) });
    }

    let mut order: Vec<usize> = (0..masks.len()).filter(|&s| verdicts[s].status == SegmentStatus::Accepted).collect();
    order.sort_by(|&a, &b| verdicts[a].entropy.unwrap().total_cmp(&verdicts[b].entropy.unwrap()).then(a.cmp(&b)));
    let mut labels = PixelPseudoLabels::empty(masks.width, masks.height);
    for s in order {
        let cls = verdicts[s].class.expect("accepted segments have a class");
        for &p in &masks.masks[s] {
            let l = &mut labels.labels[p as usize];
            if *l == IGNORE {
                *l = cls;
            }
        }
    }
    let mut out = masks.clone();
    out.verdicts = verdicts;
    (out, labels)
}

/// Pixel argmax where the pixel's own entropy is below the threshold.
pub fn nosam_pseudolabels(bundle: &RayBundle, width: u32, height: u32, threshold: f64) -> PixelPseudoLabels {
    let mut labels = PixelPseudoLabels::empty(width, height);
    for (i, &(u, v)) in bundle.pixels.iter().enumerate() {
        if bundle.entropy(i) < threshold {
            labels.labels[(v * width + u) as usize] = bundle.argmax(i);
        }
    }
    labels
}

/// 3D pseudo-labels from projected points: each segment takes the majority
/// of the predicted classes of the points projecting into it, and every
/// projected point inherits the label of the first segment containing its
/// pixel. Points outside the image or any segment get [`IGNORE`].
pub fn perspective_baseline(
    scan: &Scan,
    cam: &CameraModel,
    point_preds: &[ClassId],
    masks: &SegmentMaskSet,
    classes: usize,
) -> Vec<ClassId> {
    assert_eq!(point_preds.len(), scan.len());
    let mut first_segment = vec![UNSET; (masks.width * masks.height) as usize];
    for (s, m) in masks.masks.iter().enumerate().rev() {
        for &p in m {
            first_segment[p as usize] = s as u32;
        }
    }
    let point_segment: Vec<u32> = scan
        .points
        .iter()
        .map(|p| match cam.project_point(p) {
            Some(proj) => {
                let (u, v) = proj.pixel();
                first_segment[(v * masks.width + u) as usize]
            }
            None => UNSET,
        })
        .collect();
    let mut counts = vec![vec![0usize; classes]; masks.len()];
    for (i, &s) in point_segment.iter().enumerate() {
        if s != UNSET && point_preds[i] != IGNORE {
            counts[s as usize][point_preds[i] as usize] += 1;
        }
    }
    let seg_label: Vec<ClassId> =
        counts.iter().map(|c| majority(c).map_or(IGNORE, |k| k as ClassId)).collect();
    point_segment.iter().map(|&s| if s == UNSET { IGNORE } else { seg_label[s as usize] }).collect()
}

/// 4-connected components of each nonzero instance id, in raster order of
/// their first pixel.
pub fn instance_components(img: &LabelImage) -> Vec<Vec<u32>> {
    let (w, h) = (img.width as usize, img.height as usize);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        let id = img.instance[start];
        if id == 0 || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p as u32);
            let (u, v) = (p % w, p / w);
            let mut push = |q: usize| {
                if !seen[q] && img.instance[q] == id {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if u > 0 {
                push(p - 1);
            }
            if u + 1 < w {
                push(p + 1);
            }
            if v > 0 {
                push(p - w);
            }
            if v + 1 < h {
                push(p + w);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Stand-in for a generic mask generator: instance components with
/// `perturbation` rounds of random boundary growth or shrinkage. Each round
/// picks grow or shrink per mask and flips each boundary pixel with
/// probability 1/2. A mask that would vanish keeps its previous shape.
pub fn oracle_masks(img: &LabelImage, seed: u64, perturbation: u32) -> SegmentMaskSet {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = instance_components(img);
    for mask in &mut masks {
        for _ in 0..perturbation {
            let mut inside = vec![false; (w * h) as usize];
            for &p in mask.iter() {
                inside[p as usize] = true;
            }
            let grow = rng.random_bool(0.5);
            let neighbors = |p: i64| {
                let (u, v) = (p % w, p / w);
                [(u - 1, v), (u + 1, v), (u, v - 1), (u, v + 1)]
                    .into_iter()
                    .filter(move |&(x, y)| x >= 0 && y >= 0 && x < w && y < h)
                    .map(move |(x, y)| y * w + x)
            };
            let mut next = inside.clone();
            if grow {
                let mut frontier: Vec<i64> = mask
                    .iter()
                    .flat_map(|&p| neighbors(p as i64))
                    .filter(|&q| !inside[q as usize])
                    .collect();
                frontier.sort_unstable();
                frontier.dedup();
                for q in frontier {
                    if rng.random_bool(0.5) {
                        next[q as usize] = true;
                    }
                }
            } else {
                for &p in mask.iter() {
                    let on_edge = neighbors(p as i64).count() < 4 || neighbors(p as i64).any(|q| !inside[q as usize]);
                    if on_edge && rng.random_bool(0.5) {
                        next[p as usize] = false;
                    }
                }
            }
            let updated: Vec<u32> = (0..(w * h) as u32).filter(|&p| next[p as usize]).collect();
            if !updated.is_empty() {
                *mask = updated;
            }
        }
    }
    SegmentMaskSet::new(img.width, img.height, masks).expect("components are non-empty and in bounds")
}
