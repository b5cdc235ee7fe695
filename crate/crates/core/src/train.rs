//! Semi-supervised training: one labeled and one unlabeled scene per step,
//! three loss terms, SGD with momentum, and the four training modes.

pub mod checkpoint;
pub mod dataset;

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{BackboneInput, MiniVoxNet};
use crate::config::{KeyValues, KvWriter};
use crate::eval::{band_entropy, dump_images, ConfusionMatrix};
use crate::geom::{min_cover_pixels, RaySampling};
use crate::grid::{voxelize, CylGrid, Voxelization, NONE};
use crate::heads::{NerfHead, VoxHead};
use crate::loss::{argmax, term_loss, LossWeights};
use crate::nn::{Params, Sgd};
use crate::pseudo::{confidence_sampler, nosam_pseudolabels, perspective_baseline, PixelPseudoLabels};
use crate::render::{all_pixels, render_bundle, render_bundle_backward, RayBundle};
use crate::{ClassId, Error, Result, IGNORE};

pub use dataset::{Dataset, SceneRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Full,
    SupOnly,
    Perspective,
    NoSam,
}

impl Mode {
    /// Table order: weakest baseline first.
    pub const ALL: [Mode; 4] = [Mode::SupOnly, Mode::Perspective, Mode::NoSam, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::SupOnly => "sup-only",
            Mode::Perspective => "perspective",
            Mode::NoSam => "no-sam",
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self != Mode::SupOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode `{s}` (full, sup-only, perspective, no-sam)")))
    }
}

/// Which pixels of an unlabeled scene are rendered each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelSet {
    /// Greedy set of rays that covers every occupied in-frustum cell.
    Cover,
    All,
}

impl FromStr for PixelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cover" => Ok(PixelSet::Cover),
            "all" => Ok(PixelSet::All),
            _ => Err(Error::config(format!("unknown pixel set `{s}` (cover, all)"))),
        }
    }
}

impl fmt::Display for PixelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PixelSet::Cover => "cover",
            PixelSet::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub labeled_fraction: f64,
    /// Trailing fraction of the dataset held out for evaluation.
    pub heldout_fraction: f64,
    /// Loss weights; `weights.epochs` is the epoch count E.
    pub weights: LossWeights,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub kappa: f64,
    pub density_bias: f64,
    pub sampling: RaySampling,
    pub pixel_set: PixelSet,
    /// Cap on rendered rays per unlabeled scene and step; 0 for no cap.
    pub max_rays: usize,
    /// Write a checkpoint every N epochs; 0 for the final one only.
    pub checkpoint_every: usize,
    /// Held-out scenes rendered for image dumps and boundary entropy.
    pub render_eval_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Full,
            seed: 0,
            steps_per_epoch: 150,
            lr: 1e-2,
            momentum: 0.9,
            labeled_fraction: 0.1,
            heldout_fraction: 0.2,
            weights: LossWeights::default(),
            hidden_dim: 32,
            feature_dim: 16,
            kappa: 0.3,
            density_bias: -4.0,
            sampling: RaySampling { near: 2.3, far: 25.0, samples: 64 },
            pixel_set: PixelSet::Cover,
            max_rays: 0,
            checkpoint_every: 0,
            render_eval_scenes: 4,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.weights.epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::config("labeled_fraction must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::config("heldout_fraction must be in [0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("lr must be > 0 and momentum in [0, 1)"));
        }
        if self.steps_per_epoch == 0 || self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::config("steps_per_epoch, hidden_dim and feature_dim must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.kappa) || !self.density_bias.is_finite() {
            return Err(Error::config("kappa must be in [0, 1] and density_bias finite"));
        }
        RaySampling::new(self.sampling.near, self.sampling.far, self.sampling.samples)
            .map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let mode = match kv.take_str("mode") {
            Some(s) => s.parse()?,
            None => d.mode,
        };
        let pixel_set = match kv.take_str("pixel_set") {
            Some(s) => s.parse()?,
            None => d.pixel_set,
        };
        let cfg = TrainConfig {
            mode,
            seed: kv.take_or("seed", d.seed)?,
            steps_per_epoch: kv.take_or("steps_per_epoch", d.steps_per_epoch)?,
            lr: kv.take_or("lr", d.lr)?,
            momentum: kv.take_or("momentum", d.momentum)?,
            labeled_fraction: kv.take_or("labeled_fraction", d.labeled_fraction)?,
            heldout_fraction: kv.take_or("heldout_fraction", d.heldout_fraction)?,
            weights: LossWeights::from_kv(kv)?,
            hidden_dim: kv.take_or("hidden_dim", d.hidden_dim)?,
            feature_dim: kv.take_or("feature_dim", d.feature_dim)?,
            kappa: kv.take_or("kappa", d.kappa)?,
            density_bias: kv.take_or("density_bias", d.density_bias)?,
            sampling: RaySampling {
                near: kv.take_or("near", d.sampling.near)?,
                far: kv.take_or("far", d.sampling.far)?,
                samples: kv.take_or("samples", d.sampling.samples)?,
            },
            pixel_set,
            max_rays: kv.take_or("max_rays", d.max_rays)?,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
            render_eval_scenes: kv.take_or("render_eval_scenes", d.render_eval_scenes)?,
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
        w.put("mode", self.mode)
            .put("seed", self.seed)
            .put("steps_per_epoch", self.steps_per_epoch)
            .put("lr", self.lr)
            .put("momentum", self.momentum)
            .put("labeled_fraction", self.labeled_fraction)
            .put("heldout_fraction", self.heldout_fraction);
        self.weights.write_kv(w);
        w.put("hidden_dim", self.hidden_dim)
            .put("feature_dim", self.feature_dim)
            .put("kappa", self.kappa)
            .put("density_bias", self.density_bias)
            .put("near", self.sampling.near)
            .put("far", self.sampling.far)
            .put("samples", self.sampling.samples)
            .put("pixel_set", self.pixel_set)
            .put("max_rays", self.max_rays)
            .put("checkpoint_every", self.checkpoint_every)
            .put("render_eval_scenes", self.render_eval_scenes);
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        self.write_kv(&mut w);
        w.finish()
    }
}

/// Backbone plus both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: MiniVoxNet,
    pub vox: VoxHead,
    pub nerf: NerfHead,
}

impl Model {
    pub fn init(cfg: &TrainConfig, classes: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Model {
            backbone: MiniVoxNet::random(cfg.hidden_dim, cfg.feature_dim, cfg.kappa, &mut rng)?,
            vox: VoxHead::random(cfg.feature_dim, classes, &mut rng),
            nerf: NerfHead::random(cfg.feature_dim, classes, cfg.density_bias, &mut rng),
        })
    }

    pub fn classes(&self) -> usize {
        self.vox.classes()
    }

    pub fn zeros_like(&self) -> Self {
        Model { backbone: self.backbone.zeros_like(), vox: self.vox.zeros_like(), nerf: self.nerf.zeros_like() }
    }

    pub fn inference(&self) -> InferenceModel {
        InferenceModel { backbone: self.backbone.clone(), vox: self.vox.clone() }
    }
}

impl Params for Model {
    fn params(&self) -> Vec<&[f64]> {
        let mut v = self.backbone.params();
        v.extend(self.vox.params());
        v.extend(self.nerf.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.backbone.params_mut();
        v.extend(self.vox.params_mut());
        v.extend(self.nerf.params_mut());
        v
    }
}

/// The deployment path: backbone and voxel head, no camera machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModel {
    pub backbone: MiniVoxNet,
    pub vox: VoxHead,
}

impl InferenceModel {
    /// Per-point classes; points outside the grid get [`IGNORE`].
    pub fn predict(&self, scene: &PreparedScene) -> Vec<ClassId> {
        let (grid, _) = self.backbone.forward(&scene.input);
        let logits = self.vox.forward(&grid);
        point_predictions(&logits, &scene.vox, self.vox.classes())
    }
}

fn point_predictions(slot_logits: &[f64], vox: &Voxelization, classes: usize) -> Vec<ClassId> {
    vox.point_slot
        .iter()
        .map(|&s| {
            if s == NONE {
                IGNORE
            } else {
                let s = s as usize;
                argmax(&slot_logits[s * classes..(s + 1) * classes]) as ClassId
            }
        })
        .collect()
}

/// A scene record with its voxelization and backbone input precomputed.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub record: SceneRecord,
    pub vox: Voxelization,
    pub input: BackboneInput,
    /// Pixels rendered when the scene is used as unlabeled data.
    pub pixels: Vec<(u32, u32)>,
}

impl PreparedScene {
    pub fn new(record: SceneRecord, spec: &crate::GridSpec, sampling: &RaySampling, pixel_set: PixelSet) -> Self {
        let vox = voxelize(&record.scan.points, spec);
        let input = BackboneInput::new(&vox, &record.scan.points, &record.scan.intensity);
        let pixels = match pixel_set {
            PixelSet::Cover => min_cover_pixels(&record.camera, &vox.occupancy, sampling),
            PixelSet::All => all_pixels(&record.camera),
        };
        PreparedScene { record, vox, input, pixels }
    }
}

pub fn prepare_all(dataset: &Dataset, cfg: &TrainConfig) -> Vec<PreparedScene> {
    dataset
        .records
        .par_iter()
        .map(|r| PreparedScene::new(r.clone(), &dataset.scene_config.grid, &cfg.sampling, cfg.pixel_set))
        .collect()
}

/// Supervision derived for an unlabeled scene before the gradient pass.
#[derive(Debug, Clone, PartialEq)]
pub enum UnlabeledTarget {
    /// Rendered pixels and their pseudo-labels (no IGNORE entries).
    Pixels { pixels: Vec<(u32, u32)>, labels: Vec<ClassId> },
    /// Per-point labels for the voxel head.
    Points(Vec<ClassId>),
}

impl UnlabeledTarget {
    pub fn labeled_count(&self) -> usize {
        match self {
            UnlabeledTarget::Pixels { labels, .. } => labels.len(),
            UnlabeledTarget::Points(l) => l.iter().filter(|&&c| c != IGNORE).count(),
        }
    }
}

/// Raw term values (before weighting) and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub vox: f64,
    pub nerf3d: f64,
    pub nerf2d: f64,
    pub total: f64,
    /// Supervised entries in the unlabeled term.
    pub pseudo_labeled: usize,
}

/// Pseudo-labels for one unlabeled scene under the current model.
pub fn pseudo_targets(
    model: &Model,
    mode: Mode,
    scene: &PreparedScene,
    pixels: &[(u32, u32)],
    sampling: RaySampling,
    threshold: f64,
) -> Result<Option<UnlabeledTarget>> {
    let rec = &scene.record;
    let (w, h) = (rec.camera.width, rec.camera.height);
    let (grid, _) = model.backbone.forward(&scene.input);
    let pixel_target = |labels: PixelPseudoLabels, bundle: &RayBundle| {
        let per_row = labels.for_bundle(bundle);
        let (mut px, mut lb) = (Vec::new(), Vec::new());
        for (i, &c) in per_row.iter().enumerate() {
            if c != IGNORE {
                px.push(bundle.pixels[i]);
                lb.push(c);
            }
        }
        UnlabeledTarget::Pixels { pixels: px, labels: lb }
    };
    Ok(match mode {
        Mode::SupOnly => None,
        Mode::Full => {
            let bundle = render_bundle(&rec.camera, &grid, &model.nerf, pixels, sampling, false)?;
            let (_, labels) = confidence_sampler(&bundle, &rec.masks, threshold);
            Some(pixel_target(labels, &bundle))
        }
        Mode::NoSam => {
            let bundle = render_bundle(&rec.camera, &grid, &model.nerf, pixels, sampling, false)?;
            Some(pixel_target(nosam_pseudolabels(&bundle, w, h, threshold), &bundle))
        }
        Mode::Perspective => {
            let logits = model.vox.forward(&grid);
            let preds = point_predictions(&logits, &scene.vox, model.classes());
            Some(UnlabeledTarget::Points(perspective_baseline(
                &rec.scan,
                &rec.camera,
                &preds,
                &rec.masks,
                model.classes(),
            )))
        }
    })
}

/// Points per parallel work unit in the point-query term.
const POINT_CHUNK: usize = 256;

/// Voxel-head term over the points of a scene: per-point logits are those of
/// the point's slot. Returns the term and accumulates `scale ·` its gradient.
fn vox_point_term(
    model: &Model,
    grid: &CylGrid,
    vox: &Voxelization,
    labels: &[ClassId],
    weights: &LossWeights,
    scale: f64,
    grad: Option<(&mut Model, &mut [f64])>,
) -> f64 {
    let c = model.classes();
    let slot_logits = model.vox.forward(grid);
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| vox.point_slot[i] != NONE && labels[i] != IGNORE).collect();
    if rows.is_empty() {
        return 0.0;
    }
    let mut logits = Vec::with_capacity(rows.len() * c);
    let mut targets = Vec::with_capacity(rows.len());
    for &i in &rows {
        let s = vox.point_slot[i] as usize;
        logits.extend_from_slice(&slot_logits[s * c..(s + 1) * c]);
        targets.push(labels[i]);
    }
    let t = term_loss(&logits, &targets, c, weights.mu, weights.nu);
    if let Some((g, d_features)) = grad {
        if scale != 0.0 {
            let mut d_slot = vec![0.0; slot_logits.len()];
            for (r, &i) in rows.iter().enumerate() {
                let s = vox.point_slot[i] as usize;
                for k in 0..c {
                    d_slot[s * c + k] += scale * t.grad[r * c + k];
                }
            }
            model.vox.backward(grid, &d_slot, &mut g.vox, d_features);
        }
    }
    t.value
}

/// NeRF-head logits queried at labeled point coordinates.
fn nerf_point_term(
    model: &Model,
    grid: &CylGrid,
    record: &SceneRecord,
    weights: &LossWeights,
    scale: f64,
    grad: Option<(&mut Model, &mut [f64])>,
) -> f64 {
    let c = model.classes();
    let scan = &record.scan;
    let rows: Vec<usize> = (0..scan.len()).filter(|&i| scan.labels[i] != IGNORE).collect();
    if rows.is_empty() {
        return 0.0;
    }
    let logits: Vec<f64> = rows
        .par_chunks(POINT_CHUNK)
        .flat_map_iter(|chunk| {
            chunk.iter().flat_map(|&i| model.nerf.forward(&grid.sample_trilinear(&scan.points[i])).logits).collect::<Vec<_>>()
        })
        .collect();
    let targets: Vec<ClassId> = rows.iter().map(|&i| scan.labels[i]).collect();
    let t = term_loss(&logits, &targets, c, weights.mu, weights.nu);
    if let Some((g, d_features)) = grad {
        if scale != 0.0 {
            let partials: Vec<(NerfHead, Vec<f64>)> = rows
                .par_chunks(POINT_CHUNK)
                .enumerate()
                .map(|(ci, chunk)| {
                    let mut hg = model.nerf.zeros_like();
                    let mut fg = vec![0.0; d_features.len()];
                    let mut df = vec![0.0; grid.dim];
                    for (j, &i) in chunk.iter().enumerate() {
                        let r = ci * POINT_CHUNK + j;
                        let dl: Vec<f64> = t.grad[r * c..(r + 1) * c].iter().map(|v| scale * v).collect();
                        let p = &scan.points[i];
                        let feat = grid.sample_trilinear(p);
                        let eval = model.nerf.forward(&feat);
                        df.iter_mut().for_each(|v| *v = 0.0);
                        model.nerf.backward(&feat, &eval, &dl, 0.0, &mut hg, Some(&mut df));
                        grid.sample_trilinear_backward(p, &df, &mut fg);
                    }
                    (hg, fg)
                })
                .collect();
            for (hg, fg) in partials {
                g.nerf.add_assign(&hg);
                for (a, b) in d_features.iter_mut().zip(fg) {
                    *a += b;
                }
            }
        }
    }
    t.value
}

/// Loss of one labeled scene plus an optional unlabeled scene with fixed
/// targets. With `grad`, accumulates the gradient of the weighted total.
pub fn loss_and_grad(
    model: &Model,
    labeled: &PreparedScene,
    unlabeled: Option<(&PreparedScene, &UnlabeledTarget)>,
    weights: &LossWeights,
    epoch: usize,
    sampling: RaySampling,
    mut grad: Option<&mut Model>,
) -> Result<LossBreakdown> {
    let beta = weights.beta;
    let gamma = weights.gamma(epoch);
    let lambda = weights.lambda;
    let mut out = LossBreakdown::default();

    let (grid, cache) = model.backbone.forward(&labeled.input);
    let mut d_features = vec![0.0; grid.features.len()];
    let rec = &labeled.record;
    out.vox = vox_point_term(
        model,
        &grid,
        &labeled.vox,
        &rec.scan.labels,
        weights,
        beta,
        grad.as_deref_mut().map(|g| (g, d_features.as_mut_slice())),
    );
    out.nerf3d =
        nerf_point_term(model, &grid, rec, weights, gamma, grad.as_deref_mut().map(|g| (g, d_features.as_mut_slice())));
    if let Some(g) = grad.as_deref_mut() {
        model.backbone.backward(&labeled.input, &cache, &d_features, &mut g.backbone);
    }

    if let Some((scene, target)) = unlabeled {
        out.pseudo_labeled = target.labeled_count();
        if out.pseudo_labeled > 0 {
            let (ugrid, ucache) = model.backbone.forward(&scene.input);
            let mut ud = vec![0.0; ugrid.features.len()];
            match target {
                UnlabeledTarget::Points(labels) => {
                    out.nerf2d = vox_point_term(
                        model,
                        &ugrid,
                        &scene.vox,
                        labels,
                        weights,
                        lambda,
                        grad.as_deref_mut().map(|g| (g, ud.as_mut_slice())),
                    );
                }
                UnlabeledTarget::Pixels { pixels, labels } => {
                    let cam = &scene.record.camera;
                    let c = model.classes();
                    let bundle = render_bundle(cam, &ugrid, &model.nerf, pixels, sampling, false)?;
                    let t = term_loss(&bundle.logits, labels, c, weights.mu, weights.nu);
                    out.nerf2d = t.value;
                    if let Some(g) = grad.as_deref_mut() {
                        if lambda != 0.0 {
                            let dl: Vec<f64> = t.grad.iter().map(|v| lambda * v).collect();
                            render_bundle_backward(cam, &ugrid, &model.nerf, pixels, sampling, &dl, &mut g.nerf, &mut ud)?;
                        }
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                model.backbone.backward(&scene.input, &ucache, &ud, &mut g.backbone);
            }
        }
    }
    out.total = weights.total(out.vox, out.nerf3d, out.nerf2d, epoch);
    Ok(out)
}

/// Training state: model and optimizer.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Sgd,
}

/// One optimizer update from one labeled and (mode permitting) one
/// unlabeled scene.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    labeled: &PreparedScene,
    unlabeled: Option<&PreparedScene>,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut weights = cfg.weights;
    let unlabeled = match (cfg.mode, unlabeled) {
        (Mode::SupOnly, _) => {
            weights.lambda = 0.0;
            None
        }
        (mode, Some(u)) => {
            let pixels = ray_subset(&u.pixels, cfg.max_rays, rng);
            let target =
                pseudo_targets(&state.model, mode, u, &pixels, cfg.sampling, weights.entropy_threshold)?
                    .expect("unlabeled modes produce targets");
            Some((u, target))
        }
        (mode, None) => return Err(Error::Invalid(format!("mode {mode} needs an unlabeled scene"))),
    };
    let mut grad = state.model.zeros_like();
    let loss = loss_and_grad(
        &state.model,
        labeled,
        unlabeled.as_ref().map(|(u, t)| (*u, t)),
        &weights,
        epoch,
        cfg.sampling,
        Some(&mut grad),
    )?;
    if !grad.all_finite() || !loss.total.is_finite() {
        return Err(Error::Invalid(format!("non-finite loss or gradient at epoch {epoch}")));
    }
    state.optimizer.step(&mut state.model, &grad);
    Ok(loss)
}

fn ray_subset(pixels: &[(u32, u32)], cap: usize, rng: &mut ChaCha8Rng) -> Vec<(u32, u32)> {
    if cap == 0 || pixels.len() <= cap {
        return pixels.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, pixels.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pixels[i]).collect()
}

/// Scene indices per role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// The trailing `heldout_fraction` is the test set; the labeled subset
    /// of the remaining pool is drawn with `seed`.
    pub fn new(count: usize, labeled_fraction: f64, heldout_fraction: f64, seed: u64) -> Result<Self> {
        let test_n = (count as f64 * heldout_fraction).round() as usize;
        let pool_n = count - test_n.min(count);
        if pool_n == 0 {
            return Err(Error::config("no training scenes left after the held-out split"));
        }
        let mut pool: Vec<usize> = (0..pool_n).collect();
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5911_7AB1_E000));
        let n_l = ((pool_n as f64 * labeled_fraction).round() as usize).clamp(1, pool_n);
        let mut labeled = pool[..n_l].to_vec();
        let mut unlabeled = pool[n_l..].to_vec();
        labeled.sort_unstable();
        unlabeled.sort_unstable();
        Ok(Split { labeled, unlabeled, test: (pool_n..count).collect() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub confusion: ConfusionMatrix,
    /// Mean rendered entropy in the boundary band and in the interior of the
    /// rendered held-out scenes.
    pub band_entropy: (f64, f64),
}

impl ExperimentReport {
    pub fn iou(&self) -> Vec<Option<f64>> {
        self.confusion.iou()
    }

    pub fn miou(&self) -> f64 {
        self.confusion.miou()
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# epoch losses (unweighted terms, weighted total)");
        let _ = writeln!(out, "{:>5} {:>12} {:>12} {:>12} {:>12} {:>10}", "epoch", "vox", "nerf3d", "nerf2d", "total", "pseudo");
        for e in &self.epochs {
            let m = &e.mean;
            let _ = writeln!(
                out,
                "{:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>10}",
                e.epoch, m.vox, m.nerf3d, m.nerf2d, m.total, m.pseudo_labeled
            );
        }
        let _ = writeln!(out, "# held-out evaluation");
        out.push_str(&format_table(std::slice::from_ref(self)));
        let _ = writeln!(out, "# miou {:?}", self.miou());
        let _ = writeln!(out, "# boundary entropy band={:.6} interior={:.6}", self.band_entropy.0, self.band_entropy.1);
        out
    }
}

/// Fixed-column table: mode, split, seed, per-class IoU, mIoU.
pub fn format_table(reports: &[ExperimentReport]) -> String {
    let classes = reports.first().map_or(0, |r| r.confusion.classes);
    let mut out = String::new();
    let _ = write!(out, "{:<12} {:>6} {:>6}", "mode", "split", "seed");
    for c in 0..classes {
        let _ = write!(out, " {:>7}", format!("iou{c}"));
    }
    let _ = writeln!(out, " {:>7}", "miou");
    for r in reports {
        let _ = write!(out, "{:<12} {:>6.3} {:>6}", r.mode.name(), r.labeled_fraction, r.seed);
        for v in r.iou() {
            match v {
                Some(x) => {
                    let _ = write!(out, " {:>7.4}", x);
                }
                None => {
                    let _ = write!(out, " {:>7}", "-");
                }
            }
        }
        let _ = writeln!(out, " {:>7.4}", r.miou());
    }
    out
}

/// Held-out point confusion using only backbone and voxel head.
pub fn evaluate(model: &InferenceModel, scenes: &[&PreparedScene]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(model.vox.classes());
    for s in scenes {
        let preds = model.predict(s);
        cm.add_all(&preds, &s.record.scan.labels).expect("one prediction per point");
    }
    cm
}

/// Trains on `split` and evaluates on its test scenes. With `out`, writes
/// `config.txt`, `report.txt`, checkpoints and image dumps.
pub fn run_split(
    scenes: &[PreparedScene],
    split: &Split,
    cfg: &TrainConfig,
    classes: usize,
    out: Option<&Path>,
) -> Result<(Model, ExperimentReport)> {
    cfg.validate()?;
    if cfg.mode.uses_unlabeled() && split.unlabeled.is_empty() {
        return Err(Error::config(format!("mode {} needs unlabeled scenes", cfg.mode)));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.txt");
        std::fs::write(&p, cfg.to_kv()).map_err(|e| Error::io(&p, e))?;
    }
    let mut state = TrainState { model: Model::init(cfg, classes)?, optimizer: Sgd::new(cfg.lr, cfg.momentum) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut lab_order: Vec<usize> = Vec::new();
    let mut unl_order: Vec<usize> = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..cfg.epochs() {
        let mut sum = LossBreakdown::default();
        for _ in 0..cfg.steps_per_epoch {
            if lab_order.is_empty() {
                lab_order = split.labeled.clone();
                lab_order.shuffle(&mut rng);
            }
            let l = lab_order.pop().expect("refilled");
            let u = if cfg.mode.uses_unlabeled() {
                if unl_order.is_empty() {
                    unl_order = split.unlabeled.clone();
                    unl_order.shuffle(&mut rng);
                }
                Some(&scenes[unl_order.pop().expect("refilled")])
            } else {
                None
            };
            let loss = train_step(&mut state, cfg, &scenes[l], u, epoch, &mut rng)?;
            sum.vox += loss.vox;
            sum.nerf3d += loss.nerf3d;
            sum.nerf2d += loss.nerf2d;
            sum.total += loss.total;
            sum.pseudo_labeled += loss.pseudo_labeled;
        }
        let n = cfg.steps_per_epoch as f64;
        let mean = LossBreakdown {
            vox: sum.vox / n,
            nerf3d: sum.nerf3d / n,
            nerf2d: sum.nerf2d / n,
            total: sum.total / n,
            pseudo_labeled: sum.pseudo_labeled / cfg.steps_per_epoch,
        };
        log::info!("{} seed {} epoch {epoch}: total {:.5} pseudo {}", cfg.mode, cfg.seed, mean.total, mean.pseudo_labeled);
        epochs.push(EpochStats { epoch, mean });
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("epoch_{:03}.srck", epoch + 1)), &state.model, true)?;
            }
        }
    }
    let model = state.model;
    let test: Vec<&PreparedScene> = split.test.iter().map(|&i| &scenes[i]).collect();
    let confusion = evaluate(&model.inference(), &test);
    let band = render_diagnostics(&model, &test, cfg, out)?;
    let report = ExperimentReport {
        mode: cfg.mode,
        labeled_fraction: cfg.labeled_fraction,
        seed: cfg.seed,
        epochs,
        confusion,
        band_entropy: band,
    };
    if let Some(dir) = out {
        checkpoint::save(&dir.join("model.srck"), &model, true)?;
        let p = dir.join("report.txt");
        std::fs::write(&p, report.format()).map_err(|e| Error::io(&p, e))?;
    }
    Ok((model, report))
}

/// Renders the first `render_eval_scenes` test scenes in full: pooled
/// boundary/interior entropy, and image dumps when `out` is given.
fn render_diagnostics(model: &Model, test: &[&PreparedScene], cfg: &TrainConfig, out: Option<&Path>) -> Result<(f64, f64)> {
    let (mut band, mut interior) = (Vec::new(), Vec::new());
    for (k, s) in test.iter().take(cfg.render_eval_scenes).enumerate() {
        let rec = &s.record;
        let (grid, _) = model.backbone.forward(&s.input);
        let bundle = render_bundle(&rec.camera, &grid, &model.nerf, &all_pixels(&rec.camera), cfg.sampling, false)?;
        let (b, i) = band_entropy(&bundle, &rec.label_image, 2);
        band.push(b);
        interior.push(i);
        if let Some(dir) = out {
            let (_, pseudo) = confidence_sampler(&bundle, &rec.masks, cfg.weights.entropy_threshold);
            let dumps = dir.join("dumps");
            std::fs::create_dir_all(&dumps).map_err(|e| Error::io(&dumps, e))?;
            dump_images(&bundle, Some(&pseudo), &rec.label_image, &dumps, &format!("test{k:02}_"))?;
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok((mean(&band), mean(&interior)))
}

/// Full experiment on a dataset.
pub fn run_experiment(dataset: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    let split = Split::new(dataset.len(), cfg.labeled_fraction, cfg.heldout_fraction, cfg.seed)?;
    let scenes = prepare_all(dataset, cfg);
    Ok(run_split(&scenes, &split, cfg, dataset.classes(), out)?.1)
}

/// Validation mIoU per candidate learning rate. The validation scenes are
/// the tail of the training pool, so the test set is never touched.
pub fn select_lr(dataset: &Dataset, cfg: &TrainConfig, candidates: &[f64]) -> Result<Vec<(f64, f64)>> {
    let split = Split::new(dataset.len(), cfg.labeled_fraction, cfg.heldout_fraction, cfg.seed)?;
    let mut unlabeled = split.unlabeled.clone();
    let n_val = (unlabeled.len() / 5).max(1);
    if unlabeled.len() <= n_val {
        return Err(Error::config("too few unlabeled scenes for a validation split"));
    }
    let val = unlabeled.split_off(unlabeled.len() - n_val);
    let vsplit = Split { labeled: split.labeled, unlabeled, test: val };
    let scenes = prepare_all(dataset, cfg);
    candidates
        .iter()
        .map(|&lr| {
            let c = TrainConfig { lr, render_eval_scenes: 0, ..cfg.clone() };
            Ok((lr, run_split(&scenes, &vsplit, &c, dataset.classes(), None)?.1.miou()))
        })
        .collect()
}

/// Random gradient-check coordinates: `n` indices into `Params::flat`.
pub fn sample_indices(count: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..count)).collect()
}
