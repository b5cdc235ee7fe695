//! Ray-rendered semantic self-supervision for semi-supervised LiDAR
//! semantic segmentation.
//!
//! A LiDAR scan is voxelized into a cylindrical grid, a small backbone turns
//! per-cell point statistics into voxel features, and two heads consume them:
//! a per-voxel classifier used at inference time, and a radiance-field style
//! head that is queried along camera rays during training. Rendered pixel
//! semantics are fused with generic image segments into entropy-filtered
//! pseudo-labels that supervise unlabeled scans.
//!
//! Module map:
//!
//! | module     | contents                                                   |
//! |------------|------------------------------------------------------------|
//! | `scene`    | synthetic scenes, LiDAR simulation, label images, file IO  |
//! | `geom`     | camera model, projection, pixel rays, coverage sampler     |
//! | `grid`     | cylindrical voxel grid and trilinear feature sampling      |
//! | `backbone` | per-voxel feature network                                  |
//! | `heads`    | voxel classifier and ray-query head                        |
//! | `render`   | opacity/transmittance compositing of semantic logits       |
//! | `loss`     | cross-entropy, Lovász-softmax, entropy, loss composition   |
//! | `pseudo`   | segment masks, confidence sampler, ablation labelers       |
//! | `train`    | training loop, experiments, checkpoints                    |
//! | `eval`     | mIoU, image dumps, parallax diagnostic                     |

pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod geom;
pub mod grid;
pub mod heads;
pub mod imageio;
pub mod loss;
pub mod nn;
pub mod pseudo;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

/// Class identifier. Valid classes are `0..C`; [`IGNORE`] marks missing labels.
pub type ClassId = u16;

/// Sentinel for "no label": the maximum representable class value.
pub const IGNORE: ClassId = ClassId::MAX;

pub use backbone::MiniVoxNet;
pub use geom::{CameraModel, Ray, RaySampling};
pub use grid::{CylGrid, GridSpec, Voxelization};
pub use heads::{NerfHead, VoxHead};
pub use loss::LossWeights;
pub use pseudo::{PixelPseudoLabels, SegmentMaskSet};
pub use render::RayBundle;
pub use scene::{LabelImage, Scan, Scene, SceneConfig};
pub use train::{Mode, TrainConfig};
