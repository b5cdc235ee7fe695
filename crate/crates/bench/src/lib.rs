//! Shared fixtures for the benchmarks.

use raysem_core::backbone::BackboneInput;
use raysem_core::grid::voxelize;
use raysem_core::scene::{synthesize, SceneSample};
use raysem_core::{SceneConfig, Voxelization};

/// The toy-benchmark scene geometry.
pub fn toy_config() -> SceneConfig {
    SceneConfig::default()
}

pub struct Fixture {
    pub sample: SceneSample,
    pub vox: Voxelization,
    pub input: BackboneInput,
}

pub fn fixture(seed: u64) -> Fixture {
    let cfg = toy_config();
    let sample = synthesize(&cfg, seed).expect("valid config");
    let vox = voxelize(&sample.scan.points, &cfg.grid);
    let input = BackboneInput::new(&vox, &sample.scan.points, &sample.scan.intensity);
    Fixture { sample, vox, input }
}
