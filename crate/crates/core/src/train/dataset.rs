//! Generated scene collections and their on-disk layout.
//!
//! ```text
//! <dir>/manifest.txt            scene config + count, seed, mask_perturbation
//! <dir>/scene_0000/scan.sray
//! <dir>/scene_0000/calib.txt
//! <dir>/scene_0000/class.pgm
//! <dir>/scene_0000/instance.pgm
//! <dir>/scene_0000/masks.pgm
//! <dir>/scene_0000/masks.rle
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{KeyValues, KvWriter};
use crate::geom::CameraModel;
use crate::pseudo::{oracle_masks, SegmentMaskSet};
use crate::scene::{self, io, LabelImage, Scan, SceneConfig};
use crate::{Error, Result};

/// What training sees of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scan: Scan,
    pub camera: CameraModel,
    pub label_image: LabelImage,
    pub masks: SegmentMaskSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scene_config: SceneConfig,
    pub seed: u64,
    pub mask_perturbation: u32,
    pub records: Vec<SceneRecord>,
}

fn scene_dir(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("scene_{i:04}"))
}

impl Dataset {
    pub fn generate(config: &SceneConfig, seed: u64, count: usize, mask_perturbation: u32) -> Result<Self> {
        config.validate()?;
        let seeds = scene::scene_seeds(seed, count);
        let records = seeds
            .par_iter()
            .map(|&s| {
                let sample = scene::synthesize(config, s)?;
                let masks = oracle_masks(&sample.label_image, s, mask_perturbation);
                Ok(SceneRecord { scan: sample.scan, camera: sample.scene.camera, label_image: sample.label_image, masks })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { scene_config: config.clone(), seed, mask_perturbation, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.scene_config.classes
    }

    pub fn manifest(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("generated scene collection")
            .put("count", self.records.len())
            .put("seed", self.seed)
            .put("mask_perturbation", self.mask_perturbation);
        self.scene_config.write_kv(&mut w);
        w.finish()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest.txt");
        std::fs::write(&manifest, self.manifest()).map_err(|e| Error::io(&manifest, e))?;
        self.records.par_iter().enumerate().try_for_each(|(i, r)| {
            let d = scene_dir(dir, i);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            io::write_scan(&d.join("scan.sray"), &r.scan)?;
            r.camera.save(&d.join("calib.txt"))?;
            io::write_label_image(&d.join("class.pgm"), &d.join("instance.pgm"), &r.label_image)?;
            r.masks.save(&d.join("masks.pgm"), Some(&d.join("masks.rle")))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut kv = KeyValues::load(&dir.join("manifest.txt"))?;
        let count: usize = kv.take("count")?.ok_or_else(|| Error::config("manifest missing `count`"))?;
        let seed: u64 = kv.take("seed")?.ok_or_else(|| Error::config("manifest missing `seed`"))?;
        let mask_perturbation = kv.take_or("mask_perturbation", 0)?;
        let scene_config = SceneConfig::from_kv(&mut kv)?;
        kv.finish()?;
        let records = (0..count)
            .into_par_iter()
            .map(|i| {
                let d = scene_dir(dir, i);
                let scan = io::read_scan(&d.join("scan.sray"))?;
                let camera = CameraModel::load(&d.join("calib.txt"))?;
                let label_image = io::read_label_image(&d.join("class.pgm"), &d.join("instance.pgm"))?;
                let rle = d.join("masks.rle");
                let masks = SegmentMaskSet::load(&d.join("masks.pgm"), rle.exists().then_some(rle.as_path()))?;
                if scan.classes != scene_config.classes {
                    return Err(Error::format(d.join("scan.sray"), "class count differs from manifest"));
                }
                if (label_image.width, label_image.height) != (camera.width, camera.height)
                    || (masks.width, masks.height) != (camera.width, camera.height)
                {
                    return Err(Error::format(&d, "image sizes disagree with calibration"));
                }
                Ok(SceneRecord { scan, camera, label_image, masks })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { scene_config, seed, mask_perturbation, records })
    }
}
