//! Weight checkpoints.
//!
//! Layout (little-endian): `SRCK`, version u32, classes u32, hidden u32,
//! features u32, κ f64, then tagged sections `tag[4] len:u64 payload` with
//! payload = f64 values in `Params` order. `BKBN` and `VOXH` are required;
//! `NERF` is optional and ignored by inference loading.

use std::path::Path;

use super::{InferenceModel, Model};
use crate::backbone::MiniVoxNet;
use crate::heads::{NerfHead, VoxHead};
use crate::nn::Params;
use crate::scene::io::Reader;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SRCK";
const VERSION: u32 = 1;

fn section(out: &mut Vec<u8>, tag: &[u8; 4], p: &impl Params) {
    let values = p.flat();
    out.extend_from_slice(tag);
    out.extend_from_slice(&((values.len() * 8) as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn header(out: &mut Vec<u8>, backbone: &MiniVoxNet, classes: usize) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(classes as u32).to_le_bytes());
    out.extend_from_slice(&(backbone.hidden_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(backbone.feature_dim() as u32).to_le_bytes());
    out.extend_from_slice(&backbone.kappa.to_le_bytes());
}

pub fn encode(model: &Model, include_nerf: bool) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, &model.backbone, model.vox.classes());
    section(&mut out, b"BKBN", &model.backbone);
    section(&mut out, b"VOXH", &model.vox);
    if include_nerf {
        section(&mut out, b"NERF", &model.nerf);
    }
    out
}

pub fn save(path: &Path, model: &Model, include_nerf: bool) -> Result<()> {
    std::fs::write(path, encode(model, include_nerf)).map_err(|e| Error::io(path, e))
}

struct Decoded {
    backbone: MiniVoxNet,
    vox: VoxHead,
    nerf: Option<NerfHead>,
}

fn fill(p: &mut impl Params, payload: &[u8]) -> bool {
    if payload.len() != p.param_count() * 8 {
        return false;
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for slice in p.params_mut() {
        for v in slice.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    true
}

fn decode_inner(bytes: &[u8]) -> Option<Decoded> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC || r.u32()? != VERSION {
        return None;
    }
    let classes = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let features = r.u32()? as usize;
    let kappa = r.f64()?;
    let mut backbone = MiniVoxNet::zeros(hidden, features, kappa);
    let mut vox = VoxHead::zeros(features, classes);
    let mut nerf = None;
    let (mut seen_b, mut seen_v) = (false, false);
    while !r.is_empty() {
        let tag = r.take(4)?;
        let len = u64::from_le_bytes(r.take(8)?.try_into().ok()?) as usize;
        let payload = r.take(len)?;
        let ok = match tag {
            b"BKBN" => {
                seen_b = true;
                fill(&mut backbone, payload)
            }
            b"VOXH" => {
                seen_v = true;
                fill(&mut vox, payload)
            }
            b"NERF" => {
                let mut h = NerfHead::zeros(features, classes);
                let ok = fill(&mut h, payload);
                nerf = Some(h);
                ok
            }
            _ => true,
        };
        if !ok {
            return None;
        }
    }
    (seen_b && seen_v && backbone.validate().is_ok()).then_some(Decoded { backbone, vox, nerf })
}

/// Full model; fails if the NeRF section is absent.
pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let d = decode_inner(&bytes).ok_or_else(|| Error::format(path, "malformed checkpoint"))?;
    let nerf = d.nerf.ok_or_else(|| Error::format(path, "checkpoint has no NeRF head"))?;
    Ok(Model { backbone: d.backbone, vox: d.vox, nerf })
}

/// Backbone and voxel head only.
pub fn decode_inference(bytes: &[u8]) -> Option<InferenceModel> {
    decode_inner(bytes).map(|d| InferenceModel { backbone: d.backbone, vox: d.vox })
}

pub fn load_inference(path: &Path) -> Result<InferenceModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_inference(&bytes).ok_or_else(|| Error::format(path, "malformed checkpoint"))
}
