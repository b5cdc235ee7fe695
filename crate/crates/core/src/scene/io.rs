//! Scan and label-image files.
//!
//! Scan: little-endian `SRAY`, u32 version, u32 N, u32 C, then N records of
//! (f32 x, y, z, f32 intensity, u16 label). Label images: 8-bit PGM class
//! map (IGNORE stored as 255) and 16-bit PGM instance map.

use std::path::Path;

use crate::geom::Vec3;
use crate::imageio::{self, GrayImage};
use crate::scene::{LabelImage, Scan};
use crate::{ClassId, Error, Result, IGNORE};

const SCAN_VERSION: u32 = 1;
const PGM_IGNORE: u8 = 255;

/// Bounds-checked little-endian cursor over a byte slice.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }

    pub fn u16(&mut self) -> Option<u16> {
        self.array().map(u16::from_le_bytes)
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn f32(&mut self) -> Option<f32> {
        self.array().map(f32::from_le_bytes)
    }

    pub fn f64(&mut self) -> Option<f64> {
        self.array().map(f64::from_le_bytes)
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn encode_scan(scan: &Scan) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + scan.len() * 18);
    out.extend_from_slice(b"SRAY");
    out.extend_from_slice(&SCAN_VERSION.to_le_bytes());
    out.extend_from_slice(&(scan.len() as u32).to_le_bytes());
    out.extend_from_slice(&(scan.classes as u32).to_le_bytes());
    for ((p, &i), &l) in scan.points.iter().zip(&scan.intensity).zip(&scan.labels) {
        for v in [p.x, p.y, p.z, i] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_scan(bytes: &[u8], path: &Path) -> Result<Scan> {
    let bad = |reason: &str| Error::format(path, reason);
    let mut r = Reader::new(bytes);
    if r.take(4) != Some(b"SRAY") {
        return Err(bad("missing SRAY magic"));
    }
    if r.u32() != Some(SCAN_VERSION) {
        return Err(bad("unsupported scan version"));
    }
    let n = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let classes = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    if bytes.len() != 16 + n * 18 {
        return Err(bad("record count does not match file size"));
    }
    let mut scan = Scan {
        points: Vec::with_capacity(n),
        intensity: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        classes,
    };
    for _ in 0..n {
        let (x, y, z, i) = (r.f32().unwrap(), r.f32().unwrap(), r.f32().unwrap(), r.f32().unwrap());
        scan.points.push(Vec3::new(x as f64, y as f64, z as f64));
        scan.intensity.push(i as f64);
        scan.labels.push(r.u16().unwrap());
    }
    scan.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(scan)
}

pub fn write_scan(path: &Path, scan: &Scan) -> Result<()> {
    imageio::write_bytes(path, &encode_scan(scan))
}

pub fn read_scan(path: &Path) -> Result<Scan> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&bytes, path)
}

/// Class map as an 8-bit image; IGNORE becomes 255.
pub fn class_pgm(img: &LabelImage) -> GrayImage<u8> {
    let data = img.class.iter().map(|&c| if c == IGNORE { PGM_IGNORE } else { c as u8 }).collect();
    GrayImage { width: img.width, height: img.height, data }
}

pub fn write_label_image(class_path: &Path, instance_path: &Path, img: &LabelImage) -> Result<()> {
    imageio::write_bytes(class_path, &imageio::encode_pgm8(&class_pgm(img)))?;
    let inst = GrayImage { width: img.width, height: img.height, data: img.instance.clone() };
    imageio::write_bytes(instance_path, &imageio::encode_pgm16(&inst))
}

pub fn read_label_image(class_path: &Path, instance_path: &Path) -> Result<LabelImage> {
    let class = imageio::read_pgm8(class_path)?;
    let inst = imageio::read_pgm16(instance_path)?;
    if (class.width, class.height) != (inst.width, inst.height) {
        return Err(Error::format(instance_path, "instance map size differs from class map"));
    }
    let class_ids: Vec<ClassId> =
        class.data.iter().map(|&c| if c == PGM_IGNORE { IGNORE } else { c as ClassId }).collect();
    Ok(LabelImage { width: class.width, height: class.height, class: class_ids, instance: inst.data })
}
