//! Cylindrical voxel grid: point binning, sparse per-cell features and
//! trilinear sampling in continuous cell-index space.
//!
//! Index space: cell `i` along an axis covers `[min + i*d, min + (i+1)*d)`
//! and its center sits at continuous coordinate `i`. The azimuth axis wraps
//! between `A-1` and `0`; the radial and height axes do not, and corners
//! outside `[0, R)` / `[0, H)` read as empty space.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::geom::Vec3;
use crate::{Error, Result};

/// Marker for "no cell" / "no slot".
pub const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// (radial, angular, height) cell counts.
    pub res: [usize; 3],
    pub r_min: f64,
    pub r_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { res: [240, 180, 20], r_min: 0.0, r_max: 50.0, z_min: -4.0, z_max: 2.0 }
    }
}

/// Eight corners of a trilinear stencil. `cells` holds linear cell indices
/// (or [`NONE`] for corners outside the radial/height range).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub cells: [u32; 8],
    pub weights: [f64; 8],
}

impl GridSpec {
    pub fn new(res: [usize; 3], r: (f64, f64), z: (f64, f64)) -> Result<Self> {
        let spec = GridSpec { res, r_min: r.0, r_max: r.1, z_min: z.0, z_max: z.1 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.res.iter().any(|&n| n < 2) {
            return Err(Error::Invalid(format!("grid resolution must be >= 2 per axis, got {:?}", self.res)));
        }
        if self.cell_count() >= NONE as usize {
            return Err(Error::Invalid("grid has too many cells".into()));
        }
        if !(self.r_min >= 0.0 && self.r_min < self.r_max && self.z_min < self.z_max) {
            return Err(Error::Invalid("grid bounds must satisfy 0 <= r_min < r_max, z_min < z_max".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.res[0] * self.res[1] * self.res[2]
    }

    pub fn cell_size(&self) -> [f64; 3] {
        [
            (self.r_max - self.r_min) / self.res[0] as f64,
            TAU / self.res[1] as f64,
            (self.z_max - self.z_min) / self.res[2] as f64,
        ]
    }

    pub fn linear(&self, [ir, ia, iz]: [usize; 3]) -> u32 {
        ((ir * self.res[1] + ia) * self.res[2] + iz) as u32
    }

    pub fn unlinear(&self, cell: u32) -> [usize; 3] {
        let c = cell as usize;
        let iz = c % self.res[2];
        let ia = (c / self.res[2]) % self.res[1];
        let ir = c / (self.res[2] * self.res[1]);
        [ir, ia, iz]
    }

    /// (radius, azimuth in [0, 2π), height).
    pub fn to_cylindrical(p: &Vec3) -> (f64, f64, f64) {
        let r = p.x.hypot(p.y);
        let mut theta = p.y.atan2(p.x);
        if theta < 0.0 {
            theta += TAU;
        }
        if theta >= TAU {
            theta -= TAU;
        }
        (r, theta, p.z)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let (r, _, z) = Self::to_cylindrical(p);
        r >= self.r_min && r < self.r_max && z >= self.z_min && z < self.z_max
    }

    /// Cell containing `p`; bins are lower-inclusive.
    pub fn cell_of(&self, p: &Vec3) -> Option<u32> {
        let (r, theta, z) = Self::to_cylindrical(p);
        if !(r >= self.r_min && r < self.r_max && z >= self.z_min && z < self.z_max) {
            return None;
        }
        let [dr, da, dz] = self.cell_size();
        let ir = (((r - self.r_min) / dr) as usize).min(self.res[0] - 1);
        let ia = ((theta / da) as usize) % self.res[1];
        let iz = (((z - self.z_min) / dz) as usize).min(self.res[2] - 1);
        Some(self.linear([ir, ia, iz]))
    }

    pub fn cell_center(&self, cell: u32) -> Vec3 {
        let [ir, ia, iz] = self.unlinear(cell);
        let [dr, da, dz] = self.cell_size();
        let r = self.r_min + (ir as f64 + 0.5) * dr;
        let theta = (ia as f64 + 0.5) * da;
        let z = self.z_min + (iz as f64 + 0.5) * dz;
        Vec3::new(r * theta.cos(), r * theta.sin(), z)
    }

    /// Continuous index coordinates; cell centers land on integers.
    pub fn continuous_index(&self, p: &Vec3) -> [f64; 3] {
        let (r, theta, z) = Self::to_cylindrical(p);
        let [dr, da, dz] = self.cell_size();
        [(r - self.r_min) / dr - 0.5, theta / da - 0.5, (z - self.z_min) / dz - 0.5]
    }

    /// Trilinear stencil for `p`, or `None` outside the grid bounds.
    pub fn stencil(&self, p: &Vec3) -> Option<Stencil> {
        if !self.contains(p) {
            return None;
        }
        let q = self.continuous_index(p);
        let mut base = [0i64; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let f = q[a].floor();
            base[a] = f as i64;
            frac[a] = q[a] - f;
        }
        let (nr, na, nz) = (self.res[0] as i64, self.res[1] as i64, self.res[2] as i64);
        let mut cells = [NONE; 8];
        let mut weights = [0.0; 8];
        for corner in 0..8 {
            let bits = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            weights[corner] = w;
            let ir = base[0] + bits[0] as i64;
            let ia = (base[1] + bits[1] as i64).rem_euclid(na);
            let iz = base[2] + bits[2] as i64;
            if (0..nr).contains(&ir) && (0..nz).contains(&iz) {
                cells[corner] = self.linear([ir as usize, ia as usize, iz as usize]);
            }
        }
        Some(Stencil { cells, weights })
    }

    /// Face neighbors in index space (azimuth wraps).
    pub fn neighbors6(&self, cell: u32) -> impl Iterator<Item = u32> + '_ {
        let [ir, ia, iz] = self.unlinear(cell);
        let (nr, na, nz) = (self.res[0] as i64, self.res[1] as i64, self.res[2] as i64);
        let offsets: [(i64, i64, i64); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
        offsets.into_iter().filter_map(move |(dr, da, dz)| {
            let r = ir as i64 + dr;
            let a = (ia as i64 + da).rem_euclid(na);
            let z = iz as i64 + dz;
            ((0..nr).contains(&r) && (0..nz).contains(&z)).then(|| self.linear([r as usize, a as usize, z as usize]))
        })
    }
}

/// Set of occupied cells with a dense cell-to-slot lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    spec: GridSpec,
    cells: Vec<u32>,
    slot_of: Vec<u32>,
}

impl Occupancy {
    /// Cells are deduplicated and sorted; slot order follows cell order.
    pub fn from_cells(spec: GridSpec, mut cells: Vec<u32>) -> Self {
        cells.sort_unstable();
        cells.dedup();
        let mut slot_of = vec![NONE; spec.cell_count()];
        for (slot, &cell) in cells.iter().enumerate() {
            slot_of[cell as usize] = slot as u32;
        }
        Occupancy { spec, cells, slot_of }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn slot(&self, cell: u32) -> Option<usize> {
        match self.slot_of.get(cell as usize) {
            Some(&s) if s != NONE => Some(s as usize),
            _ => None,
        }
    }

    /// Stencil with cell indices replaced by slots (or [`NONE`] when empty).
    pub fn slot_stencil(&self, p: &Vec3) -> Option<Stencil> {
        let mut st = self.spec.stencil(p)?;
        for c in st.cells.iter_mut() {
            if *c != NONE {
                *c = self.slot_of[*c as usize];
            }
        }
        Some(st)
    }
}

/// Points binned into an occupancy grid.
#[derive(Debug, Clone)]
pub struct Voxelization {
    pub occupancy: Arc<Occupancy>,
    /// Slot of each input point, [`NONE`] if dropped.
    pub point_slot: Vec<u32>,
    /// Input point indices per slot.
    pub slot_points: Vec<Vec<u32>>,
    pub dropped: usize,
}

pub fn voxelize(points: &[Vec3], spec: &GridSpec) -> Voxelization {
    let point_cell: Vec<Option<u32>> = points.iter().map(|p| spec.cell_of(p)).collect();
    let occupancy = Occupancy::from_cells(*spec, point_cell.iter().flatten().copied().collect());
    let mut slot_points = vec![Vec::new(); occupancy.len()];
    let mut point_slot = Vec::with_capacity(points.len());
    let mut dropped = 0;
    for (i, cell) in point_cell.iter().enumerate() {
        match cell.and_then(|c| occupancy.slot(c)) {
            Some(s) => {
                slot_points[s].push(i as u32);
                point_slot.push(s as u32);
            }
            None => {
                dropped += 1;
                point_slot.push(NONE);
            }
        }
    }
    Voxelization { occupancy: Arc::new(occupancy), point_slot, slot_points, dropped }
}

/// Sparse feature field: one `dim`-vector per occupied cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CylGrid {
    pub occupancy: Arc<Occupancy>,
    pub dim: usize,
    /// Slot-major features, `occupancy.len() * dim` values.
    pub features: Vec<f64>,
}

impl CylGrid {
    pub fn zeros(occupancy: Arc<Occupancy>, dim: usize) -> Self {
        assert!(dim >= 1, "feature dimension must be >= 1");
        let n = occupancy.len() * dim;
        CylGrid { occupancy, dim, features: vec![0.0; n] }
    }

    pub fn spec(&self) -> &GridSpec {
        self.occupancy.spec()
    }

    pub fn feature(&self, slot: usize) -> &[f64] {
        &self.features[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn feature_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.features[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Interpolate a stencil (with slot indices) into `out`. Returns false if
    /// every contributing corner is empty, leaving `out` zeroed.
    pub fn gather(&self, st: &Stencil, out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut any = false;
        for (&slot, &w) in st.cells.iter().zip(&st.weights) {
            if slot == NONE || w == 0.0 {
                continue;
            }
            any = true;
            let f = self.feature(slot as usize);
            for (o, x) in out.iter_mut().zip(f) {
                *o += w * x;
            }
        }
        any
    }

    /// Trilinearly interpolated feature at `p`; the zero vector outside the
    /// grid bounds or where every corner is unoccupied.
    pub fn sample_trilinear(&self, p: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        if let Some(st) = self.occupancy.slot_stencil(p) {
            self.gather(&st, &mut out);
        }
        out
    }

    /// Accumulate `weight * upstream` into each occupied corner of `p`.
    pub fn sample_trilinear_backward(&self, p: &Vec3, upstream: &[f64], grad: &mut [f64]) {
        if let Some(st) = self.occupancy.slot_stencil(p) {
            scatter(&st, upstream, self.dim, grad);
        }
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        self.encode_checkpoint(&mut out).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Header `SRGD`, u32 version, u32 R/A/H, f64 bounds, u32 dim, u32 count,
    /// then (u32 cell, dim × f32) in ascending cell order. Little-endian.
    pub fn encode_checkpoint(&self, out: &mut impl Write) -> std::io::Result<()> {
        let spec = self.spec();
        out.write_all(b"SRGD")?;
        out.write_all(&1u32.to_le_bytes())?;
        for n in spec.res {
            out.write_all(&(n as u32).to_le_bytes())?;
        }
        for b in [spec.r_min, spec.r_max, spec.z_min, spec.z_max] {
            out.write_all(&b.to_le_bytes())?;
        }
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.occupancy.len() as u32).to_le_bytes())?;
        for (slot, &cell) in self.occupancy.cells().iter().enumerate() {
            out.write_all(&cell.to_le_bytes())?;
            for v in self.feature(slot) {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_checkpoint(&bytes).ok_or_else(|| Error::format(path, "bad grid checkpoint"))
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Option<Self> {
        let mut r = crate::scene::io::Reader::new(bytes);
        if r.take(4)? != b"SRGD" || r.u32()? != 1 {
            return None;
        }
        let res = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let (r_min, r_max, z_min, z_max) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let spec = GridSpec::new(res, (r_min, r_max), (z_min, z_max)).ok()?;
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut cells = Vec::with_capacity(count);
        let mut features = Vec::with_capacity(count * dim);
        for _ in 0..count {
            let cell = r.u32()?;
            if cell as usize >= spec.cell_count() || cells.last().is_some_and(|&c| c >= cell) {
                return None;
            }
            cells.push(cell);
            for _ in 0..dim {
                features.push(r.f32()? as f64);
            }
        }
        if !r.is_empty() || dim == 0 {
            return None;
        }
        Some(CylGrid { occupancy: Arc::new(Occupancy::from_cells(spec, cells)), dim, features })
    }
}

/// Scatter `weight * upstream` into slot-major gradient storage.
pub fn scatter(st: &Stencil, upstream: &[f64], dim: usize, grad: &mut [f64]) {
    for (&slot, &w) in st.cells.iter().zip(&st.weights) {
        if slot == NONE || w == 0.0 {
            continue;
        }
        let g = &mut grad[slot as usize * dim..(slot as usize + 1) * dim];
        for (gi, ui) in g.iter_mut().zip(upstream) {
            *gi += w * ui;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::new([4, 8, 3], (1.0, 9.0), (-1.5, 1.5)).unwrap()
    }

    fn full_grid(spec: GridSpec, dim: usize) -> CylGrid {
        let occ = Occupancy::from_cells(spec, (0..spec.cell_count() as u32).collect());
        let mut g = CylGrid::zeros(Arc::new(occ), dim);
        for (i, v) in g.features.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64) * 0.25 - 1.0;
        }
        g
    }

    #[test]
    fn lower_boundary_maps_to_first_cell() {
        let s = spec();
        assert_eq!(s.cell_of(&Vec3::new(1.0, 0.0, -1.5)), Some(0));
        assert_eq!(s.cell_of(&Vec3::new(9.5, 0.0, 0.0)), None);
        assert_eq!(s.cell_of(&Vec3::new(5.0, 0.0, 1.5)), None);
        assert_eq!(s.cell_of(&Vec3::new(0.5, 0.0, 0.0)), None);
    }

    #[test]
    fn linear_index_round_trip() {
        let s = spec();
        for cell in 0..s.cell_count() as u32 {
            assert_eq!(s.linear(s.unlinear(cell)), cell);
            assert_eq!(s.cell_of(&s.cell_center(cell)), Some(cell));
        }
    }

    #[test]
    fn voxelize_counts_dropped() {
        let s = spec();
        let pts = vec![Vec3::new(2.0, 0.1, 0.0), Vec3::new(2.01, 0.1, 0.0), Vec3::new(20.0, 0.0, 0.0)];
        let vox = voxelize(&pts, &s);
        assert_eq!(vox.dropped, 1);
        assert_eq!(vox.occupancy.len(), 1);
        assert_eq!(vox.slot_points[0], vec![0, 1]);
        assert_eq!(vox.point_slot[2], NONE);
    }

    #[test]
    fn cell_center_reproduces_feature() {
        let g = full_grid(spec(), 3);
        for cell in [0u32, 17, 50, 95] {
            let p = g.spec().cell_center(cell);
            let slot = g.occupancy.slot(cell).unwrap();
            let f = g.sample_trilinear(&p);
            for (a, b) in f.iter().zip(g.feature(slot)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn radial_midpoint_is_average() {
        let s = spec();
        let occ = Occupancy::from_cells(s, (0..s.cell_count() as u32).collect());
        let mut g = CylGrid::zeros(Arc::new(occ), 1);
        for cell in 0..s.cell_count() as u32 {
            let [ir, _, _] = s.unlinear(cell);
            g.features[cell as usize] = if ir == 1 { 1.0 } else { 3.0 };
        }
        let [dr, da, dz] = s.cell_size();
        let r = s.r_min + 2.0 * dr; // between centers of ir=1 and ir=2
        let theta = 2.5 * da;
        let z = s.z_min + 1.5 * dz;
        let p = Vec3::new(r * theta.cos(), r * theta.sin(), z);
        assert!((g.sample_trilinear(&p)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_samples_zero() {
        let g = full_grid(spec(), 2);
        assert_eq!(g.sample_trilinear(&Vec3::new(50.0, 0.0, 0.0)), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_at_center_hits_one_cell() {
        let g = full_grid(spec(), 2);
        let cell = 40;
        let p = g.spec().cell_center(cell);
        let mut grad = vec![0.0; g.features.len()];
        g.sample_trilinear_backward(&p, &[1.0, -2.0], &mut grad);
        let slot = g.occupancy.slot(cell).unwrap();
        for (i, v) in grad.iter().enumerate() {
            let expect = if i / 2 == slot { [1.0, -2.0][i % 2] } else { 0.0 };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_is_canonical() {
        let g = full_grid(spec(), 2);
        let mut a = Vec::new();
        g.encode_checkpoint(&mut a).unwrap();
        let back = CylGrid::decode_checkpoint(&a).unwrap();
        let mut b = Vec::new();
        back.encode_checkpoint(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(CylGrid::decode_checkpoint(&a[..a.len() - 1]).is_none());
    }
}
