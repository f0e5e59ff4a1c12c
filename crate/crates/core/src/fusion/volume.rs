//! Sparse voxel feature volumes and their snapshot files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::imaging::Vec3;

pub const VOLUME_MAGIC: &[u8; 8] = b"NFCCVOL1";

/// An axis-aligned box split into `resolution^3` cubic-or-boxy cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelGrid {
    pub min: Vec3,
    pub max: Vec3,
    pub resolution: usize,
}

impl VoxelGrid {
    pub fn new(min: Vec3, max: Vec3, resolution: usize) -> Result<Self> {
        ensure!(resolution >= 1, "grid resolution must be positive");
        ensure!(
            (0..3).all(|a| min[a].is_finite() && max[a].is_finite() && min[a] < max[a]),
            "grid bounds must be finite with min < max"
        );
        Ok(Self { min, max, resolution })
    }

    pub fn cell_size(&self) -> Vec3 {
        (self.max - self.min) / self.resolution as f64
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.pow(3)
    }

    /// Largest side length.
    pub fn extent(&self) -> f64 {
        (self.max - self.min).max()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution * (j + self.resolution * k)
    }

    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let r = self.resolution;
        (index % r, (index / r) % r, index / (r * r))
    }

    pub fn voxel_center(&self, index: usize) -> Vec3 {
        let (i, j, k) = self.coords(index);
        let s = self.cell_size();
        self.min + Vec3::new((i as f64 + 0.5) * s.x, (j as f64 + 0.5) * s.y, (k as f64 + 0.5) * s.z)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Trilinear weights over voxel centers. Corners beyond the grid are
    /// dropped (they stand for zero features). `None` outside the bounds.
    pub fn trilinear(&self, p: &Vec3) -> Option<Vec<(usize, f64)>> {
        if !self.contains(p) {
            return None;
        }
        let s = self.cell_size();
        let r = self.resolution as i64;
        let mut base = [0i64; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let c = (p[a] - self.min[a]) / s[a] - 0.5;
            let f = c.floor();
            base[a] = f as i64;
            frac[a] = c - f;
        }
        let mut out = Vec::with_capacity(8);
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0i64; 3];
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                idx[a] = base[a] + hi as i64;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 || idx.iter().any(|v| *v < 0 || *v >= r) {
                continue;
            }
            out.push((self.index(idx[0] as usize, idx[1] as usize, idx[2] as usize), w));
        }
        Some(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub feature: Vec<f64>,
    pub count: u32,
}

/// Occupied voxels of a grid, each with a feature vector of fixed width.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    grid: VoxelGrid,
    width: usize,
    voxels: BTreeMap<usize, Voxel>,
}

impl FeatureVolume {
    pub fn empty(grid: VoxelGrid, width: usize) -> Self {
        Self {
            grid,
            width,
            voxels: BTreeMap::new(),
        }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Voxel> {
        self.voxels.get(&index)
    }

    /// Occupied voxels in ascending index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Voxel)> {
        self.voxels.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, index: usize, feature: Vec<f64>, count: u32) -> Result<()> {
        ensure!(index < self.grid.voxel_count(), "voxel index {index} outside grid");
        ensure!(feature.len() == self.width, "voxel feature has width {}, expected {}", feature.len(), self.width);
        ensure!(count >= 1, "occupied voxels need a count of at least 1");
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature of voxel {index}")));
        }
        self.voxels.insert(index, Voxel { feature, count });
        Ok(())
    }

    pub fn same_grid(&self, other: &FeatureVolume) -> bool {
        self.grid == other.grid && self.width == other.width
    }

    /// Trilinear feature at `p`, with unoccupied voxels as zero. `None`
    /// outside the bounds.
    pub fn interpolate(&self, p: &Vec3) -> Option<Vec<f64>> {
        let taps = self.grid.trilinear(p)?;
        let mut out = vec![0.0; self.width];
        for (idx, w) in taps {
            if let Some(v) = self.voxels.get(&idx) {
                out.iter_mut().zip(&v.feature).for_each(|(o, f)| *o += w * f);
            }
        }
        Some(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.voxels.len() * (12 + 8 * self.width));
        out.extend_from_slice(VOLUME_MAGIC);
        for a in 0..3 {
            out.extend_from_slice(&self.grid.min[a].to_le_bytes());
        }
        for a in 0..3 {
            out.extend_from_slice(&self.grid.max[a].to_le_bytes());
        }
        out.extend_from_slice(&(self.grid.resolution as u64).to_le_bytes());
        out.extend_from_slice(&(self.width as u64).to_le_bytes());
        out.extend_from_slice(&(self.voxels.len() as u64).to_le_bytes());
        for (idx, v) in &self.voxels {
            out.extend_from_slice(&(*idx as u64).to_le_bytes());
            out.extend_from_slice(&v.count.to_le_bytes());
            for f in &v.feature {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != VOLUME_MAGIC {
            return Err("not a volume snapshot (bad magic)".into());
        }
        let min = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
        let max = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
        let resolution = r.u64()? as usize;
        let width = r.u64()? as usize;
        let count = r.u64()? as usize;
        let grid = VoxelGrid::new(min, max, resolution).map_err(|e| e.to_string())?;
        let mut vol = FeatureVolume::empty(grid, width);
        let mut last = None;
        for _ in 0..count {
            let idx = r.u64()? as usize;
            let c = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
            let feature = (0..width).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            if last.is_some_and(|l| l >= idx) {
                return Err("voxel records are not sorted by index".into());
            }
            last = Some(idx);
            vol.insert(idx, feature, c).map_err(|e| e.to_string())?;
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after volume snapshot".into());
        }
        Ok(vol)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or("truncated volume snapshot")?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> VoxelGrid {
        VoxelGrid::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0), 4).unwrap()
    }

    #[test]
    fn indices_round_trip() {
        let g = grid();
        for idx in 0..g.voxel_count() {
            let (i, j, k) = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
        assert_eq!(g.voxel_center(0), Vec3::new(-0.75, -0.75, -0.75));
    }

    #[test]
    fn trilinear_at_center_and_midpoint() {
        let g = grid();
        let c = g.voxel_center(g.index(1, 2, 3));
        assert_eq!(g.trilinear(&c).unwrap(), vec![(g.index(1, 2, 3), 1.0)]);
        let mid = (g.voxel_center(g.index(1, 1, 1)) + g.voxel_center(g.index(2, 1, 1))) / 2.0;
        let t = g.trilinear(&mid).unwrap();
        assert_eq!(t, vec![(g.index(1, 1, 1), 0.5), (g.index(2, 1, 1), 0.5)]);
        assert!(g.trilinear(&Vec3::new(1.5, 0.0, 0.0)).is_none());
    }

    #[test]
    fn trilinear_weights_sum_to_one_inside() {
        let g = grid();
        for p in [Vec3::new(0.1, -0.33, 0.52), Vec3::new(-0.6, 0.6, 0.0)] {
            let s: f64 = g.trilinear(&p).unwrap().iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_round_trip_and_errors() {
        let mut v = FeatureVolume::empty(grid(), 2);
        v.insert(9, vec![0.5, -1.0], 3).unwrap();
        v.insert(2, vec![1.5, 2.0], 1).unwrap();
        let bytes = v.to_bytes();
        assert_eq!(&bytes[..8], VOLUME_MAGIC);
        assert_eq!(FeatureVolume::from_bytes(&bytes).unwrap(), v);
        assert!(FeatureVolume::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FeatureVolume::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(FeatureVolume::from_bytes(&long).is_err());
    }

    #[test]
    fn insert_validates() {
        let mut v = FeatureVolume::empty(grid(), 2);
        assert!(v.insert(64, vec![0.0; 2], 1).is_err());
        assert!(v.insert(0, vec![0.0; 3], 1).is_err());
        assert!(v.insert(0, vec![0.0; 2], 0).is_err());
        assert!(v.insert(0, vec![f64::NAN, 0.0], 1).is_err());
    }
}
