//! Regular voxel grids, per-joint fields over them, and integral regression.
//!
//! Flat voxel indices are x-major: `flat = (ix * H + iy) * W + iz` for dims
//! `(D, H, W)`. Voxel centers sit at `origin + (index + 0.5) * spacing`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub spacing: Vec3,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], origin: Vec3, spacing: Vec3) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!("grid dims must be positive: {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad grid spacing/origin: {spacing:?} {origin:?}")));
        }
        Ok(VoxelGrid { dims, origin, spacing })
    }

    /// Cubic grid of `n³` voxels with pitch `pitch`, centered on `center`.
    pub fn cube(n: usize, pitch: f64, center: Vec3) -> Result<Self> {
        let half = 0.5 * n as f64 * pitch;
        VoxelGrid::new(
            [n; 3],
            [center[0] - half, center[1] - half, center[2] - half],
            [pitch; 3],
        )
    }

    /// |Ω|
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    #[inline]
    pub fn unflat(&self, flat: usize) -> [usize; 3] {
        let iz = flat % self.dims[2];
        let rest = flat / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], iz]
    }

    #[inline]
    pub(crate) fn center_unchecked(&self, flat: usize) -> Vec3 {
        let i = self.unflat(flat);
        [
            self.origin[0] + (i[0] as f64 + 0.5) * self.spacing[0],
            self.origin[1] + (i[1] as f64 + 0.5) * self.spacing[1],
            self.origin[2] + (i[2] as f64 + 0.5) * self.spacing[2],
        ]
    }

    pub fn voxel_center(&self, flat: usize) -> Result<Vec3> {
        if flat >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: flat,
                len: self.len(),
            });
        }
        Ok(self.center_unchecked(flat))
    }

    pub fn centers(&self) -> Vec<Vec3> {
        (0..self.len()).map(|k| self.center_unchecked(k)).collect()
    }

    /// Upper corner of the grid box.
    pub fn extent_max(&self) -> Vec3 {
        [
            self.origin[0] + self.dims[0] as f64 * self.spacing[0],
            self.origin[1] + self.dims[1] as f64 * self.spacing[1],
            self.origin[2] + self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Whether `p` lies in the closed grid box.
    pub fn contains(&self, p: Vec3) -> bool {
        let hi = self.extent_max();
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] <= hi[a])
    }

    /// Voxel whose cell contains `p` (cells are half-open; the upper box face
    /// maps to the last voxel). `None` outside the box.
    pub fn nearest_voxel(&self, p: Vec3) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let mut idx = [0; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.spacing[a]).floor();
            idx[a] = (f.max(0.0) as usize).min(self.dims[a] - 1);
        }
        Some(self.flat(idx))
    }

    pub fn voxel_diagonal(&self) -> f64 {
        crate::pose::norm(self.spacing)
    }

    /// Same layout shifted by `t`.
    pub fn shifted(&self, t: Vec3) -> VoxelGrid {
        VoxelGrid {
            origin: crate::pose::add(self.origin, t),
            ..*self
        }
    }
}

/// Unnormalized isotropic Gaussian over voxel centers (peak ≤ 1).
pub fn gaussian_heatmap(grid: &VoxelGrid, center: Vec3, sigma_mm: f64) -> Result<Vec<f64>> {
    if !(sigma_mm > 0.0) {
        return Err(Error::NonPositiveSigma(sigma_mm));
    }
    let inv = 1.0 / (2.0 * sigma_mm * sigma_mm);
    Ok((0..grid.len())
        .map(|k| {
            let c = grid.center_unchecked(k);
            let d2 = (c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2) + (c[2] - center[2]).powi(2);
            (-d2 * inv).exp()
        })
        .collect())
}

/// Max-subtracted softmax over all entries.
pub fn spatial_softmax(field: &[f64]) -> Vec<f64> {
    let mut out = field.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Per-joint scalar fields over a grid, stored joint-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: VoxelGrid,
    pub n_joints: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(grid: VoxelGrid, n_joints: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_joints * grid.len() {
            return Err(Error::shape(format!(
                "heatmap has {} values, expected {}",
                values.len(),
                n_joints * grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("heatmap values must be finite"));
        }
        Ok(Heatmap { grid, n_joints, values })
    }

    /// Applies a per-joint spatial softmax to raw scores.
    pub fn from_scores(grid: VoxelGrid, n_joints: usize, scores: Vec<f64>) -> Result<Self> {
        let mut hm = Heatmap::new(grid, n_joints, scores)?;
        hm.normalize();
        Ok(hm)
    }

    pub fn normalize(&mut self) {
        let n = self.grid.len();
        for row in self.values.chunks_mut(n) {
            softmax_in_place(row);
        }
    }

    pub fn joint(&self, u: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[u * n..(u + 1) * n]
    }
}

/// Expectation of voxel-center coordinates under each joint's field.
pub fn integrate_pose(hm: &Heatmap) -> Result<Pose> {
    let centers = hm.grid.centers();
    let mut joints = Vec::with_capacity(hm.n_joints);
    let mut confidence = Vec::with_capacity(hm.n_joints);
    for u in 0..hm.n_joints {
        let row = hm.joint(u);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::UnnormalizedHeatmap { joint: u, sum });
        }
        let mut j = [0.0; 3];
        for (w, c) in row.iter().zip(&centers) {
            j[0] += w * c[0];
            j[1] += w * c[1];
            j[2] += w * c[2];
        }
        joints.push(j);
        confidence.push(row.iter().copied().fold(0.0, f64::max));
    }
    Ok(Pose { joints, confidence })
}

/// Per-joint, per-voxel feature vectors of width `channels`.
/// Layout: `values[(joint * |Ω| + voxel) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub grid: VoxelGrid,
    pub n_joints: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(grid: VoxelGrid, n_joints: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::shape("feature width must be positive"));
        }
        if values.len() != n_joints * channels * grid.len() {
            return Err(Error::shape(format!(
                "feature volume has {} values, expected {}",
                values.len(),
                n_joints * channels * grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("feature values must be finite"));
        }
        Ok(FeatureVolume {
            grid,
            n_joints,
            channels,
            values,
        })
    }

    pub fn zeros(grid: VoxelGrid, n_joints: usize, channels: usize) -> Self {
        FeatureVolume {
            grid,
            n_joints,
            channels,
            values: vec![0.0; n_joints * channels * grid.len()],
        }
    }

    #[inline]
    pub fn at(&self, u: usize, k: usize) -> &[f64] {
        let off = (u * self.grid.len() + k) * self.channels;
        &self.values[off..off + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, u: usize, k: usize) -> &mut [f64] {
        let off = (u * self.grid.len() + k) * self.channels;
        &mut self.values[off..off + self.channels]
    }

    /// All voxels of joint `u`, `|Ω| * channels` values.
    pub fn joint(&self, u: usize) -> &[f64] {
        let n = self.grid.len() * self.channels;
        &self.values[u * n..(u + 1) * n]
    }
}
