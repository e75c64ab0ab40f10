//! Training objective: L1 pose loss with a log-likelihood heatmap
//! regularizer, plus a squared-error loss supervising global attention.

use serde::{Deserialize, Serialize};

use crate::contextpose::GlobalAttention;
use crate::error::{Error, Result};
use crate::grid::{gaussian_heatmap, Heatmap, VoxelGrid};
use crate::pose::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda: f64,
    /// Width of the GA target. `None` means two voxel pitches.
    pub ga_sigma_mm: Option<f64>,
    /// Read `V_u(J^gt)` by trilinear interpolation instead of at the nearest voxel.
    pub trilinear: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 1e-2,
            lambda: 1e6,
            ga_sigma_mm: None,
            trilinear: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("beta and lambda must be non-negative".into()));
        }
        match self.ga_sigma_mm {
            Some(s) if !(s > 0.0) => Err(Error::NonPositiveSigma(s)),
            _ => Ok(()),
        }
    }

    pub fn ga_sigma(&self, grid: &VoxelGrid) -> f64 {
        self.ga_sigma_mm
            .unwrap_or_else(|| 2.0 * grid.spacing.iter().copied().fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseLoss {
    pub value: f64,
    pub d_pose: Vec<Vec3>,
    pub d_heatmap: Vec<f64>,
}

/// Voxels and weights used to read a field at a continuous point.
fn lookup(grid: &VoxelGrid, p: Vec3, trilinear: bool, joint: usize) -> Result<Vec<(usize, f64)>> {
    if !grid.contains(p) {
        return Err(Error::GtOutsideGrid(joint));
    }
    if !trilinear {
        return Ok(vec![(grid.nearest_voxel(p).expect("inside"), 1.0)]);
    }
    // interpolate between voxel centers, clamped at the border half-cells
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let f = (p[a] - grid.origin[a]) / grid.spacing[a] - 0.5;
        let top = (grid.dims[a] - 1) as f64;
        let f = f.clamp(0.0, top);
        lo[a] = (f.floor() as usize).min(grid.dims[a] - 1);
        hi[a] = (lo[a] + 1).min(grid.dims[a] - 1);
        t[a] = f - lo[a] as f64;
    }
    let mut out = Vec::with_capacity(8);
    for corner in 0..8 {
        let mut idx = [0; 3];
        let mut w = 1.0;
        for a in 0..3 {
            if corner >> a & 1 == 1 {
                idx[a] = hi[a];
                w *= t[a];
            } else {
                idx[a] = lo[a];
                w *= 1.0 - t[a];
            }
        }
        if w > 0.0 {
            out.push((grid.flat(idx), w));
        }
    }
    Ok(out)
}

/// `(1/N) Σ_u (‖J_u − J_u^gt‖₁ − β log V_u(J_u^gt))`.
pub fn loss_3d(pred: &Pose, gt: &Pose, hm: &Heatmap, cfg: &LossConfig) -> Result<PoseLoss> {
    cfg.validate()?;
    let n = gt.n_joints();
    if pred.n_joints() != n || hm.n_joints != n {
        return Err(Error::shape("pose and heatmap joint counts differ"));
    }
    let nv = hm.grid.len();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_pose = vec![[0.0; 3]; n];
    let mut d_heatmap = vec![0.0; hm.values.len()];
    for u in 0..n {
        let (p, g) = (pred.joints[u], gt.joints[u]);
        let mut l1 = 0.0;
        for a in 0..3 {
            let e = p[a] - g[a];
            l1 += e.abs();
            d_pose[u][a] = inv_n * if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 };
        }
        let taps = lookup(&hm.grid, g, cfg.trilinear, u)?;
        let vol: f64 = taps.iter().map(|&(k, w)| w * hm.values[u * nv + k]).sum();
        value += l1 - cfg.beta * vol.ln();
        if cfg.beta > 0.0 {
            for (k, w) in taps {
                d_heatmap[u * nv + k] -= inv_n * cfg.beta * w / vol;
            }
        }
    }
    Ok(PoseLoss {
        value: value * inv_n,
        d_pose,
        d_heatmap,
    })
}

/// Peak-one Gaussians at the ground-truth joints, joint-major.
pub fn ga_target(gt: &Pose, grid: &VoxelGrid, cfg: &LossConfig) -> Result<Vec<f64>> {
    let sigma = cfg.ga_sigma(grid);
    let mut out = Vec::with_capacity(gt.n_joints() * grid.len());
    for (u, &j) in gt.joints.iter().enumerate() {
        if !grid.contains(j) {
            return Err(Error::GtOutsideGrid(u));
        }
        out.extend(gaussian_heatmap(grid, j, sigma)?);
    }
    Ok(out)
}

/// `(1/(N|Ω|)) Σ_u ‖G_u − G_u^gt‖²` and its gradient in `G`.
pub fn loss_ga(ga: &GlobalAttention, gt: &Pose, grid: &VoxelGrid, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    if ga.grid != *grid || ga.n_joints != gt.n_joints() {
        return Err(Error::shape("attention does not match grid or pose"));
    }
    let target = ga_target(gt, grid, cfg)?;
    let scale = 1.0 / ga.values.len() as f64;
    let mut value = 0.0;
    let grad = ga
        .values
        .iter()
        .zip(&target)
        .map(|(g, t)| {
            let e = g - t;
            value += e * e;
            2.0 * scale * e
        })
        .collect();
    Ok((value * scale, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub pose: PoseLoss,
    pub ga_value: f64,
    /// Already scaled by λ.
    pub d_ga: Vec<f64>,
}

/// `L_3D + λ L_GA`. Without attention (`ga = None`) this is `L_3D`.
pub fn total_loss(
    pred: &Pose,
    gt: &Pose,
    hm: &Heatmap,
    ga: Option<&GlobalAttention>,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let pose = loss_3d(pred, gt, hm, cfg)?;
    let (ga_value, d_ga) = match ga {
        Some(ga) if cfg.lambda > 0.0 => {
            let (v, mut g) = loss_ga(ga, gt, &hm.grid, cfg)?;
            g.iter_mut().for_each(|x| *x *= cfg.lambda);
            (v, g)
        }
        // still reported, but contributes nothing
        Some(ga) => (loss_ga(ga, gt, &hm.grid, cfg)?.0, vec![0.0; ga.values.len()]),
        None => (0.0, Vec::new()),
    };
    Ok(TotalLoss {
        value: pose.value + cfg.lambda * ga_value,
        pose,
        ga_value,
        d_ga,
    })
}
