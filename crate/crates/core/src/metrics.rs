//! Pose evaluation metrics. All distances are in millimeters, angles in
//! radians. Limb orientation for angle errors runs from the lower to the
//! higher joint index.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{dist, dot, norm, sub, Pose, Vec3};
use crate::skeleton::SkeletonGraph;

fn same_shape(pred: &Pose, gt: &Pose) -> Result<()> {
    if pred.n_joints() != gt.n_joints() || gt.n_joints() == 0 {
        return Err(Error::shape(format!(
            "prediction has {} joints, ground truth {}",
            pred.n_joints(),
            gt.n_joints()
        )));
    }
    Ok(())
}

/// Mean Euclidean joint error without any alignment.
pub fn mean_joint_error(pred: &Pose, gt: &Pose) -> Result<f64> {
    same_shape(pred, gt)?;
    let n = gt.n_joints() as f64;
    Ok(pred.joints.iter().zip(&gt.joints).map(|(&a, &b)| dist(a, b)).sum::<f64>() / n)
}

/// Translates `pred` so its joint `root` coincides with the ground truth's.
pub fn root_align(pred: &Pose, gt: &Pose, root: usize) -> Result<Pose> {
    same_shape(pred, gt)?;
    if root >= gt.n_joints() {
        return Err(Error::IndexOutOfRange {
            index: root,
            len: gt.n_joints(),
        });
    }
    Ok(pred.translated(sub(gt.joints[root], pred.joints[root])))
}

/// MPJPE protocol #1: root (joint 0) aligned.
pub fn mpjpe_p1(pred: &Pose, gt: &Pose) -> Result<f64> {
    mpjpe_p1_root(pred, gt, 0)
}

pub fn mpjpe_p1_root(pred: &Pose, gt: &Pose, root: usize) -> Result<f64> {
    mean_joint_error(&root_align(pred, gt, root)?, gt)
}

/// Least-squares similarity/rigid transform mapping `pred` onto `gt`.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl Alignment {
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let v = self.rotation * Vector3::from(p) * self.scale + self.translation;
        [v.x, v.y, v.z]
    }
}

/// Orthogonal Procrustes with the determinant of the rotation forced to +1.
pub fn procrustes(pred: &Pose, gt: &Pose, with_scale: bool) -> Result<Alignment> {
    same_shape(pred, gt)?;
    let n = gt.n_joints();
    if n < 3 {
        return Err(Error::DegenerateConfiguration);
    }
    let mean = |p: &Pose| {
        p.joints
            .iter()
            .fold(Vector3::zeros(), |acc, &j| acc + Vector3::from(j))
            / n as f64
    };
    let (mp, mg) = (mean(pred), mean(gt));
    let mut cov = Matrix3::zeros();
    let mut gt_scatter = Matrix3::zeros();
    let mut pred_var = 0.0;
    for (&a, &b) in pred.joints.iter().zip(&gt.joints) {
        let (pa, gb) = (Vector3::from(a) - mp, Vector3::from(b) - mg);
        cov += gb * pa.transpose();
        gt_scatter += gb * gb.transpose();
        pred_var += pa.norm_squared();
    }
    // collinear (or coincident) ground truth has no unique rotation
    let sv = gt_scatter.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::DegenerateConfiguration);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * correction * v_t;
    let scale = if with_scale {
        if !(pred_var > 0.0) {
            return Err(Error::DegenerateConfiguration);
        }
        let s = svd.singular_values;
        (s[0] + s[1] + d * s[2]) / pred_var
    } else {
        1.0
    };
    let translation = mg - rotation * mp * scale;
    Ok(Alignment {
        rotation,
        scale,
        translation,
    })
}

/// MPJPE protocol #2: error after optimal rigid (optionally similarity) alignment.
pub fn mpjpe_p2(pred: &Pose, gt: &Pose, with_scale: bool) -> Result<f64> {
    let a = procrustes(pred, gt, with_scale)?;
    let aligned = Pose::new(pred.joints.iter().map(|&p| a.apply(p)).collect());
    mean_joint_error(&aligned, gt)
}

/// Mean absolute limb-length error over the graph edges.
pub fn mplle(pred: &Pose, gt: &Pose, g: &SkeletonGraph) -> Result<f64> {
    same_shape(pred, gt)?;
    if g.n_joints() != gt.n_joints() || g.edges().is_empty() {
        return Err(Error::shape("graph does not match the poses"));
    }
    let total: f64 = g
        .edges()
        .iter()
        .map(|&(u, v)| (dist(pred.joints[u], pred.joints[v]) - dist(gt.joints[u], gt.joints[v])).abs())
        .sum();
    Ok(total / g.edges().len() as f64)
}

/// Mean angle between corresponding limb directions.
pub fn mplae(pred: &Pose, gt: &Pose, g: &SkeletonGraph) -> Result<f64> {
    limb_angles(pred, gt, g, None)
}

/// With `collapsed = Some(a)`, a zero-length predicted limb scores `a`
/// instead of failing. Degenerate ground truth is always an error.
fn limb_angles(pred: &Pose, gt: &Pose, g: &SkeletonGraph, collapsed: Option<f64>) -> Result<f64> {
    same_shape(pred, gt)?;
    if g.n_joints() != gt.n_joints() || g.edges().is_empty() {
        return Err(Error::shape("graph does not match the poses"));
    }
    let mut total = 0.0;
    for &(u, v) in g.edges() {
        let a = sub(pred.joints[v], pred.joints[u]);
        let b = sub(gt.joints[v], gt.joints[u]);
        let (na, nb) = (norm(a), norm(b));
        if nb <= 1e-6 {
            return Err(Error::ZeroLengthLimb(u, v));
        }
        if na <= 1e-6 {
            total += collapsed.ok_or(Error::ZeroLengthLimb(u, v))?;
            continue;
        }
        // atan2 stays accurate near 0 and π, where acos of the cosine does not
        let c = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
        total += norm(c).atan2(dot(a, b));
    }
    Ok(total / g.edges().len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PckConfig {
    pub threshold_mm: f64,
    pub curve_max_mm: f64,
    pub curve_step_mm: f64,
}

impl Default for PckConfig {
    fn default() -> Self {
        PckConfig {
            threshold_mm: 150.0,
            curve_max_mm: 150.0,
            curve_step_mm: 5.0,
        }
    }
}

/// PCK at the configured threshold and AUC as the mean PCK over
/// `0, step, …, curve_max`. Joints count as correct when their error is
/// at most the threshold. Inputs are compared as given; callers align them
/// (protocol #1) first.
pub fn pck_auc(preds: &[Pose], gts: &[Pose], cfg: &PckConfig) -> Result<(f64, f64)> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut errors = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        same_shape(p, g)?;
        errors.extend(p.joints.iter().zip(&g.joints).map(|(&a, &b)| dist(a, b)));
    }
    let frac = |t: f64| errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64;
    let steps = (cfg.curve_max_mm / cfg.curve_step_mm).round() as usize;
    let auc = (0..=steps).map(|i| frac(i as f64 * cfg.curve_step_mm)).sum::<f64>() / (steps + 1) as f64;
    Ok((frac(cfg.threshold_mm), auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub mpjpe_p1: f64,
    pub mpjpe_p2: f64,
    pub mplle: f64,
    pub mplae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub mpjpe_p1: f64,
    pub mpjpe_p2: f64,
    /// Protocol #2 with a similarity (scaled) alignment, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpjpe_p2_scaled: Option<f64>,
    pub mplle: f64,
    pub mplae: f64,
    pub pck: f64,
    pub auc: f64,
    #[serde(skip)]
    pub samples: Vec<SampleMetrics>,
}

/// Per-sample and aggregate metrics. Protocol #2 is rigid; `with_scale`
/// additionally reports the scaled variant.
pub fn evaluate(
    ids: &[String],
    preds: &[Pose],
    gts: &[Pose],
    g: &SkeletonGraph,
    pck: &PckConfig,
    with_scale: bool,
) -> Result<MetricReport> {
    if preds.len() != gts.len() || ids.len() != gts.len() || gts.is_empty() {
        return Err(Error::shape("sample counts differ"));
    }
    let mut samples = Vec::with_capacity(gts.len());
    let mut scaled = 0.0;
    let mut aligned = Vec::with_capacity(gts.len());
    for ((id, p), gt) in ids.iter().zip(preds).zip(gts) {
        // p2 is undefined for degenerate ground truth; fall back to p1
        let p1 = mpjpe_p1(p, gt)?;
        let p2 = match mpjpe_p2(p, gt, false) {
            Err(Error::DegenerateConfiguration) => p1,
            r => r?,
        };
        if with_scale {
            scaled += match mpjpe_p2(p, gt, true) {
                Err(Error::DegenerateConfiguration) => p1,
                r => r?,
            };
        }
        samples.push(SampleMetrics {
            sample_id: id.clone(),
            mpjpe_p1: p1,
            mpjpe_p2: p2,
            mplle: mplle(p, gt, g)?,
            // voxel decoders can place two joints in one cell; such a limb
            // has no direction and counts as orthogonal
            mplae: limb_angles(p, gt, g, Some(std::f64::consts::FRAC_PI_2))?,
        });
        aligned.push(root_align(p, gt, 0)?);
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
    let (pck_v, auc) = pck_auc(&aligned, gts, pck)?;
    Ok(MetricReport {
        n_samples: samples.len(),
        mpjpe_p1: mean(|s| s.mpjpe_p1),
        mpjpe_p2: mean(|s| s.mpjpe_p2),
        mpjpe_p2_scaled: with_scale.then_some(scaled / n),
        mplle: mean(|s| s.mplle),
        mplae: mean(|s| s.mplae),
        pck: pck_v,
        auc,
        samples,
    })
}
