//! Browser bindings for three small interactive views: the attention a
//! query voxel pays to a neighbouring joint, PSM inference on a synthetic
//! sample, and integral-regression error against voxel pitch.
//!
//! Every export is a thin wrapper over a plain function so the numerics
//! can be tested natively.

use ctxpose::contextpose::{global_attention, pairwise_kernel, ContextParams};
use ctxpose::grid::{integrate_pose, Heatmap};
use ctxpose::pose::dist;
use ctxpose::psm::{dp_map, PsmConfig};
use ctxpose::synthgen::{generate, unaries_of, Bone, GridSpec, SkeletonSpec, SynthConfig};
use ctxpose::{FeatureVolume, LimbPrior, Result, VoxelGrid};
use wasm_bindgen::prelude::*;

pub const SLICE_PITCH_MM: f64 = 10.0;
pub const SLICE_LIMB_MM: f64 = 60.0;
pub const SLICE_LIMB_SIGMA_MM: f64 = 2.0;

/// Attention of `query` (a voxel of joint 0) over joint 1's voxels on a
/// `side × side` slice, `G_1(k) · P(q, k)`. Joint 1's detector fires at
/// `peak` with the given sharpness; `raw` returns the bare limb kernel
/// scaled to a maximum of 1 instead.
pub fn attention_slice(side: usize, alpha: f64, query: usize, peak: usize, sharpness: f64, raw: bool) -> Result<Vec<f64>> {
    let grid = VoxelGrid::new([side, side, 1], [0.0; 3], [SLICE_PITCH_MM; 3])?;
    let n = grid.len();
    let (query, peak) = (query.min(n - 1), peak.min(n - 1));
    let centers = grid.centers();
    let mut vals = vec![0.0; 2 * n];
    for k in 0..n {
        let r = dist(centers[k], centers[peak]) / (2.0 * SLICE_PITCH_MM);
        vals[n + k] = (-0.5 * r * r).exp();
    }
    let x = FeatureVolume::new(grid.clone(), 2, 1, vals)?;
    let mut p = ContextParams::new(2, 1)?;
    p.alpha = alpha;
    p.d = vec![sharpness, sharpness];
    let prior = LimbPrior { mu: SLICE_LIMB_MM, sigma: SLICE_LIMB_SIGMA_MM };
    let ga = global_attention(&x, &p.d)?;
    let pk = pairwise_kernel(&grid, prior, &ga, (0, 1), &p)?;
    if raw {
        let row: Vec<f64> = (0..n).map(|k| pk.unnormalized(query, k)).collect();
        let mx = row.iter().copied().fold(0.0, f64::max);
        return Ok(row.into_iter().map(|v| if mx > 0.0 { v / mx } else { 0.0 }).collect());
    }
    let g1 = ga.joint(1);
    Ok((0..n).map(|k| g1[k] * pk.value(query, k)).collect())
}

const PSM_BONES: [(usize, usize, [f64; 3]); 5] = [
    (0, 1, [0.0, 0.0, 90.0]),
    (1, 2, [0.0, 0.0, 80.0]),
    (0, 3, [-80.0, 0.0, -30.0]),
    (0, 4, [80.0, 0.0, -30.0]),
    (1, 5, [0.0, 80.0, 20.0]),
];

pub fn psm_edges() -> Vec<u32> {
    PSM_BONES.iter().flat_map(|&(u, v, _)| [u as u32, v as u32]).collect()
}

/// One synthetic six-joint sample on an 8³ grid of 40 mm voxels. Returns
/// ground truth, the tree-PSM MAP and the per-joint argmax, each as
/// `3N` coordinates, followed by `N` occlusion flags.
pub fn psm_sample(seed: u64, occlusion: f64) -> Result<Vec<f64>> {
    let cfg = SynthConfig {
        seed,
        n_samples: 1,
        test_fraction: 0.0,
        skeleton: SkeletonSpec::Custom {
            n_joints: 6,
            bones: PSM_BONES.iter().map(|&(parent, child, offset)| Bone { parent, child, offset }).collect(),
        },
        grid: GridSpec { dims: [8; 3], spacing_mm: [40.0; 3], center_mm: [0.0; 3] },
        angle_range_deg: 30.0,
        root_jitter_mm: 30.0,
        occlusion_prob: occlusion.clamp(0.0, 1.0),
        channels: 1,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg)?;
    let s = &ds.samples[0];
    let grid = ds.grid();
    let un = unaries_of(&s.features)?;
    let psm = dp_map(&un, &ds.graph.root_tree(0)?, &ds.priors, &PsmConfig::for_grid(grid))?;
    let psm_pose = psm.assignment.decode(grid)?;
    let argmax = (0..un.n_joints).map(|u| {
        let row = un.joint(u);
        let k = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        grid.voxel_center(k)
    });
    let mut out: Vec<f64> = s.pose.joints.iter().flatten().copied().collect();
    out.extend(psm_pose.joints.iter().flatten());
    for c in argmax {
        out.extend(c?);
    }
    out.extend(s.occluded.iter().map(|&o| if o { 1.0 } else { 0.0 }));
    Ok(out)
}

pub const QUANT_PITCHES_MM: [f64; 5] = [80.0, 40.0, 20.0, 10.0, 5.0];

/// Mean integral-regression error of a Gaussian heatmap of width `sigma_mm`
/// over a fixed 320 mm box, for each pitch in [`QUANT_PITCHES_MM`].
pub fn quantization_curve(sigma_mm: f64, n_points: usize) -> Result<Vec<f64>> {
    let points: Vec<[f64; 3]> = (0..n_points.max(1))
        .map(|i| {
            // a deterministic low-discrepancy scatter within ±40 mm
            let f = |a: f64| 80.0 * ((i as f64 + 1.0) * a).fract() - 40.0;
            [f(0.618_033_988_75), f(0.754_877_666_2), f(0.569_840_290_9)]
        })
        .collect();
    QUANT_PITCHES_MM
        .iter()
        .map(|&pitch| {
            let grid = VoxelGrid::cube((320.0 / pitch).round() as usize, pitch, [0.0; 3])?;
            let centers = grid.centers();
            let mut total = 0.0;
            for &p in &points {
                let scores = centers.iter().map(|&c| -dist(c, p).powi(2) / (2.0 * sigma_mm * sigma_mm)).collect();
                let hm = Heatmap::from_scores(grid.clone(), 1, scores)?;
                total += dist(integrate_pose(&hm)?.joints[0], p);
            }
            Ok(total / points.len() as f64)
        })
        .collect()
}

fn js(e: ctxpose::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen(js_name = attentionSlice)]
pub fn attention_slice_js(side: usize, alpha: f64, query: usize, peak: usize, sharpness: f64, raw: bool) -> std::result::Result<Vec<f64>, JsValue> {
    attention_slice(side, alpha, query, peak, sharpness, raw).map_err(js)
}

#[wasm_bindgen(js_name = psmSample)]
pub fn psm_sample_js(seed: u32, occlusion: f64) -> std::result::Result<Vec<f64>, JsValue> {
    psm_sample(seed as u64, occlusion).map_err(js)
}

#[wasm_bindgen(js_name = psmEdges)]
pub fn psm_edges_js() -> Vec<u32> {
    psm_edges()
}

#[wasm_bindgen(js_name = quantizationCurve)]
pub fn quantization_curve_js(sigma_mm: f64, n_points: usize) -> std::result::Result<Vec<f64>, JsValue> {
    quantization_curve(sigma_mm, n_points).map_err(js)
}

#[wasm_bindgen(js_name = quantizationPitches)]
pub fn quantization_pitches_js() -> Vec<f64> {
    QUANT_PITCHES_MM.to_vec()
}
