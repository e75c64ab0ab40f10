//! FCN / GNN / LCN layers on joint-level features.
//!
//! Two forms are provided. The structure-matrix layer computes
//! `y_u = Σ_v (S[u][v] · W[u][v]) x_v`. The collect/aggregate/update form
//! collects `W[u][v] x_v` from every `v` with `S[u][v] = 1`, aggregates by
//! summation in ascending `v`, and applies an update function `f(x_u, agg)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{DType, TensorFile};
use crate::skeleton::SkeletonGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fcn,
    Gnn,
    Lcn,
}

impl Variant {
    /// GNN shares one weight matrix across pairs; FCN and LCN do not.
    pub fn shares_weights(self) -> bool {
        matches!(self, Variant::Gnn)
    }
}

/// Binary `N×N` mask `S[u][v]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureMatrix {
    pub n_joints: usize,
    mask: Vec<bool>,
}

impl StructureMatrix {
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.mask[u * self.n_joints + v]
    }

    pub fn identity(n: usize) -> Self {
        let mut mask = vec![false; n * n];
        for u in 0..n {
            mask[u * n + u] = true;
        }
        StructureMatrix { n_joints: n, mask }
    }

    pub fn row_sum(&self, u: usize) -> usize {
        (0..self.n_joints).filter(|&v| self.get(u, v)).count()
    }
}

/// FCN: dense mask. GNN/LCN: graph edges plus the diagonal when `self_loop`.
pub fn build_structure(g: &SkeletonGraph, variant: Variant, self_loop: bool) -> StructureMatrix {
    let n = g.n_joints();
    let mut mask = vec![false; n * n];
    match variant {
        Variant::Fcn => mask.iter_mut().for_each(|m| *m = true),
        Variant::Gnn | Variant::Lcn => {
            for &(u, v) in g.edges() {
                mask[u * n + v] = true;
                mask[v * n + u] = true;
            }
            if self_loop {
                for u in 0..n {
                    mask[u * n + u] = true;
                }
            }
        }
    }
    StructureMatrix { n_joints: n, mask }
}

/// Joint-level features, `values[u * width + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFeatures {
    pub n_joints: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl JointFeatures {
    pub fn new(n_joints: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_joints * width {
            return Err(Error::shape(format!(
                "{} feature values for {n_joints}×{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("joint features must be finite"));
        }
        Ok(JointFeatures { n_joints, width, values })
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.values[u * self.width..(u + 1) * self.width]
    }
}

/// Weights `W[u][v]` of shape `m_out × m_in` (row-major). With sharing a
/// single matrix serves every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnLayerParams {
    pub n_joints: usize,
    pub m_in: usize,
    pub m_out: usize,
    pub variant: Variant,
    pub shared: bool,
    pub weights: Vec<f64>,
}

impl GnnLayerParams {
    pub fn zeros(n_joints: usize, m_in: usize, m_out: usize, variant: Variant) -> Self {
        let shared = variant.shares_weights();
        let count = if shared { 1 } else { n_joints * n_joints };
        GnnLayerParams {
            n_joints,
            m_in,
            m_out,
            variant,
            shared,
            weights: vec![0.0; count * m_in * m_out],
        }
    }

    fn block(&self, u: usize, v: usize) -> usize {
        if self.shared {
            0
        } else {
            u * self.n_joints + v
        }
    }

    pub fn weight(&self, u: usize, v: usize) -> &[f64] {
        let sz = self.m_in * self.m_out;
        let b = self.block(u, v);
        &self.weights[b * sz..(b + 1) * sz]
    }

    pub fn weight_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let sz = self.m_in * self.m_out;
        let b = self.block(u, v);
        &mut self.weights[b * sz..(b + 1) * sz]
    }

    fn validate(&self) -> Result<()> {
        let count = if self.shared { 1 } else { self.n_joints * self.n_joints };
        if self.weights.len() != count * self.m_in * self.m_out {
            return Err(Error::shape("weight buffer does not match layer shape"));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::shape("weights must be finite"));
        }
        Ok(())
    }

    /// Serializes to the tensor container, one tensor per `(u, v)` block.
    pub fn to_tensors(&self) -> TensorFile {
        let mut tf = TensorFile {
            meta: serde_json::json!({
                "kind": "gnn-layer",
                "variant": self.variant,
                "shared": self.shared,
                "n_joints": self.n_joints,
                "m_in": self.m_in,
                "m_out": self.m_out,
            }),
            tensors: Vec::new(),
        };
        let shape = vec![self.m_out, self.m_in];
        if self.shared {
            tf.push("w", shape, DType::F32, self.weight(0, 0));
        } else {
            for u in 0..self.n_joints {
                for v in 0..self.n_joints {
                    tf.push(format!("w.{u}.{v}"), shape.clone(), DType::F32, self.weight(u, v));
                }
            }
        }
        tf
    }
}

#[inline]
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let m_in = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * m_in..(r + 1) * m_in];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn check_layer(x: &JointFeatures, s: &StructureMatrix, p: &GnnLayerParams) -> Result<()> {
    p.validate()?;
    if x.n_joints != p.n_joints || s.n_joints != p.n_joints || x.width != p.m_in {
        return Err(Error::shape(format!(
            "features {}×{}, mask {}, params {}×{}",
            x.n_joints, x.width, s.n_joints, p.n_joints, p.m_in
        )));
    }
    Ok(())
}

/// `y_u = Σ_v (S[u][v] ⊙ W[u][v]) x_v`, summed in ascending `v`. Linear; no activation.
pub fn layer_forward(x: &JointFeatures, s: &StructureMatrix, p: &GnnLayerParams) -> Result<JointFeatures> {
    check_layer(x, s, p)?;
    let mut out = vec![0.0; p.n_joints * p.m_out];
    for u in 0..p.n_joints {
        let y = &mut out[u * p.m_out..(u + 1) * p.m_out];
        for v in 0..p.n_joints {
            if s.get(u, v) {
                matvec_acc(p.weight(u, v), x.row(v), y);
            }
        }
    }
    JointFeatures::new(p.n_joints, p.m_out, out)
}

/// Update step `f(x_u, agg)`.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateFn {
    /// `agg`; the joint's own features enter through a self-loop in the mask.
    Add,
    /// `x_u + agg` (requires `m_in = m_out`).
    Residual,
    /// `relu(A [x_u; agg] + b)` with `A: m_out × (m_in + m_out)`.
    ConcatAffine { a: Vec<f64>, b: Vec<f64> },
    /// `x_u + sigmoid(A x_u + b) ⊙ agg` (requires `m_in = m_out`).
    GatedAdd { a: Vec<f64>, b: Vec<f64> },
}

impl UpdateFn {
    /// Registered ids: `add`, `residual`, `concat-affine`, `gated-add`.
    /// Affine parameters start at zero.
    pub fn from_id(id: &str, m_in: usize, m_out: usize) -> Result<Self> {
        Ok(match id {
            "add" => UpdateFn::Add,
            "residual" => UpdateFn::Residual,
            "concat-affine" => UpdateFn::ConcatAffine {
                a: vec![0.0; m_out * (m_in + m_out)],
                b: vec![0.0; m_out],
            },
            "gated-add" => UpdateFn::GatedAdd {
                a: vec![0.0; m_out * m_in],
                b: vec![0.0; m_out],
            },
            other => return Err(Error::UnknownUpdateFunction(other.to_string())),
        })
    }

    fn apply(&self, x: &[f64], agg: &[f64], out: &mut [f64]) -> Result<()> {
        let m_out = agg.len();
        match self {
            UpdateFn::Add => out.copy_from_slice(agg),
            UpdateFn::Residual => {
                if x.len() != m_out {
                    return Err(Error::shape("residual update needs m_in = m_out"));
                }
                for ((o, a), b) in out.iter_mut().zip(x).zip(agg) {
                    *o = a + b;
                }
            }
            UpdateFn::ConcatAffine { a, b } => {
                let width = x.len() + m_out;
                if a.len() != m_out * width || b.len() != m_out {
                    return Err(Error::shape("concat-affine parameters do not match widths"));
                }
                let cat: Vec<f64> = x.iter().chain(agg).copied().collect();
                out.copy_from_slice(b);
                matvec_acc(a, &cat, out);
                out.iter_mut().for_each(|o| *o = o.max(0.0));
            }
            UpdateFn::GatedAdd { a, b } => {
                if x.len() != m_out || a.len() != m_out * m_out || b.len() != m_out {
                    return Err(Error::shape("gated-add needs m_in = m_out and matching parameters"));
                }
                let mut gate = b.clone();
                matvec_acc(a, x, &mut gate);
                for (r, o) in out.iter_mut().enumerate() {
                    let z = 1.0 / (1.0 + (-gate[r]).exp());
                    *o = x[r] + z * agg[r];
                }
            }
        }
        Ok(())
    }
}

/// Collect `W[u][v] x_v` over the mask, sum in ascending `v`, update with `f`.
pub fn cau_forward(
    x: &JointFeatures,
    s: &StructureMatrix,
    p: &GnnLayerParams,
    f: &UpdateFn,
) -> Result<JointFeatures> {
    check_layer(x, s, p)?;
    let mut out = vec![0.0; p.n_joints * p.m_out];
    let mut collected: Vec<(usize, Vec<f64>)> = Vec::new();
    for u in 0..p.n_joints {
        collected.clear();
        for v in 0..p.n_joints {
            if s.get(u, v) {
                let mut phi = vec![0.0; p.m_out];
                matvec_acc(p.weight(u, v), x.row(v), &mut phi);
                collected.push((v, phi));
            }
        }
        let agg = aggregate_sum(&mut collected, p.m_out);
        f.apply(x.row(u), &agg, &mut out[u * p.m_out..(u + 1) * p.m_out])?;
    }
    JointFeatures::new(p.n_joints, p.m_out, out)
}

/// Permutation-invariant sum: messages are ordered by source joint first.
pub fn aggregate_sum(messages: &mut [(usize, Vec<f64>)], width: usize) -> Vec<f64> {
    messages.sort_by_key(|(v, _)| *v);
    let mut agg = vec![0.0; width];
    for (_, m) in messages.iter() {
        for (a, b) in agg.iter_mut().zip(m) {
            *a += b;
        }
    }
    agg
}

/// Gradient of `Σ_u ⟨dy_u, y_u⟩` for `y = layer_forward(x)` w.r.t. weights and inputs.
pub fn layer_backward(
    x: &JointFeatures,
    s: &StructureMatrix,
    p: &GnnLayerParams,
    dy: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_layer(x, s, p)?;
    if dy.len() != p.n_joints * p.m_out {
        return Err(Error::shape("upstream gradient has the wrong length"));
    }
    let mut dw = vec![0.0; p.weights.len()];
    let mut dx = vec![0.0; x.values.len()];
    let sz = p.m_in * p.m_out;
    for u in 0..p.n_joints {
        let g = &dy[u * p.m_out..(u + 1) * p.m_out];
        for v in 0..p.n_joints {
            if !s.get(u, v) {
                continue;
            }
            let b = p.block(u, v);
            let w = p.weight(u, v);
            let xv = x.row(v);
            for r in 0..p.m_out {
                for c in 0..p.m_in {
                    dw[b * sz + r * p.m_in + c] += g[r] * xv[c];
                    dx[v * p.m_in + c] += w[r * p.m_in + c] * g[r];
                }
            }
        }
    }
    Ok((dw, dx))
}
