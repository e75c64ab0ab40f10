//! ContextPose attention: global attention (GA), pairwise attention (PA)
//! with limb-length priors, and the residual feature update.
//!
//! For a connected pair `(u, v)` the message at voxel `q` is
//! `W_uv Σ_k G_vk K(q-k) x_vk / Z_q` with `Z_q = Σ_k G_vk K(q-k)`, where `K`
//! is the unnormalized Gaussian of the distance error. Every other pair,
//! including `v = u`, uses `P = 1` and the message is `W_uv Σ_k G_vk x_vk`.
//!
//! All lengths are in millimetres and `alpha` is dimensionless.
//!
//! On a regular grid `‖q-k‖` depends only on the index offset, so `K` is
//! tabulated once per pair over offset space. For a fixed `q` and fixed
//! `(kx, ky)`, the entries for all `kz` form one contiguous slice of that
//! table, which is what the inner loops walk.

use crate::error::{Error, Result};
use crate::grid::{softmax_in_place, FeatureVolume, VoxelGrid};
use crate::parallel::{map_range, CompensatedSum};
use crate::skeleton::{LimbPrior, LimbPriors, SkeletonGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct ContextParams {
    pub n_joints: usize,
    pub channels: usize,
    /// `W_uv` is `channels × channels`, row-major, block `u * N + v`.
    pub w: Vec<f64>,
    /// `d_v`, block `v`.
    pub d: Vec<f64>,
    pub alpha: f64,
    pub eps: f64,
    /// Off: `G` is uniform over the grid.
    pub use_global: bool,
    /// Off: every pair uses `P = 1`.
    pub use_pairwise: bool,
}

impl ContextParams {
    pub fn new(n_joints: usize, channels: usize) -> Result<Self> {
        if channels == 0 || n_joints == 0 {
            return Err(Error::shape("context module needs at least one joint and one channel"));
        }
        Ok(ContextParams {
            n_joints,
            channels,
            w: vec![0.0; n_joints * n_joints * channels * channels],
            d: vec![0.0; n_joints * channels],
            alpha: 1500.0,
            eps: 1e-8,
            use_global: true,
            use_pairwise: true,
        })
    }

    pub fn w_block(&self, u: usize, v: usize) -> &[f64] {
        let sz = self.channels * self.channels;
        let b = u * self.n_joints + v;
        &self.w[b * sz..(b + 1) * sz]
    }

    pub fn w_block_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let sz = self.channels * self.channels;
        let b = u * self.n_joints + v;
        &mut self.w[b * sz..(b + 1) * sz]
    }

    pub fn d_vec(&self, v: usize) -> &[f64] {
        &self.d[v * self.channels..(v + 1) * self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_joints, self.channels);
        if m == 0 || self.w.len() != n * n * m * m || self.d.len() != n * m {
            return Err(Error::shape("context parameter buffers do not match N and M"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha and eps must be positive (alpha={}, eps={})",
                self.alpha, self.eps
            )));
        }
        if self.w.iter().chain(&self.d).any(|v| !v.is_finite()) {
            return Err(Error::shape("context parameters must be finite"));
        }
        Ok(())
    }

    fn check_input(&self, x: &FeatureVolume) -> Result<()> {
        self.validate()?;
        if x.n_joints != self.n_joints || x.channels != self.channels {
            return Err(Error::shape(format!(
                "features are {}×{}, parameters expect {}×{}",
                x.n_joints, x.channels, self.n_joints, self.channels
            )));
        }
        Ok(())
    }
}

/// `G_vk`, `values[v * |Ω| + k]`; each joint's row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAttention {
    pub grid: VoxelGrid,
    pub n_joints: usize,
    pub values: Vec<f64>,
}

impl GlobalAttention {
    pub fn uniform(grid: VoxelGrid, n_joints: usize) -> Self {
        let n = grid.len();
        GlobalAttention {
            values: vec![1.0 / n as f64; n * n_joints],
            grid,
            n_joints,
        }
    }

    pub fn joint(&self, v: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[v * n..(v + 1) * n]
    }

    /// One channel per joint, for writing with [`crate::io::write_volume`].
    pub fn to_volume(&self) -> FeatureVolume {
        FeatureVolume {
            grid: self.grid.clone(),
            n_joints: self.n_joints,
            channels: 1,
            values: self.values.clone(),
        }
    }
}

/// Per-joint softmax over voxels of `d_v · x_vk`.
pub fn global_attention(x: &FeatureVolume, d: &[f64]) -> Result<GlobalAttention> {
    let (n, m, nv) = (x.n_joints, x.channels, x.grid.len());
    if d.len() != n * m {
        return Err(Error::shape(format!("d has {} entries, expected {}", d.len(), n * m)));
    }
    let mut values = vec![0.0; n * nv];
    for v in 0..n {
        let dv = &d[v * m..(v + 1) * m];
        let row = &mut values[v * nv..(v + 1) * nv];
        for (k, r) in row.iter_mut().enumerate() {
            *r = dv.iter().zip(x.at(v, k)).map(|(a, b)| a * b).sum();
        }
        softmax_in_place(row);
    }
    Ok(GlobalAttention {
        grid: x.grid.clone(),
        n_joints: n,
        values,
    })
}

/// `exp(-(dist - μ)² / (2ασ² + ε))`.
#[inline]
pub fn limb_kernel(dist: f64, prior: LimbPrior, alpha: f64, eps: f64) -> f64 {
    let e = dist - prior.mu;
    (-(e * e) / (2.0 * alpha * prior.sigma * prior.sigma + eps)).exp()
}

/// Unnormalized kernel over index offsets. Entry for offset `(a, b, c)`
/// sits at `((a + Dx-1) * SY + (b + Dy-1)) * SZ + (c + Dz-1)`, `S* = 2D*-1`.
#[derive(Debug, Clone, PartialEq)]
struct OffsetTable {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl OffsetTable {
    fn new(grid: &VoxelGrid, prior: LimbPrior, alpha: f64, eps: f64) -> Self {
        let [dx, dy, dz] = grid.dims;
        let (sx, sy, sz) = (2 * dx - 1, 2 * dy - 1, 2 * dz - 1);
        let mut values = Vec::with_capacity(sx * sy * sz);
        for a in 0..sx {
            let ox = (a as f64 - (dx - 1) as f64) * grid.spacing[0];
            for b in 0..sy {
                let oy = (b as f64 - (dy - 1) as f64) * grid.spacing[1];
                for c in 0..sz {
                    let oz = (c as f64 - (dz - 1) as f64) * grid.spacing[2];
                    let dist = (ox * ox + oy * oy + oz * oz).sqrt();
                    values.push(limb_kernel(dist, prior, alpha, eps));
                }
            }
        }
        OffsetTable {
            dims: grid.dims,
            values,
        }
    }

    /// Kernel row for query `q` over `k` with fixed `(kx, ky)`, all `kz`.
    #[inline]
    fn run(&self, q: [usize; 3], kx: usize, ky: usize) -> &[f64] {
        let [dx, dy, dz] = self.dims;
        let (sy, sz) = (2 * dy - 1, 2 * dz - 1);
        let a = kx + dx - 1 - q[0];
        let b = ky + dy - 1 - q[1];
        let start = (a * sy + b) * sz + (dz - 1 - q[2]);
        &self.values[start..start + dz]
    }

    #[inline]
    fn at(&self, q: [usize; 3], k: [usize; 3]) -> f64 {
        self.run(q, k[0], k[1])[k[2]]
    }
}

/// Pairwise attention `P_{u,v,q,k}` for one ordered pair. Connected pairs
/// carry the offset table and the GA-weighted normalizer `Z_q`; the
/// non-connected rule is the all-ones kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseKernel {
    pub u: usize,
    pub v: usize,
    grid: VoxelGrid,
    table: Option<OffsetTable>,
    z: Vec<f64>,
}

impl PairwiseKernel {
    pub fn is_ones(&self) -> bool {
        self.table.is_none()
    }

    /// `K(q-k)` before normalization (1 for the non-connected rule).
    pub fn unnormalized(&self, q: usize, k: usize) -> f64 {
        match &self.table {
            Some(t) => t.at(self.grid.unflat(q), self.grid.unflat(k)),
            None => 1.0,
        }
    }

    pub fn normalizer(&self, q: usize) -> f64 {
        if self.is_ones() {
            1.0
        } else {
            self.z[q]
        }
    }

    pub fn value(&self, q: usize, k: usize) -> f64 {
        self.unnormalized(q, k) / self.normalizer(q)
    }

    /// `P_{u,v,q,·}` as a dense row.
    pub fn row(&self, q: usize) -> Vec<f64> {
        (0..self.grid.len()).map(|k| self.value(q, k)).collect()
    }
}

/// Pairwise attention of `u` on `v` under `prior`, normalized against `G_v`.
pub fn pairwise_kernel(
    grid: &VoxelGrid,
    prior: LimbPrior,
    ga: &GlobalAttention,
    (u, v): (usize, usize),
    params: &ContextParams,
) -> Result<PairwiseKernel> {
    if ga.grid != *grid || v >= ga.n_joints {
        return Err(Error::shape("global attention does not match the grid or joint"));
    }
    if !(prior.sigma >= 0.0) {
        return Err(Error::NonPositiveSigma(prior.sigma));
    }
    let table = OffsetTable::new(grid, prior, params.alpha, params.eps);
    let gv = ga.joint(v);
    let [dx, dy, dz] = grid.dims;
    let z = map_range(grid.len(), |q| {
        let qi = grid.unflat(q);
        let mut acc = CompensatedSum::default();
        for kx in 0..dx {
            for ky in 0..dy {
                let run = table.run(qi, kx, ky);
                let g = &gv[(kx * dy + ky) * dz..(kx * dy + ky + 1) * dz];
                for (a, b) in g.iter().zip(run) {
                    acc.add(a * b);
                }
            }
        }
        acc.value()
    });
    if let Some(q) = z.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::DegenerateNormalizer { u, v, q });
    }
    Ok(PairwiseKernel {
        u,
        v,
        grid: grid.clone(),
        table: Some(table),
        z,
    })
}

/// `P ≡ 1` for a pair not joined by a limb.
pub fn non_connected_rule(u: usize, v: usize, g: &SkeletonGraph, grid: &VoxelGrid) -> Result<PairwiseKernel> {
    if g.has_edge(u, v) {
        return Err(Error::InvalidEdge(u, v, g.n_joints()));
    }
    Ok(ones(u, v, grid))
}

fn ones(u: usize, v: usize, grid: &VoxelGrid) -> PairwiseKernel {
    PairwiseKernel {
        u,
        v,
        grid: grid.clone(),
        table: None,
        z: Vec::new(),
    }
}

/// Kernels for every ordered pair, block `u * N + v`.
pub fn pairwise_kernels(
    grid: &VoxelGrid,
    g: &SkeletonGraph,
    priors: &LimbPriors,
    ga: &GlobalAttention,
    params: &ContextParams,
) -> Result<Vec<PairwiseKernel>> {
    let n = g.n_joints();
    if params.use_pairwise {
        priors.covers(g)?;
    }
    map_range(n * n, |b| {
        let (u, v) = (b / n, b % n);
        match priors.get(u, v) {
            Some(prior) if params.use_pairwise && g.has_edge(u, v) => pairwise_kernel(grid, prior, ga, (u, v), params),
            _ => Ok(ones(u, v, grid)),
        }
    })
    .into_iter()
    .collect()
}

/// `a_q = Σ_k G_vk P_qk x_vk` for one pair: `|Ω| × M` values, or just `M`
/// when `P ≡ 1` (the mean does not depend on `q`).
fn pair_mean(x: &FeatureVolume, ga: &GlobalAttention, pk: &PairwiseKernel) -> Vec<f64> {
    let (m, nv) = (x.channels, x.grid.len());
    let gv = ga.joint(pk.v);
    let xv = x.joint(pk.v);
    let Some(table) = &pk.table else {
        let mut a = vec![0.0; m];
        for (k, &g) in gv.iter().enumerate() {
            for (ac, xc) in a.iter_mut().zip(&xv[k * m..(k + 1) * m]) {
                *ac += g * xc;
            }
        }
        return a;
    };
    let [dx, dy, dz] = x.grid.dims;
    let rows = map_range(nv, |q| {
        let qi = x.grid.unflat(q);
        let mut a = vec![0.0; m];
        for kx in 0..dx {
            for ky in 0..dy {
                let run = table.run(qi, kx, ky);
                let base = (kx * dy + ky) * dz;
                for (kz, &kern) in run.iter().enumerate() {
                    let w = gv[base + kz] * kern;
                    let xk = &xv[(base + kz) * m..(base + kz + 1) * m];
                    for (ac, xc) in a.iter_mut().zip(xk) {
                        *ac += w * xc;
                    }
                }
            }
        }
        let z = pk.z[q];
        a.iter_mut().for_each(|c| *c /= z);
        a
    });
    rows.concat()
}

#[inline]
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let m = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += w[r * m..(r + 1) * m].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ContextTrace {
    pub ga: GlobalAttention,
    pub kernels: Vec<PairwiseKernel>,
    /// Per-pair attended means, block `u * N + v` (see `pair_mean`).
    means: Vec<Vec<f64>>,
}

fn check_kernels(x: &FeatureVolume, ga: &GlobalAttention, pk: &[PairwiseKernel]) -> Result<()> {
    let n = x.n_joints;
    if ga.grid != x.grid || ga.n_joints != n || pk.len() != n * n {
        return Err(Error::shape("attention does not match the feature volume"));
    }
    for (b, k) in pk.iter().enumerate() {
        if (k.u, k.v) != (b / n, b % n) || k.grid != x.grid {
            return Err(Error::shape(format!("kernel slot {b} holds pair ({}, {})", k.u, k.v)));
        }
    }
    Ok(())
}

fn update_traced(
    x: &FeatureVolume,
    ga: &GlobalAttention,
    pk: &[PairwiseKernel],
    params: &ContextParams,
) -> Result<(FeatureVolume, Vec<Vec<f64>>)> {
    params.check_input(x)?;
    check_kernels(x, ga, pk)?;
    let (n, m, nv) = (x.n_joints, x.channels, x.grid.len());
    let means: Vec<Vec<f64>> = pk.iter().map(|k| pair_mean(x, ga, k)).collect();
    let out = map_range(n, |u| {
        let mut y = vec![0.0; nv * m];
        let mut agg = vec![0.0; m];
        for q in 0..nv {
            agg.iter_mut().for_each(|a| *a = 0.0);
            for v in 0..n {
                let mean = &means[u * n + v];
                let a = if mean.len() == m { &mean[..] } else { &mean[q * m..(q + 1) * m] };
                matvec_acc(params.w_block(u, v), a, &mut agg);
            }
            for ((o, xc), ac) in y[q * m..(q + 1) * m].iter_mut().zip(x.at(u, q)).zip(&agg) {
                *o = xc + ac;
            }
        }
        y
    });
    let y = FeatureVolume::new(x.grid.clone(), n, m, out.concat())?;
    Ok((y, means))
}

/// `y_uq = x_uq + Σ_v Σ_k G_vk P_uvqk W_uv x_vk`, summed over all joints `v`.
pub fn context_update(
    x: &FeatureVolume,
    ga: &GlobalAttention,
    pk: &[PairwiseKernel],
    params: &ContextParams,
) -> Result<FeatureVolume> {
    update_traced(x, ga, pk, params).map(|(y, _)| y)
}

fn attention_for(x: &FeatureVolume, params: &ContextParams) -> Result<GlobalAttention> {
    if params.use_global {
        global_attention(x, &params.d)
    } else {
        Ok(GlobalAttention::uniform(x.grid.clone(), x.n_joints))
    }
}

/// GA → PA for each pair → residual update. Also returns GA.
pub fn context_forward(
    x: &FeatureVolume,
    g: &SkeletonGraph,
    priors: &LimbPriors,
    params: &ContextParams,
) -> Result<(FeatureVolume, GlobalAttention)> {
    let (y, trace) = context_forward_traced(x, g, priors, params)?;
    Ok((y, trace.ga))
}

pub fn context_forward_traced(
    x: &FeatureVolume,
    g: &SkeletonGraph,
    priors: &LimbPriors,
    params: &ContextParams,
) -> Result<(FeatureVolume, ContextTrace)> {
    params.check_input(x)?;
    if g.n_joints() != x.n_joints {
        return Err(Error::shape("skeleton and features disagree on N"));
    }
    let ga = attention_for(x, params)?;
    let kernels = pairwise_kernels(&x.grid, g, priors, &ga, params)?;
    let (y, means) = update_traced(x, &ga, &kernels, params)?;
    Ok((y, ContextTrace { ga, kernels, means }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextGrads {
    pub w: Vec<f64>,
    pub d: Vec<f64>,
    pub x: Vec<f64>,
}

/// Reverse pass of [`context_forward_traced`]. `gy` is the gradient with
/// respect to the output volume and `g_ga`, if given, the gradient with
/// respect to the returned global attention (e.g. from the GA loss).
pub fn context_backward(
    x: &FeatureVolume,
    params: &ContextParams,
    trace: &ContextTrace,
    gy: &[f64],
    g_ga: Option<&[f64]>,
) -> Result<ContextGrads> {
    let (n, m, nv) = (x.n_joints, x.channels, x.grid.len());
    if gy.len() != x.values.len() || g_ga.is_some_and(|g| g.len() != n * nv) {
        return Err(Error::shape("upstream gradient has the wrong length"));
    }
    let ga = &trace.ga;
    let mm = m * m;

    // Per ordered pair: dW block, dG_v row, dx_v block.
    let parts = map_range(n * n, |b| {
        let (u, v) = (b / n, b % n);
        let pk = &trace.kernels[b];
        let mean = &trace.means[b];
        let w = params.w_block(u, v);
        let gyu = &gy[u * nv * m..(u + 1) * nv * m];
        let gv = ga.joint(v);
        let xv = x.joint(v);
        let mut dw = vec![0.0; mm];
        let mut dg = vec![0.0; nv];
        let mut dx = vec![0.0; nv * m];
        // b_q = W^T gy_uq
        let mut bq = vec![0.0; nv * m];
        for q in 0..nv {
            let g = &gyu[q * m..(q + 1) * m];
            let a = if pk.is_ones() { &mean[..] } else { &mean[q * m..(q + 1) * m] };
            for r in 0..m {
                for c in 0..m {
                    dw[r * m + c] += g[r] * a[c];
                    bq[q * m + c] += w[r * m + c] * g[r];
                }
            }
        }
        match &pk.table {
            None => {
                let mut total = vec![0.0; m];
                for q in 0..nv {
                    for c in 0..m {
                        total[c] += bq[q * m + c];
                    }
                }
                for k in 0..nv {
                    let xk = &xv[k * m..(k + 1) * m];
                    dg[k] = total.iter().zip(xk).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        dx[k * m + c] = gv[k] * total[c];
                    }
                }
            }
            Some(table) => {
                // s_q = b_q / Z_q, t_q = b_q · a_q / Z_q; the kernel is
                // symmetric so K_qj is read with j as the query.
                let mut s = vec![0.0; nv * m];
                let mut t = vec![0.0; nv];
                for q in 0..nv {
                    let z = pk.z[q];
                    let a = &mean[q * m..(q + 1) * m];
                    let bqq = &bq[q * m..(q + 1) * m];
                    t[q] = bqq.iter().zip(a).map(|(p, r)| p * r).sum::<f64>() / z;
                    for c in 0..m {
                        s[q * m + c] = bqq[c] / z;
                    }
                }
                let [ddx, ddy, ddz] = x.grid.dims;
                for j in 0..nv {
                    let ji = x.grid.unflat(j);
                    let mut cj = vec![0.0; m];
                    let mut ej = 0.0;
                    for qx in 0..ddx {
                        for qy in 0..ddy {
                            let run = table.run(ji, qx, qy);
                            let base = (qx * ddy + qy) * ddz;
                            for (qz, &kern) in run.iter().enumerate() {
                                let q = base + qz;
                                ej += kern * t[q];
                                for c in 0..m {
                                    cj[c] += kern * s[q * m + c];
                                }
                            }
                        }
                    }
                    let xj = &xv[j * m..(j + 1) * m];
                    dg[j] = cj.iter().zip(xj).map(|(a, b)| a * b).sum::<f64>() - ej;
                    for c in 0..m {
                        dx[j * m + c] = gv[j] * cj[c];
                    }
                }
            }
        }
        (dw, dg, dx)
    });

    let mut gw = vec![0.0; n * n * mm];
    let mut gga = match g_ga {
        Some(g) => g.to_vec(),
        None => vec![0.0; n * nv],
    };
    let mut gx = gy.to_vec();
    for (b, (dw, dg, dx)) in parts.into_iter().enumerate() {
        let v = b % n;
        gw[b * mm..(b + 1) * mm].copy_from_slice(&dw);
        for (a, d) in gga[v * nv..(v + 1) * nv].iter_mut().zip(&dg) {
            *a += d;
        }
        for (a, d) in gx[v * nv * m..(v + 1) * nv * m].iter_mut().zip(&dx) {
            *a += d;
        }
    }

    // Softmax backward into d and x.
    let mut gd = vec![0.0; n * m];
    if params.use_global {
        for v in 0..n {
            let gv = ga.joint(v);
            let gg = &gga[v * nv..(v + 1) * nv];
            let inner: f64 = gv.iter().zip(gg).map(|(a, b)| a * b).sum();
            let dv = params.d_vec(v);
            for k in 0..nv {
                let gs = gv[k] * (gg[k] - inner);
                let xk = x.at(v, k);
                for c in 0..m {
                    gd[v * m + c] += gs * xk[c];
                    gx[(v * nv + k) * m + c] += gs * dv[c];
                }
            }
        }
    }
    Ok(ContextGrads { w: gw, d: gd, x: gx })
}
