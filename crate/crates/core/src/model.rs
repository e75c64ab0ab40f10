//! A small end-to-end differentiable pipeline around the context module:
//!
//! features `x` → ContextPose → per-joint affine readout over channels →
//! spatial softmax → expected voxel-center coordinates.
//!
//! The encoder is the identity and the decoder is the readout; gradients
//! are written out by hand for every stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contextpose::{context_backward, context_forward_traced, ContextParams, ContextTrace, GlobalAttention};
use crate::error::{Error, Result};
use crate::grid::{integrate_pose, FeatureVolume, Heatmap, VoxelGrid};
use crate::io::{DType, TensorFile};
use crate::losses::{total_loss, LossConfig};
use crate::parallel::map_range;
use crate::pose::{Pose, Vec3};
use crate::skeleton::{LimbPrior, LimbPriors, SkeletonGraph};

/// Which parts of the context module are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    /// No context module: `y = x`.
    Baseline,
    Full,
    /// Pairwise term off (`P = 1` everywhere).
    GlobalOnly,
    /// Global attention uniform.
    PairwiseOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub grid: VoxelGrid,
    pub graph: SkeletonGraph,
    pub priors: LimbPriors,
    pub mode: ContextMode,
    pub context: ContextParams,
    /// `r_u`, block `u`, width M.
    pub readout_w: Vec<f64>,
    /// `b_u`.
    pub readout_b: Vec<f64>,
}

impl ToyModel {
    /// Readout starts as "channel 0" plus noise; context weights start small.
    pub fn init(
        grid: VoxelGrid,
        graph: SkeletonGraph,
        priors: LimbPriors,
        channels: usize,
        mode: ContextMode,
        seed: u64,
    ) -> Result<Self> {
        let n = graph.n_joints();
        let mut context = ContextParams::new(n, channels)?;
        context.use_global = !matches!(mode, ContextMode::PairwiseOnly);
        context.use_pairwise = !matches!(mode, ContextMode::GlobalOnly);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if mode != ContextMode::Baseline {
            context.w.iter_mut().for_each(|w| *w = rng.random_range(-0.01..0.01));
        }
        let mut readout_w = vec![0.0; n * channels];
        for u in 0..n {
            readout_w[u * channels] = 1.0;
        }
        readout_w.iter_mut().for_each(|w| *w += rng.random_range(-0.01..0.01));
        Ok(ToyModel {
            grid,
            graph,
            priors,
            mode,
            context,
            readout_w,
            readout_b: vec![0.0; n],
        })
    }

    pub fn n_joints(&self) -> usize {
        self.graph.n_joints()
    }

    pub fn channels(&self) -> usize {
        self.context.channels
    }

    /// Trainable parameters in the order `W, d, r, b`. The baseline has no
    /// context parameters.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if self.mode != ContextMode::Baseline {
            out.extend_from_slice(&self.context.w);
            out.extend_from_slice(&self.context.d);
        }
        out.extend_from_slice(&self.readout_w);
        out.extend_from_slice(&self.readout_b);
        out
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params_flat().len() {
            return Err(Error::shape("parameter vector has the wrong length"));
        }
        let mut rest = p;
        let mut take = |dst: &mut Vec<f64>| {
            let (a, b) = rest.split_at(dst.len());
            dst.copy_from_slice(a);
            rest = b;
        };
        if self.mode != ContextMode::Baseline {
            take(&mut self.context.w);
            take(&mut self.context.d);
        }
        take(&mut self.readout_w);
        take(&mut self.readout_b);
        Ok(())
    }

    fn check_input(&self, x: &FeatureVolume) -> Result<()> {
        if x.grid != self.grid || x.n_joints != self.n_joints() || x.channels != self.channels() {
            return Err(Error::shape(format!(
                "input volume {}×{} on {:?} does not match the model",
                x.n_joints, x.channels, x.grid.dims
            )));
        }
        Ok(())
    }
}

/// Intermediates of one forward pass. Consumed by [`backward`].
#[derive(Debug)]
pub struct GradientTape {
    x: FeatureVolume,
    y: Option<FeatureVolume>,
    trace: Option<ContextTrace>,
    heatmap: Heatmap,
    consumed: bool,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub pose: Pose,
    pub heatmap: Heatmap,
    /// `None` for the baseline.
    pub ga: Option<GlobalAttention>,
    pub tape: GradientTape,
}

pub fn forward(m: &ToyModel, x: &FeatureVolume) -> Result<ForwardOutput> {
    m.check_input(x)?;
    let (n, ch, nv) = (m.n_joints(), m.channels(), m.grid.len());
    let (y, trace) = if m.mode == ContextMode::Baseline {
        (None, None)
    } else {
        let (y, trace) = context_forward_traced(x, &m.graph, &m.priors, &m.context)?;
        (Some(y), Some(trace))
    };
    let feats = y.as_ref().unwrap_or(x);
    let mut scores = vec![0.0; n * nv];
    for u in 0..n {
        let r = &m.readout_w[u * ch..(u + 1) * ch];
        for q in 0..nv {
            scores[u * nv + q] = m.readout_b[u] + r.iter().zip(feats.at(u, q)).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let heatmap = Heatmap::from_scores(m.grid.clone(), n, scores)?;
    let pose = integrate_pose(&heatmap)?;
    let ga = trace.as_ref().map(|t| t.ga.clone());
    Ok(ForwardOutput {
        pose,
        heatmap: heatmap.clone(),
        ga,
        tape: GradientTape {
            x: x.clone(),
            y,
            trace,
            heatmap,
            consumed: false,
        },
    })
}

/// Gradient of a scalar loss with respect to the forward outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    pub d_pose: Vec<Vec3>,
    pub d_heatmap: Vec<f64>,
    pub d_ga: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Vec<f64>,
    pub d: Vec<f64>,
    pub readout_w: Vec<f64>,
    pub readout_b: Vec<f64>,
    pub x: Vec<f64>,
}

impl Gradients {
    /// Same order as [`ToyModel::params_flat`].
    pub fn flat(&self, mode: ContextMode) -> Vec<f64> {
        let mut out = Vec::new();
        if mode != ContextMode::Baseline {
            out.extend_from_slice(&self.w);
            out.extend_from_slice(&self.d);
        }
        out.extend_from_slice(&self.readout_w);
        out.extend_from_slice(&self.readout_b);
        out
    }
}

pub fn backward(m: &ToyModel, tape: &mut GradientTape, up: &Upstream) -> Result<Gradients> {
    if tape.consumed {
        return Err(Error::TapeConsumed);
    }
    tape.consumed = true;
    let (n, ch, nv) = (m.n_joints(), m.channels(), m.grid.len());
    if up.d_pose.len() != n || up.d_heatmap.len() != n * nv {
        return Err(Error::shape("upstream gradient does not match the model outputs"));
    }
    let centers = m.grid.centers();
    let hm = &tape.heatmap;
    let feats = tape.y.as_ref().unwrap_or(&tape.x);

    let mut g_rw = vec![0.0; n * ch];
    let mut g_rb = vec![0.0; n];
    let mut gy = vec![0.0; n * nv * ch];
    for u in 0..n {
        let h = hm.joint(u);
        let dp = up.d_pose[u];
        // total derivative in the softmax output, then through the softmax
        let gh: Vec<f64> = (0..nv)
            .map(|q| {
                let c = centers[q];
                up.d_heatmap[u * nv + q] + dp[0] * c[0] + dp[1] * c[1] + dp[2] * c[2]
            })
            .collect();
        let inner: f64 = h.iter().zip(&gh).map(|(a, b)| a * b).sum();
        let r = &m.readout_w[u * ch..(u + 1) * ch];
        for q in 0..nv {
            let gs = h[q] * (gh[q] - inner);
            g_rb[u] += gs;
            let yq = feats.at(u, q);
            for c in 0..ch {
                g_rw[u * ch + c] += gs * yq[c];
                gy[(u * nv + q) * ch + c] = gs * r[c];
            }
        }
    }

    let (w, d, x) = match &tape.trace {
        None => (vec![0.0; m.context.w.len()], vec![0.0; m.context.d.len()], gy),
        Some(trace) => {
            let g = context_backward(&tape.x, &m.context, trace, &gy, up.d_ga.as_deref())?;
            (g.w, g.d, g.x)
        }
    };
    Ok(Gradients {
        w,
        d,
        readout_w: g_rw,
        readout_b: g_rb,
        x,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step in place.
pub fn sgd_adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("Adam buffers disagree in length"));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// A training example: input volume and ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: FeatureVolume,
    pub gt: Pose,
}

/// Loss components of one example or the mean over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub l3d: f64,
    /// Reported even when λ = 0; zero when global attention is off.
    pub lga: f64,
}

/// Loss and parameter gradient of one example.
pub fn example_gradient(m: &ToyModel, ex: &Example, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    example_gradient_parts(m, ex, cfg).map(|(l, g)| (l.total, g))
}

pub fn example_gradient_parts(m: &ToyModel, ex: &Example, cfg: &LossConfig) -> Result<(StepLoss, Vec<f64>)> {
    let mut out = forward(m, &ex.x)?;
    let ga = if m.context.use_global { out.ga.as_ref() } else { None };
    let loss = total_loss(&out.pose, &ex.gt, &out.heatmap, ga, cfg)?;
    let up = Upstream {
        d_pose: loss.pose.d_pose,
        d_heatmap: loss.pose.d_heatmap,
        d_ga: ga.map(|_| loss.d_ga),
    };
    let g = backward(m, &mut out.tape, &up)?;
    let parts = StepLoss { total: loss.value, l3d: loss.pose.value, lga: loss.ga_value };
    Ok((parts, g.flat(m.mode)))
}

/// Mean loss and gradient over a batch, reduced in example order, then one Adam step.
pub fn train_step(
    m: &mut ToyModel,
    state: &mut AdamState,
    batch: &[Example],
    loss_cfg: &LossConfig,
    adam: &AdamConfig,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per = map_range(batch.len(), |i| example_gradient_parts(m, &batch[i], loss_cfg));
    let mut grad = vec![0.0; m.params_flat().len()];
    let mut loss = StepLoss::default();
    for r in per {
        let (l, g) = r?;
        loss.total += l.total;
        loss.l3d += l.l3d;
        loss.lga += l.lga;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    let mut p = m.params_flat();
    sgd_adam_step(&mut p, &grad, state, adam)?;
    m.set_params_flat(&p)?;
    Ok(StepLoss { total: loss.total * inv, l3d: loss.l3d * inv, lga: loss.lga * inv })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    mode: ContextMode,
    n_joints: usize,
    channels: usize,
    dims: [usize; 3],
    origin: Vec3,
    spacing: Vec3,
    edges: Vec<[usize; 2]>,
    priors: Vec<(usize, usize, f64, f64)>,
    alpha: f64,
    eps: f64,
    adam_t: u64,
    seed: u64,
    epoch: u64,
}

/// Model, optimizer state and bookkeeping; stored as f64 so resuming is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyModel,
    pub adam: AdamState,
    pub seed: u64,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn to_tensors(&self) -> TensorFile {
        let m = &self.model;
        let meta = CheckpointMeta {
            kind: "toy-model".into(),
            mode: m.mode,
            n_joints: m.n_joints(),
            channels: m.channels(),
            dims: m.grid.dims,
            origin: m.grid.origin,
            spacing: m.grid.spacing,
            edges: m.graph.edges().iter().map(|&(a, b)| [a, b]).collect(),
            priors: m.priors.iter().map(|((a, b), p)| (a, b, p.mu, p.sigma)).collect(),
            alpha: m.context.alpha,
            eps: m.context.eps,
            adam_t: self.adam.t,
            seed: self.seed,
            epoch: self.epoch,
        };
        let (n, ch) = (m.n_joints(), m.channels());
        let mut tf = TensorFile {
            meta: serde_json::to_value(meta).expect("meta serializes"),
            tensors: Vec::new(),
        };
        tf.push("context.w", vec![n, n, ch, ch], DType::F64, &m.context.w);
        tf.push("context.d", vec![n, ch], DType::F64, &m.context.d);
        tf.push("readout.w", vec![n, ch], DType::F64, &m.readout_w);
        tf.push("readout.b", vec![n], DType::F64, &m.readout_b);
        tf.push("adam.m", vec![self.adam.m.len()], DType::F64, &self.adam.m);
        tf.push("adam.v", vec![self.adam.v.len()], DType::F64, &self.adam.v);
        tf
    }

    pub fn from_tensors(tf: &TensorFile) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(tf.meta.clone())?;
        if meta.kind != "toy-model" {
            return Err(Error::InvalidConfig(format!("not a model checkpoint: {}", meta.kind)));
        }
        let edges: Vec<(usize, usize)> = meta.edges.iter().map(|e| (e[0], e[1])).collect();
        let graph = SkeletonGraph::new(meta.n_joints, &edges)?;
        let mut priors = LimbPriors::new();
        for &(a, b, mu, sigma) in &meta.priors {
            priors.insert(a, b, LimbPrior { mu, sigma });
        }
        let grid = VoxelGrid::new(meta.dims, meta.origin, meta.spacing)?;
        let mut model = ToyModel::init(grid, graph, priors, meta.channels, meta.mode, 0)?;
        model.context.alpha = meta.alpha;
        model.context.eps = meta.eps;
        let get = |name: &str, len: usize| -> Result<Vec<f64>> {
            let t = tf
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks `{name}`")))?;
            if t.data.len() != len {
                return Err(Error::shape(format!("checkpoint tensor `{name}` has the wrong size")));
            }
            Ok(t.data.clone())
        };
        model.context.w = get("context.w", model.context.w.len())?;
        model.context.d = get("context.d", model.context.d.len())?;
        model.readout_w = get("readout.w", model.readout_w.len())?;
        model.readout_b = get("readout.b", model.readout_b.len())?;
        let np = model.params_flat().len();
        let adam = AdamState {
            m: get("adam.m", np)?,
            v: get("adam.v", np)?,
            t: meta.adam_t,
        };
        Ok(Checkpoint {
            model,
            adam,
            seed: meta.seed,
            epoch: meta.epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64, mode: ContextMode) -> (ToyModel, FeatureVolume) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = VoxelGrid::new([2, 2, 2], [0.0; 3], [10.0, 12.0, 9.0]).unwrap();
        let g = SkeletonGraph::new(2, &[(0, 1)]).unwrap();
        let mut pr = LimbPriors::new();
        pr.insert(0, 1, LimbPrior { mu: rng.random_range(8.0..16.0), sigma: rng.random_range(0.05..0.3) });
        let mut m = ToyModel::init(grid.clone(), g, pr, 2, mode, seed).unwrap();
        m.context.alpha = rng.random_range(5.0..50.0);
        m.context.w.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        m.context.d.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        m.readout_w.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        m.readout_b.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let x = FeatureVolume::new(grid, 2, 2, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (m, x)
    }

    struct Probe {
        a: Vec<Vec3>,
        b: Vec<f64>,
        c: Vec<f64>,
    }

    impl Probe {
        fn random(rng: &mut impl Rng, n: usize, nv: usize) -> Self {
            Probe {
                a: (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
                b: (0..n * nv).map(|_| rng.random_range(-1.0..1.0)).collect(),
                c: (0..n * nv).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        }

        fn eval(&self, m: &ToyModel, x: &FeatureVolume) -> f64 {
            let out = forward(m, x).unwrap();
            let mut s = 0.0;
            for (p, a) in out.pose.joints.iter().zip(&self.a) {
                s += p[0] * a[0] + p[1] * a[1] + p[2] * a[2];
            }
            s += out.heatmap.values.iter().zip(&self.b).map(|(h, b)| h * b).sum::<f64>();
            if let Some(ga) = &out.ga {
                s += ga.values.iter().zip(&self.c).map(|(g, c)| g * c).sum::<f64>();
            }
            s
        }

        fn upstream(&self) -> Upstream {
            Upstream {
                d_pose: self.a.clone(),
                d_heatmap: self.b.clone(),
                d_ga: Some(self.c.clone()),
            }
        }
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
    }

    #[test]
    fn gradient_check_many_seeds() {
        for seed in 0..50 {
            let mode = [ContextMode::Full, ContextMode::GlobalOnly, ContextMode::PairwiseOnly][seed as usize % 3];
            let (m, x) = tiny_model(seed, mode);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let probe = Probe::random(&mut rng, 2, 8);
            let mut out = forward(&m, &x).unwrap();
            let g = backward(&m, &mut out.tape, &probe.upstream()).unwrap();
            let analytic = g.flat(m.mode);
            let theta = m.params_flat();
            for i in 0..theta.len() {
                let h = 1e-4 * theta[i].abs().max(1.0);
                let (mut a, mut b) = (m.clone(), m.clone());
                let mut t = theta.clone();
                t[i] += h;
                a.set_params_flat(&t).unwrap();
                t[i] -= 2.0 * h;
                b.set_params_flat(&t).unwrap();
                let num = (probe.eval(&a, &x) - probe.eval(&b, &x)) / (2.0 * h);
                assert!(rel_err(analytic[i], num) < 1e-5, "seed {seed} param {i}: {} vs {num}", analytic[i]);
            }
            for i in 0..x.values.len() {
                let h = 1e-4 * x.values[i].abs().max(1.0);
                let (mut a, mut b) = (x.clone(), x.clone());
                a.values[i] += h;
                b.values[i] -= h;
                let num = (probe.eval(&m, &a) - probe.eval(&m, &b)) / (2.0 * h);
                assert!(rel_err(g.x[i], num) < 1e-5, "seed {seed} input {i}");
            }
        }
    }

    #[test]
    fn baseline_gradients() {
        let (m, x) = tiny_model(3, ContextMode::Baseline);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe = Probe::random(&mut rng, 2, 8);
        let mut out = forward(&m, &x).unwrap();
        assert!(out.ga.is_none());
        let g = backward(&m, &mut out.tape, &probe.upstream()).unwrap();
        let theta = m.params_flat();
        for i in 0..theta.len() {
            let (mut a, mut b) = (m.clone(), m.clone());
            let mut t = theta.clone();
            t[i] += 1e-4;
            a.set_params_flat(&t).unwrap();
            t[i] -= 2e-4;
            b.set_params_flat(&t).unwrap();
            let num = (probe.eval(&a, &x) - probe.eval(&b, &x)) / 2e-4;
            assert!(rel_err(g.flat(m.mode)[i], num) < 1e-5);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient_and_tape_is_single_use() {
        let (m, x) = tiny_model(1, ContextMode::Full);
        let mut out = forward(&m, &x).unwrap();
        let up = Upstream {
            d_pose: vec![[0.0; 3]; 2],
            d_heatmap: vec![0.0; 16],
            d_ga: Some(vec![0.0; 16]),
        };
        let g = backward(&m, &mut out.tape, &up).unwrap();
        assert!(g.flat(m.mode).iter().chain(&g.x).all(|&v| v == 0.0));
        assert!(matches!(backward(&m, &mut out.tape, &up), Err(Error::TapeConsumed)));
    }

    #[test]
    fn masked_upstream_leaves_other_joint_untouched() {
        // only joint 0's outputs matter, so weights into joint 1 get nothing
        let (m, x) = tiny_model(2, ContextMode::Full);
        let mut out = forward(&m, &x).unwrap();
        let mut up = Upstream {
            d_pose: vec![[0.3, -0.2, 0.5], [0.0; 3]],
            d_heatmap: vec![0.0; 16],
            d_ga: None,
        };
        up.d_heatmap[3] = 1.0;
        let g = backward(&m, &mut out.tape, &up).unwrap();
        for v in 0..2 {
            let b = (2 + v) * 4;
            assert!(g.w[b..b + 4].iter().all(|&w| w == 0.0));
        }
        assert!(g.readout_w[2..].iter().all(|&w| w == 0.0) && g.readout_b[1] == 0.0);
        assert!(g.w[..8].iter().any(|&w| w != 0.0));
    }

    #[test]
    fn gradient_reaches_global_attention_parameters() {
        for seed in 0..10 {
            let (m, x) = tiny_model(100 + seed, ContextMode::Full);
            let gt = Pose::new(vec![[3.0, 4.0, 5.0], [15.0, 20.0, 12.0]]);
            let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
            let (_, g) = example_gradient(&m, &Example { x, gt }, &cfg).unwrap();
            let nw = m.context.w.len();
            assert!(g[nw..nw + m.context.d.len()].iter().any(|&d| d != 0.0));
        }
    }

    #[test]
    fn bypass_and_symmetry() {
        let grid = VoxelGrid::cube(3, 10.0, [0.0; 3]).unwrap();
        let g = SkeletonGraph::new(2, &[(0, 1)]).unwrap();
        let mut pr = LimbPriors::new();
        pr.insert(0, 1, LimbPrior { mu: 10.0, sigma: 1.0 });
        let mut m = ToyModel::init(grid.clone(), g, pr, 2, ContextMode::Full, 0).unwrap();
        m.context.w.iter_mut().for_each(|w| *w = 0.0);
        m.readout_w = vec![1.0, 0.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = FeatureVolume::new(grid.clone(), 2, 2, (0..108).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let out = forward(&m, &x).unwrap();
        let ch0: Vec<f64> = (0..2).flat_map(|u| (0..27).map(move |q| (u, q))).map(|(u, q)| x.at(u, q)[0]).collect();
        let direct = integrate_pose(&Heatmap::from_scores(grid.clone(), 2, ch0).unwrap()).unwrap();
        assert_eq!(out.pose, direct);

        // radially symmetric input around the grid centre
        let mut sym = FeatureVolume::zeros(grid.clone(), 2, 2);
        for u in 0..2 {
            for (q, c) in grid.centers().iter().enumerate() {
                let r = crate::pose::norm(*c);
                sym.at_mut(u, q).copy_from_slice(&[-r / 10.0, 0.1 * r]);
            }
        }
        m.context.w.iter_mut().enumerate().for_each(|(i, w)| *w = 0.1 * (i % 3) as f64);
        let p = forward(&m, &sym).unwrap().pose;
        for j in &p.joints {
            assert!(j.iter().all(|c| c.abs() < 1e-9), "{j:?}");
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let (m, x) = tiny_model(9, ContextMode::Full);
        let gt = Pose::new(vec![[3.0, 4.0, 5.0], [15.0, 20.0, 12.0]]);
        let ex = Example { x, gt };
        let cfg = LossConfig::default();
        assert_eq!(example_gradient(&m, &ex, &cfg).unwrap(), example_gradient(&m, &ex, &cfg).unwrap());
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState { m: vec![0.5, -0.1], v: vec![0.2, 0.3], t: 4 };
        sgd_adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(st.m, vec![0.45, -0.1 * 0.9]);
        assert_eq!(st.v, vec![0.2 * 0.999, 0.3 * 0.999]);
        assert_ne!(p, vec![1.0, -2.0]); // leftover momentum still moves

        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        sgd_adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        // first step: m̂ = g, v̂ = g², Δ = -lr g / (|g| + eps)
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        sgd_adam_step(&mut p, &[0.5, -3.0], &mut st, &cfg).unwrap();
        assert!((p[0] + 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 1e-3 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);

        // constant gradient: step size tends to lr
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..10_000 {
            let before = p[0];
            sgd_adam_step(&mut p, &[0.7], &mut st, &cfg).unwrap();
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-5);
    }

    #[test]
    fn checkpoint_roundtrip_resumes_exactly() {
        let (mut m, x) = tiny_model(4, ContextMode::Full);
        let ex = vec![Example { x, gt: Pose::new(vec![[3.0, 4.0, 5.0], [15.0, 20.0, 12.0]]) }];
        let cfg = LossConfig::default();
        let adam = AdamConfig::default();
        let mut st = AdamState::new(m.params_flat().len());
        train_step(&mut m, &mut st, &ex, &cfg, &adam).unwrap();
        let ck = Checkpoint { model: m.clone(), adam: st.clone(), seed: 4, epoch: 1 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.to_tensors().write(&path).unwrap();
        let back = Checkpoint::from_tensors(&TensorFile::read(&path).unwrap()).unwrap();
        assert_eq!(back, ck);
        let (mut m2, mut st2) = (back.model, back.adam);
        let a = train_step(&mut m, &mut st, &ex, &cfg, &adam).unwrap();
        let b = train_step(&mut m2, &mut st2, &ex, &cfg, &adam).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, m2);
    }
}
