//! Training and prediction drivers shared by the subcommands.

use std::fmt::Write as _;
use std::path::Path;

use ctxpose::gnn::{build_structure, layer_backward, layer_forward, GnnLayerParams, JointFeatures, StructureMatrix, Variant};
use ctxpose::io::{DType, TensorFile};
use ctxpose::losses::LossConfig;
use ctxpose::metrics::{evaluate, MetricReport, PckConfig};
use ctxpose::model::{
    forward, sgd_adam_step, train_step, AdamState, Checkpoint, ContextMode, Example, StepLoss, ToyModel,
};
use ctxpose::parallel::map_range;
use ctxpose::pose::{add, scale, sub};
use ctxpose::synthgen::{Dataset, Split};
use ctxpose::{Error, LimbPriors, Pose, Result, SkeletonGraph, Vec3, VoxelGrid};

use crate::config::TrainConfig;

/// A dataset split into training and held-out examples, in sample-id order.
#[derive(Debug, Clone)]
pub struct Data {
    pub graph: SkeletonGraph,
    pub priors: LimbPriors,
    pub grid: VoxelGrid,
    pub channels: usize,
    pub train: Vec<Example>,
    pub train_ids: Vec<usize>,
    pub test: Vec<Example>,
    pub test_ids: Vec<usize>,
}

impl Data {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let first = ds.samples.first().ok_or(Error::EmptyDataset)?;
        let part = |s: Split| {
            let v: Vec<_> = ds.split(s).collect();
            let ids = v.iter().map(|s| s.id).collect();
            let ex = v.into_iter().map(|s| Example { x: s.features.clone(), gt: s.pose.clone() }).collect();
            (ex, ids)
        };
        let (train, train_ids) = part(Split::Train);
        let (test, test_ids) = part(Split::Test);
        Ok(Data {
            graph: ds.graph.clone(),
            priors: ds.priors.clone(),
            grid: ds.grid().clone(),
            channels: first.features.channels,
            train,
            train_ids,
            test,
            test_ids,
        })
    }

    pub fn test_gts(&self) -> Vec<Pose> {
        self.test.iter().map(|e| e.gt.clone()).collect()
    }
}

/// The toy model together with its optimizer state.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub model: ToyModel,
    pub adam: AdamState,
    pub seed: u64,
    pub epoch: u64,
}

impl ToyRun {
    pub fn new(data: &Data, mode: ContextMode, alpha: f64, seed: u64) -> Result<Self> {
        let mut model = ToyModel::init(
            data.grid.clone(),
            data.graph.clone(),
            data.priors.clone(),
            data.channels,
            mode,
            seed,
        )?;
        model.context.alpha = alpha;
        let adam = AdamState::new(model.params_flat().len());
        Ok(ToyRun { model, adam, seed, epoch: 0 })
    }

    pub fn resume(ck: Checkpoint) -> Self {
        ToyRun {
            model: ck.model,
            adam: ck.adam,
            seed: ck.seed,
            epoch: ck.epoch,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            seed: self.seed,
            epoch: self.epoch,
        }
    }

    /// One pass over the training set in fixed order; returns the
    /// example-weighted mean of the batch losses.
    pub fn run_epoch(&mut self, data: &Data, tc: &TrainConfig, loss: &LossConfig) -> Result<StepLoss> {
        if data.train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let adam = tc.adam();
        let mut acc = StepLoss::default();
        for b in data.train.chunks(tc.batch) {
            let l = train_step(&mut self.model, &mut self.adam, b, loss, &adam)?;
            let w = b.len() as f64;
            acc.total += w * l.total;
            acc.l3d += w * l.l3d;
            acc.lga += w * l.lga;
        }
        let n = data.train.len() as f64;
        self.epoch += 1;
        Ok(StepLoss { total: acc.total / n, l3d: acc.l3d / n, lga: acc.lga / n })
    }
}

pub fn predict(m: &ToyModel, examples: &[Example]) -> Result<Vec<Pose>> {
    map_range(examples.len(), |i| forward(m, &examples[i].x).map(|o| o.pose))
        .into_iter()
        .collect()
}

/// A residual linear graph layer over joint coordinates, applied on top
/// of a trained baseline's soft-argmax poses. Coordinates are expressed
/// relative to the grid center in units of half the grid's largest extent.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub variant: Variant,
    pub structure: StructureMatrix,
    pub params: GnnLayerParams,
    pub adam: AdamState,
    center: Vec3,
    unit: f64,
}

impl Refiner {
    pub fn new(graph: &SkeletonGraph, grid: &VoxelGrid, variant: Variant) -> Self {
        let hi = grid.extent_max();
        let center = scale(add(grid.origin, hi), 0.5);
        let half = sub(hi, center);
        let unit = half[0].max(half[1]).max(half[2]);
        let params = GnnLayerParams::zeros(graph.n_joints(), 3, 3, variant);
        let adam = AdamState::new(params.weights.len());
        Refiner {
            variant,
            structure: build_structure(graph, variant, true),
            params,
            adam,
            center,
            unit,
        }
    }

    fn encode(&self, p: &Pose) -> Result<JointFeatures> {
        let v = p.joints.iter().flat_map(|&j| scale(sub(j, self.center), 1.0 / self.unit)).collect();
        JointFeatures::new(p.n_joints(), 3, v)
    }

    pub fn apply(&self, p: &Pose) -> Result<Pose> {
        let x = self.encode(p)?;
        let y = layer_forward(&x, &self.structure, &self.params)?;
        Ok(Pose::new(
            (0..p.n_joints())
                .map(|u| {
                    let r = y.row(u);
                    add(p.joints[u], scale([r[0], r[1], r[2]], self.unit))
                })
                .collect(),
        ))
    }

    /// One pass of mean per-joint L1 error minimisation over `(input, gt)` pairs.
    pub fn run_epoch(&mut self, inputs: &[Pose], gts: &[Pose], tc: &TrainConfig) -> Result<f64> {
        if inputs.is_empty() || inputs.len() != gts.len() {
            return Err(Error::ShapeMismatch("refiner inputs and targets differ".into()));
        }
        let adam = tc.adam();
        let mut total = 0.0;
        for (bi, bg) in inputs.chunks(tc.batch).zip(gts.chunks(tc.batch)) {
            let mut grad = vec![0.0; self.params.weights.len()];
            for (p, gt) in bi.iter().zip(bg) {
                let y = self.apply(p)?;
                let n = p.n_joints() as f64;
                let mut dy = Vec::with_capacity(3 * p.n_joints());
                for (a, b) in y.joints.iter().zip(&gt.joints) {
                    for c in 0..3 {
                        let d = a[c] - b[c];
                        total += d.abs() / n;
                        dy.push(d.signum() * self.unit / n);
                    }
                }
                let (dw, _) = layer_backward(&self.encode(p)?, &self.structure, &self.params, &dy)?;
                grad.iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
            }
            let inv = 1.0 / bi.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            sgd_adam_step(&mut self.params.weights, &grad, &mut self.adam, &adam)?;
        }
        Ok(total / inputs.len() as f64)
    }

    pub fn to_tensors(&self) -> TensorFile {
        let mut tf = TensorFile::default();
        let blocks = self.params.weights.len() / 9;
        tf.push("refine.w", vec![blocks, 3, 3], DType::F64, &self.params.weights);
        tf
    }
}

pub fn sample_names(ids: &[usize]) -> Vec<String> {
    ids.iter().map(|i| i.to_string()).collect()
}

pub fn report(ids: &[usize], preds: &[Pose], gts: &[Pose], g: &SkeletonGraph, pck: &PckConfig) -> Result<MetricReport> {
    evaluate(&sample_names(ids), preds, gts, g, pck, false)
}

pub fn samples_csv(r: &MetricReport) -> String {
    let mut s = String::from("sample_id,mpjpe_p1,mpjpe_p2,mplle,mplae\n");
    for m in &r.samples {
        let _ = writeln!(s, "{},{},{},{},{}", m.sample_id, m.mpjpe_p1, m.mpjpe_p2, m.mplle, m.mplae);
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

pub fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

/// Writes `metrics.json` and `samples.csv` into `dir`.
pub fn write_report(dir: &Path, r: &MetricReport) -> Result<()> {
    write_json(&dir.join("metrics.json"), r)?;
    write_text(&dir.join("samples.csv"), &samples_csv(r))
}
