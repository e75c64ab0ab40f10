use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ctxpose::gnn::Variant;
use ctxpose::io::{read_volume, TensorFile};
use ctxpose::losses::total_loss;
use ctxpose::metrics::{mean_joint_error, mplle};
use ctxpose::model::{backward, forward, Checkpoint, ContextMode, ToyModel, Upstream};
use ctxpose::psm::{brute_force_map, dp_map, PsmConfig};
use ctxpose::synthgen::{generate, read_dataset, read_poses_csv, unaries_of, write_dataset, write_poses_csv, Dataset, Split};
use ctxpose::{Error, FeatureVolume, LimbPrior, LimbPriors, Pose, SkeletonGraph, VoxelGrid};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{ExperimentConfig, Method};
use crate::experiment::{predict, report, write_json, write_report, write_text, Data, Refiner, ToyRun};
use crate::failure::{CliResult, Failure};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Globals {
    pub fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = cfg.out.clone().ok_or_else(|| Failure::config("no output directory; pass --out or set `out`"))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

fn load_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    match &cfg.dataset {
        Some(p) => Ok(read_dataset(p)?),
        None => Ok(generate(&cfg.synth_config()?)?),
    }
}

fn load_skeleton(path: &Path) -> CliResult<(SkeletonGraph, Option<LimbPriors>)> {
    Ok(SkeletonGraph::load(path)?)
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> CliResult<serde_json::Value> {
    let sc = cfg.synth_config()?;
    let ds = generate(&sc)?;
    let dir = out_dir(cfg)?;
    write_dataset(&ds, &dir)?;
    let summary = json!({
        "samples": ds.samples.len(),
        "train": ds.split(Split::Train).count(),
        "test": ds.split(Split::Test).count(),
        "joints": ds.graph.n_joints(),
        "channels": sc.channels,
        "grid": ds.grid().dims,
        "seed": sc.seed,
    });
    info!("wrote dataset to {}", dir.display());
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct PsmArgs {
    pub unary: Option<PathBuf>,
    pub skeleton: Option<PathBuf>,
    pub root: usize,
    pub epsilon: Option<f64>,
    pub oracle: bool,
}

pub fn cmd_infer_psm(cfg: &ExperimentConfig, args: &PsmArgs) -> CliResult<serde_json::Value> {
    let skeleton = args.skeleton.clone().or_else(|| cfg.skeleton.clone());
    let eps = args.epsilon.or(cfg.psm_epsilon_mm);
    let psm_cfg = |grid: &VoxelGrid| -> CliResult<PsmConfig> {
        Ok(match eps {
            Some(e) => PsmConfig::new(e)?,
            None => PsmConfig::for_grid(grid),
        })
    };
    let dir = out_dir(cfg)?;

    if let Some(vol) = &args.unary {
        let path = skeleton.ok_or_else(|| Failure::config("--unary needs --skeleton"))?;
        let (g, priors) = load_skeleton(&path)?;
        let priors = priors.ok_or_else(|| Failure::config(format!("{} has no limb priors", path.display())))?;
        let tree = g.root_tree(args.root)?;
        let un = unaries_of(&read_volume(vol)?)?;
        let pc = psm_cfg(&un.grid)?;
        let sol = dp_map(&un, &tree, &priors, &pc)?;
        let pose = sol.assignment.decode(&un.grid)?;
        let mut v = json!({
            "epsilon_mm": pc.epsilon_mm,
            "root": args.root,
            "assignment": sol.assignment.0,
            "log_energy": sol.log_energy,
            "pose": pose.joints,
        });
        if args.oracle {
            v["oracle"] = oracle_json(&[oracle_check(&un, &g, &priors, &pc, &sol)?]);
        }
        write_json(&dir.join("psm.json"), &v)?;
        return Ok(v);
    }

    let ds = load_dataset(cfg)?;
    let (g, priors) = match &skeleton {
        Some(p) => {
            let (g, pr) = load_skeleton(p)?;
            (g, pr.unwrap_or_else(|| ds.priors.clone()))
        }
        None => (ds.graph.clone(), ds.priors.clone()),
    };
    let tree = g.root_tree(args.root)?;
    if g.n_joints() != ds.graph.n_joints() {
        return Err(Failure::data("skeleton and dataset disagree on the joint count"));
    }
    let pc = psm_cfg(ds.grid())?;
    let mut samples = Vec::new();
    let mut checks = Vec::new();
    let (mut ids, mut preds, mut gts) = (Vec::new(), Vec::new(), Vec::new());
    for s in &ds.samples {
        let un = unaries_of(&s.features)?;
        let sol = dp_map(&un, &tree, &priors, &pc)?;
        let pose = sol.assignment.decode(&un.grid)?;
        samples.push(json!({
            "id": s.id,
            "assignment": sol.assignment.0,
            "log_energy": sol.log_energy,
            "mean_joint_error": mean_joint_error(&pose, &s.pose)?,
            "mplle": mplle(&pose, &s.pose, &g)?,
        }));
        if args.oracle {
            checks.push(oracle_check(&un, &g, &priors, &pc, &sol)?);
        }
        ids.push(s.id);
        preds.push(pose);
        gts.push(s.pose.clone());
    }
    let rep = report(&ids, &preds, &gts, &g, &cfg.pck)?;
    write_poses_csv(dir.join("predictions.csv"), ids.iter().copied().zip(&preds))?;
    write_report(&dir, &rep)?;
    let mut v = json!({
        "epsilon_mm": pc.epsilon_mm,
        "root": args.root,
        "metrics": rep,
        "samples": samples,
    });
    if args.oracle {
        v["oracle"] = oracle_json(&checks);
    }
    write_json(&dir.join("psm.json"), &v)?;
    Ok(json!({ "metrics": v["metrics"], "oracle": v.get("oracle") }))
}

/// `None` when the exhaustive search is too large to run.
fn oracle_check(
    un: &ctxpose::psm::UnaryScores,
    g: &SkeletonGraph,
    priors: &LimbPriors,
    pc: &PsmConfig,
    sol: &ctxpose::psm::PsmSolution,
) -> CliResult<Option<bool>> {
    match brute_force_map(un, g, priors, pc) {
        Ok(b) => Ok(Some(b.assignment == sol.assignment && b.log_energy == sol.log_energy)),
        Err(Error::SearchSpaceTooLarge { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn oracle_json(checks: &[Option<bool>]) -> serde_json::Value {
    let checked = checks.iter().flatten().count();
    json!({
        "checked": checked,
        "skipped": checks.len() - checked,
        "disagreements": checks.iter().flatten().filter(|&&ok| !ok).count(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(cfg: &ExperimentConfig, args: &TrainArgs) -> CliResult<serde_json::Value> {
    if cfg.method == Method::Psm {
        return Err(Failure::config("method `psm` has no trainable parameters; use infer-psm"));
    }
    let data = Data::new(&load_dataset(cfg)?)?;
    let root = out_dir(cfg)?;
    let mut results = BTreeMap::new();
    for &seed in &cfg.seeds {
        let dir = if cfg.seeds.len() == 1 { root.clone() } else { root.join(format!("seed-{seed}")) };
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let rep = train_one(cfg, &data, seed, args, &dir)?;
        results.insert(seed.to_string(), rep);
    }
    Ok(json!({ "method": cfg.method.name(), "seeds": results }))
}

fn train_one(
    cfg: &ExperimentConfig,
    data: &Data,
    seed: u64,
    args: &TrainArgs,
    dir: &Path,
) -> CliResult<serde_json::Value> {
    let tc = &cfg.train;
    let mode = cfg.context_mode();
    let variant = match cfg.method {
        Method::Fcn => Some(Variant::Fcn),
        Method::Gnn => Some(Variant::Gnn),
        Method::Lcn => Some(Variant::Lcn),
        _ => None,
    };
    let mut run = match &args.resume {
        Some(p) => {
            if variant.is_some() {
                return Err(Failure::config("resuming is supported for baseline and contextpose only"));
            }
            let ck = Checkpoint::from_tensors(&TensorFile::read(p)?)?;
            if ck.model.mode != mode {
                return Err(Failure::config(format!(
                    "checkpoint {} was trained as {:?}, config asks for {:?}",
                    p.display(),
                    ck.model.mode,
                    mode
                )));
            }
            ToyRun::resume(ck)
        }
        None => ToyRun::new(data, mode, cfg.alpha, seed)?,
    };
    let mut log = String::new();
    let mut line = |v: serde_json::Value| {
        log.push_str(&v.to_string());
        log.push('\n');
    };
    line(json!({
        "event": "start",
        "method": cfg.method.name(),
        "context": mode,
        "seed": run.seed,
        "start_epoch": run.epoch,
        "n_train": data.train.len(),
        "n_test": data.test.len(),
        "n_params": run.model.params_flat().len(),
    }));
    let gts = data.test_gts();
    let validate = |m: &ToyModel, r: Option<&Refiner>| -> CliResult<serde_json::Value> {
        let mut p = predict(m, &data.test)?;
        if let Some(r) = r {
            p = p.iter().map(|q| r.apply(q)).collect::<Result<_, _>>()?;
        }
        Ok(serde_json::to_value(report(&data.test_ids, &p, &gts, &data.graph, &cfg.pck)?).expect("serializable"))
    };
    let due = |e: u64, k: u64| k > 0 && e % k == 0;
    while run.epoch < tc.epochs {
        let l = run.run_epoch(data, tc, &cfg.loss)?;
        let val = if due(run.epoch, tc.validate_every) && !data.test.is_empty() {
            validate(&run.model, None)?
        } else {
            serde_json::Value::Null
        };
        info!("epoch {} loss {:.4}", run.epoch, l.total);
        line(json!({
            "event": "epoch",
            "stage": "backbone",
            "epoch": run.epoch,
            "loss": l.total,
            "l3d": l.l3d,
            "lga": l.lga,
            "val": val,
        }));
        if due(run.epoch, tc.checkpoint_every) {
            run.checkpoint().to_tensors().write(dir.join(format!("checkpoint-{:04}.bin", run.epoch)))?;
        }
    }
    run.checkpoint().to_tensors().write(dir.join("model.bin"))?;

    let mut refiner = None;
    if let Some(v) = variant {
        let mut r = Refiner::new(&data.graph, &data.grid, v);
        let inputs = predict(&run.model, &data.train)?;
        let targets: Vec<Pose> = data.train.iter().map(|e| e.gt.clone()).collect();
        for e in 1..=tc.epochs {
            let l = r.run_epoch(&inputs, &targets, tc)?;
            let val = if due(e, tc.validate_every) && !data.test.is_empty() {
                validate(&run.model, Some(&r))?
            } else {
                serde_json::Value::Null
            };
            line(json!({ "event": "epoch", "stage": "refine", "epoch": e, "loss": l, "val": val }));
        }
        r.to_tensors().write(dir.join("refine.bin"))?;
        refiner = Some(r);
    }

    let mut preds = predict(&run.model, &data.test)?;
    if let Some(r) = &refiner {
        preds = preds.iter().map(|q| r.apply(q)).collect::<Result<_, _>>()?;
    }
    let mut summary = serde_json::Value::Null;
    if !data.test.is_empty() {
        let rep = report(&data.test_ids, &preds, &gts, &data.graph, &cfg.pck)?;
        write_report(dir, &rep)?;
        summary = serde_json::to_value(&rep).expect("serializable");
    }
    write_poses_csv(dir.join("predictions.csv"), data.test_ids.iter().copied().zip(&preds))?;
    line(json!({ "event": "done", "epoch": run.epoch, "metrics": summary }));
    write_text(&dir.join("log.jsonl"), &log)?;
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub pred: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub gt: Option<PathBuf>,
}

pub fn cmd_eval(cfg: &ExperimentConfig, args: &EvalArgs) -> CliResult<serde_json::Value> {
    let needs_data = args.gt.is_none() || args.checkpoint.is_some() || cfg.skeleton.is_none();
    let data = if needs_data { Some(Data::new(&load_dataset(cfg)?)?) } else { None };
    let graph = match &cfg.skeleton {
        Some(p) => load_skeleton(p)?.0,
        None => data.as_ref().expect("loaded").graph.clone(),
    };
    let gt: Vec<(usize, Pose)> = match &args.gt {
        Some(p) => read_poses_csv(p)?,
        None => {
            let d = data.as_ref().expect("loaded");
            d.test_ids.iter().copied().zip(d.test_gts()).collect()
        }
    };
    let dir = out_dir(cfg)?;
    let pred: Vec<(usize, Pose)> = match (&args.pred, &args.checkpoint) {
        (Some(p), None) => read_poses_csv(p)?,
        (None, Some(c)) => {
            let d = data.as_ref().expect("loaded");
            let ck = Checkpoint::from_tensors(&TensorFile::read(c)?)?;
            let p = predict(&ck.model, &d.test)?;
            write_poses_csv(dir.join("predictions.csv"), d.test_ids.iter().copied().zip(&p))?;
            d.test_ids.iter().copied().zip(p).collect()
        }
        _ => return Err(Failure::config("eval needs exactly one of --pred and --checkpoint")),
    };
    let by_id: BTreeMap<usize, &Pose> = pred.iter().map(|(i, p)| (*i, p)).collect();
    if by_id.len() != pred.len() || pred.len() != gt.len() || gt.iter().any(|(i, _)| !by_id.contains_key(i)) {
        return Err(Failure::data("predicted and ground-truth sample sets differ"));
    }
    let ids: Vec<usize> = gt.iter().map(|(i, _)| *i).collect();
    let preds: Vec<Pose> = ids.iter().map(|i| by_id[i].clone()).collect();
    let gts: Vec<Pose> = gt.into_iter().map(|(_, p)| p).collect();
    let rep = report(&ids, &preds, &gts, &graph, &cfg.pck)?;
    write_report(&dir, &rep)?;
    Ok(serde_json::to_value(&rep).expect("serializable"))
}

fn read_samples_csv(path: &Path) -> CliResult<Vec<(String, [f64; 4])>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let bad = |i: usize| Failure::data(format!("{}: malformed line {}", path.display(), i + 1));
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some("sample_id,mpjpe_p1,mpjpe_p2,mplle,mplae") {
        return Err(bad(0));
    }
    let mut out = Vec::new();
    for (i, l) in lines.filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i));
        }
        let mut v = [0.0; 4];
        for k in 0..4 {
            v[k] = f[k + 1].parse().map_err(|_| bad(i))?;
        }
        out.push((f[0].to_string(), v));
    }
    Ok(out)
}

/// Per-sample differences `candidate − baseline`; negative means the
/// candidate (ContextPose) is better.
pub fn cmd_compare(cfg: &ExperimentConfig, baseline: &Path, candidate: &Path) -> CliResult<serde_json::Value> {
    let a = read_samples_csv(baseline)?;
    let b = read_samples_csv(candidate)?;
    let b_by: BTreeMap<&str, [f64; 4]> = b.iter().map(|(i, v)| (i.as_str(), *v)).collect();
    if a.len() != b.len() || b_by.len() != b.len() || a.iter().any(|(i, _)| !b_by.contains_key(i.as_str())) {
        return Err(Failure::data("the two runs cover different samples"));
    }
    let dir = out_dir(cfg)?;
    let mut dat = String::from(
        "# per-sample difference, candidate minus baseline (negative: candidate better)\n\
         # index sample_id d_mpjpe_p1 d_mpjpe_p2 d_mplle d_mplae\n",
    );
    let mut sums = [0.0; 4];
    let mut better = 0usize;
    for (k, (id, va)) in a.iter().enumerate() {
        let vb = b_by[id.as_str()];
        let d: [f64; 4] = std::array::from_fn(|i| vb[i] - va[i]);
        (0..4).for_each(|i| sums[i] += d[i]);
        better += (d[2] < 0.0) as usize;
        let _ = writeln!(dat, "{k} {id} {} {} {} {}", d[0], d[1], d[2], d[3]);
    }
    write_text(&dir.join("compare.dat"), &dat)?;
    let n = a.len().max(1) as f64;
    let v = json!({
        "n_samples": a.len(),
        "mean_d_mpjpe_p1": sums[0] / n,
        "mean_d_mpjpe_p2": sums[1] / n,
        "mean_d_mplle": sums[2] / n,
        "mean_d_mplae": sums[3] / n,
        "candidate_better_mplle": better,
    });
    write_json(&dir.join("compare.json"), &v)?;
    Ok(v)
}

/// A random two-joint instance on a 2×2×2 grid with every parameter drawn at random.
pub fn gradcheck_instance(seed: u64) -> (ToyModel, FeatureVolume, Pose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = VoxelGrid::new([2, 2, 2], [0.0; 3], [10.0, 12.0, 9.0]).expect("valid grid");
    let g = SkeletonGraph::new(2, &[(0, 1)]).expect("valid graph");
    let mut pr = LimbPriors::new();
    pr.insert(0, 1, LimbPrior { mu: rng.random_range(8.0..16.0), sigma: rng.random_range(0.05..0.3) });
    let mode = [ContextMode::Full, ContextMode::GlobalOnly, ContextMode::PairwiseOnly][(seed % 3) as usize];
    let mut m = ToyModel::init(grid.clone(), g, pr, 2, mode, seed).expect("valid model");
    m.context.alpha = rng.random_range(5.0..50.0);
    for w in m.context.w.iter_mut().chain(&mut m.context.d).chain(&mut m.readout_w).chain(&mut m.readout_b) {
        *w = rng.random_range(-1.0..1.0);
    }
    let x = FeatureVolume::new(grid, 2, 2, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("valid volume");
    let gt = Pose::new((0..2).map(|_| [rng.random_range(0.5..19.5), rng.random_range(0.5..23.5), rng.random_range(0.5..17.5)]).collect());
    (m, x, gt)
}

/// Largest relative error between the analytic gradient of the total
/// loss and central differences, over all parameters.
pub fn gradcheck_seed(seed: u64, loss: &ctxpose::losses::LossConfig) -> CliResult<f64> {
    let (m, x, gt) = gradcheck_instance(seed);
    // the attention loss applies only when global attention is learned
    let parts = |m: &ToyModel| -> CliResult<[f64; 2]> {
        let o = forward(m, &x)?;
        let ga = o.ga.as_ref().filter(|_| m.context.use_global);
        let t = total_loss(&o.pose, &gt, &o.heatmap, ga, loss)?;
        Ok([t.pose.value, t.ga_value])
    };
    let mut out = forward(&m, &x)?;
    let ga = out.ga.as_ref().filter(|_| m.context.use_global);
    let t = total_loss(&out.pose, &gt, &out.heatmap, ga, loss)?;
    let up = Upstream { d_pose: t.pose.d_pose, d_heatmap: t.pose.d_heatmap, d_ga: ga.map(|_| t.d_ga) };
    let analytic = backward(&m, &mut out.tape, &up)?.flat(m.mode);
    let theta = m.params_flat();
    let at = |i: usize, delta: f64| -> CliResult<[f64; 2]> {
        let mut p = theta.clone();
        p[i] += delta;
        let mut mm = m.clone();
        mm.set_params_flat(&p)?;
        parts(&mm)
    };
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let h = 1e-5 * theta[i].abs().max(1.0);
        let (p, q) = (at(i, h)?, at(i, -h)?);
        // difference L_3D and L_GA separately: λ = 10⁶ would otherwise
        // swamp the pose term in round-off
        let num = (p[0] - q[0]) / (2.0 * h) + loss.lambda * (p[1] - q[1]) / (2.0 * h);
        let scale = analytic[i].abs().max(num.abs()).max(1e-3);
        worst = worst.max((analytic[i] - num).abs() / scale);
    }
    Ok(worst)
}

pub const GRADCHECK_TOL: f64 = 1e-5;

pub fn cmd_gradcheck(cfg: &ExperimentConfig, n_seeds: u64) -> CliResult<serde_json::Value> {
    let seeds: Vec<u64> = if n_seeds > 0 { (cfg.seeds[0]..cfg.seeds[0] + n_seeds).collect() } else { cfg.seeds.clone() };
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for &s in &seeds {
        let e = gradcheck_seed(s, &cfg.loss)?;
        worst = worst.max(e);
        rows.push(json!({ "seed": s, "max_rel_err": e }));
    }
    let v = json!({
        "tolerance": GRADCHECK_TOL,
        "max_rel_err": worst,
        "pass": worst < GRADCHECK_TOL,
        "seeds": rows,
    });
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        write_json(&dir.join("gradcheck.json"), &v)?;
    }
    if worst >= GRADCHECK_TOL {
        return Err(Failure::internal(format!("gradient check failed: max relative error {worst:e}")));
    }
    Ok(v)
}

