//! Synthetic rigid-limb poses and the volumes rendered from them.
//!
//! Poses are built from a rest skeleton by rotating every bone by small
//! random angles, applying a random yaw, and placing the root near the grid
//! centre; poses that leave the grid box are rejected. Each joint is
//! occluded independently. Channel 0 of a feature volume is the unary
//! field: a Gaussian bump plus a uniform noise floor for visible joints and
//! a constant for occluded ones. The remaining channels are seeded noise.
//!
//! Randomness for sample `i` comes from `ChaCha8(seed)` on stream `i`, so
//! samples can be generated in any order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureVolume, VoxelGrid};
use crate::io::{read_volume, write_volume};
use crate::parallel::map_range;
use crate::pose::{add, norm, Pose, Vec3};
use crate::psm::UnaryScores;
use crate::skeleton::{estimate_priors, LimbPriors, SkeletonGraph, H36M_EDGES};

/// Rest-pose offsets of each H36M child joint from its parent (z up).
const H36M_REST: [Vec3; 16] = [
    [-130.0, 0.0, 0.0],
    [0.0, 0.0, -450.0],
    [0.0, 0.0, -440.0],
    [130.0, 0.0, 0.0],
    [0.0, 0.0, -450.0],
    [0.0, 0.0, -440.0],
    [0.0, 0.0, 230.0],
    [0.0, 0.0, 250.0],
    [0.0, 0.0, 110.0],
    [0.0, 0.0, 115.0],
    [150.0, 0.0, 0.0],
    [0.0, 0.0, -280.0],
    [0.0, 0.0, -250.0],
    [-150.0, 0.0, 0.0],
    [0.0, 0.0, -280.0],
    [0.0, 0.0, -250.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SkeletonSpec {
    /// 17 joints, realistic limb lengths.
    H36m,
    /// Joints `0-1-…-(n-1)` along +x in the rest pose.
    Chain { n_joints: usize, length_mm: f64 },
    /// Explicit rest offsets `child - parent`; joint 0 is the root.
    Custom { n_joints: usize, bones: Vec<Bone> },
    /// Skeleton file with priors; `mu` sets each limb length and rest
    /// directions are spread over the sphere.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
    pub offset: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing_mm: Vec3,
    pub center_mm: Vec3,
}

impl GridSpec {
    pub fn grid(&self) -> Result<VoxelGrid> {
        let origin = std::array::from_fn(|a| self.center_mm[a] - 0.5 * self.dims[a] as f64 * self.spacing_mm[a]);
        VoxelGrid::new(self.dims, origin, self.spacing_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_samples: usize,
    /// Trailing fraction of samples held out for testing.
    pub test_fraction: f64,
    pub skeleton: SkeletonSpec,
    /// Multiplies every rest offset.
    pub limb_scale: f64,
    /// Per-bone rotation about each axis is uniform in `±angle_range_deg`.
    pub angle_range_deg: f64,
    /// Global rotation about the vertical axis, uniform in `±yaw_range_deg`.
    pub yaw_range_deg: f64,
    /// Root offset from the grid centre, uniform per axis.
    pub root_jitter_mm: f64,
    pub grid: GridSpec,
    /// Width of the unary bump; `None` means one voxel pitch.
    pub bump_sigma_mm: Option<f64>,
    /// Peak height of the unary bump.
    pub amplitude: f64,
    /// Noise floor, uniform in `[0, unary_noise)`, times the amplitude.
    pub unary_noise: f64,
    /// Field value of an occluded joint, times the amplitude.
    pub occluded_level: f64,
    pub occlusion_prob: f64,
    pub channels: usize,
    /// Extra channels are uniform in `±feature_noise`.
    pub feature_noise: f64,
    /// Lower bound on the estimated limb σ.
    pub sigma_floor_mm: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_samples: 64,
            test_fraction: 0.25,
            skeleton: SkeletonSpec::H36m,
            limb_scale: 1.0,
            angle_range_deg: 20.0,
            yaw_range_deg: 180.0,
            root_jitter_mm: 0.0,
            grid: GridSpec {
                dims: [16, 16, 16],
                spacing_mm: [140.0; 3],
                center_mm: [0.0; 3],
            },
            bump_sigma_mm: None,
            amplitude: 20.0,
            unary_noise: 0.1,
            occluded_level: 0.1,
            occlusion_prob: 0.0,
            channels: 3,
            feature_noise: 0.5,
            sigma_floor_mm: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("occlusion_prob must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1]");
        }
        if !(self.limb_scale > 0.0) {
            return bad("limb_scale must be positive");
        }
        if self.channels == 0 {
            return bad("channels must be at least 1");
        }
        if !(self.amplitude > 0.0) || self.unary_noise < 0.0 || self.occluded_level < 0.0 {
            return bad("amplitude must be positive, noise and occluded level non-negative");
        }
        if self.angle_range_deg < 0.0 || self.yaw_range_deg < 0.0 || self.root_jitter_mm < 0.0 || self.feature_noise < 0.0 {
            return bad("ranges must be non-negative");
        }
        if let Some(s) = self.bump_sigma_mm {
            if !(s > 0.0) {
                return Err(Error::NonPositiveSigma(s));
            }
        }
        self.grid.grid()?;
        Ok(())
    }

    pub fn bump_sigma(&self, grid: &VoxelGrid) -> f64 {
        self.bump_sigma_mm
            .unwrap_or_else(|| grid.spacing.iter().copied().fold(0.0, f64::max))
    }
}

/// A skeleton with rest offsets, bones listed parent-before-child.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub graph: SkeletonGraph,
    pub bones: Vec<Bone>,
}

impl Rig {
    pub fn from_spec(spec: &SkeletonSpec, scale: f64) -> Result<Rig> {
        let (graph, offsets): (SkeletonGraph, Vec<Bone>) = match spec {
            SkeletonSpec::H36m => {
                let bones = H36M_EDGES
                    .iter()
                    .zip(H36M_REST)
                    .map(|(&(p, c), offset)| Bone { parent: p, child: c, offset })
                    .collect();
                (SkeletonGraph::h36m(), bones)
            }
            SkeletonSpec::Chain { n_joints, length_mm } => {
                let edges: Vec<_> = (1..*n_joints).map(|i| (i - 1, i)).collect();
                let bones = edges
                    .iter()
                    .map(|&(p, c)| Bone { parent: p, child: c, offset: [*length_mm, 0.0, 0.0] })
                    .collect();
                (SkeletonGraph::new(*n_joints, &edges)?, bones)
            }
            SkeletonSpec::Custom { n_joints, bones } => {
                let edges: Vec<_> = bones.iter().map(|b| (b.parent, b.child)).collect();
                (SkeletonGraph::new(*n_joints, &edges)?, bones.clone())
            }
            SkeletonSpec::File { path } => {
                let (g, priors) = SkeletonGraph::load(path)?;
                let priors = priors.ok_or_else(|| {
                    Error::InvalidConfig(format!("{} has no limb priors to take lengths from", path.display()))
                })?;
                priors.covers(&g)?;
                let tree = g.root_tree(0)?;
                let m = tree.edges().len().max(1);
                let bones = tree
                    .edges()
                    .into_iter()
                    .enumerate()
                    .map(|(i, (p, c))| {
                        let mu = priors.get(p, c).expect("covered").mu;
                        let d = fibonacci_direction(i, m);
                        Bone { parent: p, child: c, offset: [mu * d[0], mu * d[1], mu * d[2]] }
                    })
                    .collect();
                (g, bones)
            }
        };
        let tree = graph.root_tree(0)?;
        // reorder bones parent-before-child and orient them away from the root
        let mut bones = Vec::with_capacity(offsets.len());
        for (p, c) in tree.edges() {
            let b = offsets
                .iter()
                .find(|b| (b.parent, b.child) == (p, c) || (b.parent, b.child) == (c, p))
                .ok_or_else(|| Error::InvalidConfig(format!("no rest offset for bone ({p}, {c})")))?;
            let sign = if b.parent == p { scale } else { -scale };
            let offset = b.offset.map(|x| x * sign);
            if norm(offset) <= 0.0 {
                return Err(Error::ZeroLengthLimb(p, c));
            }
            bones.push(Bone { parent: p, child: c, offset });
        }
        Ok(Rig { graph, bones })
    }

    pub fn n_joints(&self) -> usize {
        self.graph.n_joints()
    }
}

fn fibonacci_direction(i: usize, n: usize) -> Vec3 {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
    let r = (1.0 - z * z).sqrt();
    let t = golden * i as f64;
    [r * t.cos(), r * t.sin(), z]
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn apply(r: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    std::array::from_fn(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

fn symmetric(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// One pose that fits inside the grid box.
pub fn sample_pose(cfg: &SynthConfig, rig: &Rig, rng: &mut impl Rng) -> Result<Pose> {
    const MAX_TRIES: usize = 1000;
    let grid = cfg.grid.grid()?;
    let a = cfg.angle_range_deg.to_radians();
    let yaw_half = cfg.yaw_range_deg.to_radians();
    for _ in 0..MAX_TRIES {
        let yaw = rot_z(symmetric(rng, yaw_half));
        let mut joints = vec![[0.0; 3]; rig.n_joints()];
        joints[0] = std::array::from_fn(|i| cfg.grid.center_mm[i] + symmetric(rng, cfg.root_jitter_mm));
        for b in &rig.bones {
            let (ax, ay, az) = (symmetric(rng, a), symmetric(rng, a), symmetric(rng, a));
            let local = apply(&rot_z(az), apply(&rot_y(ay), apply(&rot_x(ax), b.offset)));
            joints[b.child] = add(joints[b.parent], apply(&yaw, local));
        }
        if joints.iter().all(|&j| grid.contains(j)) {
            return Ok(Pose::new(joints));
        }
    }
    Err(Error::BoxTooSmall(MAX_TRIES))
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Channel 0 for every joint, then `channels - 1` noise channels.
fn render(pose: &Pose, grid: &VoxelGrid, cfg: &SynthConfig, channels: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = pose.n_joints();
    let nv = grid.len();
    let occluded: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < cfg.occlusion_prob).collect();
    let inv = 1.0 / (2.0 * cfg.bump_sigma(grid).powi(2));
    let centers = grid.centers();
    let mut values = vec![0.0; n * nv * channels];
    for u in 0..n {
        for (q, c) in centers.iter().enumerate() {
            let v = if occluded[u] {
                cfg.amplitude * cfg.occluded_level
            } else {
                let j = pose.joints[u];
                let d2 = (c[0] - j[0]).powi(2) + (c[1] - j[1]).powi(2) + (c[2] - j[2]).powi(2);
                let floor = if cfg.unary_noise > 0.0 { rng.random_range(0.0..cfg.unary_noise) } else { 0.0 };
                cfg.amplitude * ((-d2 * inv).exp() + floor)
            };
            values[(u * nv + q) * channels] = round_f32(v);
        }
    }
    for u in 0..n {
        for q in 0..nv {
            for c in 1..channels {
                values[(u * nv + q) * channels + c] = round_f32(symmetric(rng, cfg.feature_noise));
            }
        }
    }
    (values, occluded)
}

/// Unary likelihood fields for a pose; also returns the occlusion mask.
pub fn render_unaries(pose: &Pose, grid: &VoxelGrid, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<(UnaryScores, Vec<bool>)> {
    let (values, occ) = render(pose, grid, cfg, 1, rng);
    Ok((UnaryScores::new(grid.clone(), pose.n_joints(), values)?, occ))
}

/// Feature volume of width `cfg.channels`; channel 0 equals [`render_unaries`].
pub fn render_features(pose: &Pose, grid: &VoxelGrid, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<(FeatureVolume, Vec<bool>)> {
    let (values, occ) = render(pose, grid, cfg, cfg.channels, rng);
    Ok((FeatureVolume::new(grid.clone(), pose.n_joints(), cfg.channels, values)?, occ))
}

/// Channel 0 of a feature volume as unary scores (clamped at zero).
pub fn unaries_of(x: &FeatureVolume) -> Result<UnaryScores> {
    let nv = x.grid.len();
    let vals = (0..x.n_joints * nv).map(|i| x.values[i * x.channels].max(0.0)).collect();
    UnaryScores::new(x.grid.clone(), x.n_joints, vals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub pose: Pose,
    pub occluded: Vec<bool>,
    pub features: FeatureVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub graph: SkeletonGraph,
    pub priors: LimbPriors,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn grid(&self) -> &VoxelGrid {
        &self.samples.first().expect("non-empty dataset").features.grid
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

pub fn sample_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.n_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    let rig = Rig::from_spec(&cfg.skeleton, cfg.limb_scale)?;
    let grid = cfg.grid.grid()?;
    let n_train = ((1.0 - cfg.test_fraction) * cfg.n_samples as f64).round() as usize;
    let samples = map_range(cfg.n_samples, |id| -> Result<Sample> {
        let mut rng = sample_rng(cfg.seed, id);
        let pose = sample_pose(cfg, &rig, &mut rng)?;
        let (features, occluded) = render_features(&pose, &grid, cfg, &mut rng)?;
        Ok(Sample {
            id,
            split: if id < n_train { Split::Train } else { Split::Test },
            pose,
            occluded,
            features,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let train: Vec<Pose> = samples.iter().filter(|s| s.split == Split::Train).map(|s| s.pose.clone()).collect();
    let basis = if train.is_empty() { samples.iter().map(|s| s.pose.clone()).collect() } else { train };
    let priors = estimate_priors(&basis, &rig.graph)?.floored(cfg.sigma_floor_mm);
    Ok(Dataset {
        config: cfg.clone(),
        graph: rig.graph,
        priors,
        samples,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorEntry {
    u: usize,
    v: usize,
    mu: f64,
    sigma: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    id: usize,
    split: Split,
    file: String,
    occluded: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    config: SynthConfig,
    n_joints: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
    priors: Vec<PriorEntry>,
    samples: Vec<SampleEntry>,
}

const DATASET_FORMAT: &str = "ctxpose-dataset";

fn volume_name(id: usize) -> String {
    format!("sample_{id:05}.vol")
}

/// `manifest.json`, one volume file per sample, and `poses.csv`.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        config: ds.config.clone(),
        n_joints: ds.graph.n_joints(),
        edges: ds.graph.edges().iter().map(|&(a, b)| [a, b]).collect(),
        names: ds.graph.names().map(|n| n.to_vec()),
        priors: ds.priors.iter().map(|((u, v), p)| PriorEntry { u, v, mu: p.mu, sigma: p.sigma }).collect(),
        samples: ds
            .samples
            .iter()
            .map(|s| SampleEntry {
                id: s.id,
                split: s.split,
                file: volume_name(s.id),
                occluded: s.occluded.clone(),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for s in &ds.samples {
        write_volume(dir.join(volume_name(s.id)), &s.features)?;
    }
    write_poses_csv(dir.join("poses.csv"), ds.samples.iter().map(|s| (s.id, &s.pose)))
}

/// `sample_id,joint,x,y,z` rows; floats use shortest round-trip formatting.
pub fn write_poses_csv<'a>(path: impl AsRef<Path>, poses: impl Iterator<Item = (usize, &'a Pose)>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("sample_id,joint,x,y,z\n");
    for (id, p) in poses {
        for (u, j) in p.joints.iter().enumerate() {
            writeln!(out, "{id},{u},{},{},{}", j[0], j[1], j[2]).expect("string write");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Inverse of [`write_poses_csv`], keyed by sample id in file order.
pub fn read_poses_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, Pose)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {}: {msg}", line + 1),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "sample_id,joint,x,y,z")) => {}
        _ => return Err(bad(0, "expected header `sample_id,joint,x,y,z`")),
    }
    let mut out: Vec<(usize, Pose)> = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i, "expected 5 fields"));
        }
        let id: usize = f[0].parse().map_err(|_| bad(i, "bad sample id"))?;
        let joint: usize = f[1].parse().map_err(|_| bad(i, "bad joint index"))?;
        let mut xyz = [0.0; 3];
        for a in 0..3 {
            xyz[a] = f[2 + a].parse().map_err(|_| bad(i, "bad coordinate"))?;
        }
        if out.last().map(|(last, _)| *last) != Some(id) {
            out.push((id, Pose::new(Vec::new())));
        }
        let pose = &mut out.last_mut().expect("pushed").1;
        if joint != pose.joints.len() {
            return Err(bad(i, "joints must be listed in order"));
        }
        pose.joints.push(xyz);
        pose.confidence.push(1.0);
    }
    Ok(out)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Format { path, msg: format!("unknown dataset format `{}`", m.format) });
    }
    let edges: Vec<_> = m.edges.iter().map(|e| (e[0], e[1])).collect();
    let mut graph = SkeletonGraph::new(m.n_joints, &edges)?;
    if let Some(names) = m.names {
        graph = graph.with_names(names)?;
    }
    let mut priors = LimbPriors::new();
    for p in &m.priors {
        priors.insert(p.u, p.v, crate::skeleton::LimbPrior { mu: p.mu, sigma: p.sigma });
    }
    let poses = read_poses_csv(dir.join("poses.csv"))?;
    if poses.len() != m.samples.len() {
        return Err(Error::Format {
            path: dir.join("poses.csv"),
            msg: format!("{} poses for {} samples", poses.len(), m.samples.len()),
        });
    }
    let mut samples = Vec::with_capacity(m.samples.len());
    for (entry, (id, pose)) in m.samples.into_iter().zip(poses) {
        if id != entry.id || pose.n_joints() != m.n_joints {
            return Err(Error::Format {
                path: dir.join("poses.csv"),
                msg: format!("pose rows for sample {id} do not match the manifest"),
            });
        }
        let features = read_volume(dir.join(&entry.file))?;
        samples.push(Sample {
            id,
            split: entry.split,
            pose,
            occluded: entry.occluded,
            features,
        });
    }
    Ok(Dataset {
        config: m.config,
        graph,
        priors,
        samples,
    })
}
