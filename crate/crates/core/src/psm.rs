//! Pictorial structure model on a voxel grid.
//!
//! The energy of an assignment is the product of per-joint likelihoods and
//! hard limb-length indicators. On a tree it is maximized exactly by
//! max-product dynamic programming: leaf-to-root messages
//! `y[u][q] = x[u][q] * Π_child max_k ψ(q, k) * y[child][k]`, then root
//! argmax and backtracking through the recorded per-`(child, q)` argmaxes.
//!
//! All products are evaluated as sums of logs (`ln 0 = -inf`). Ties are
//! broken towards the lowest flat voxel index; brute force breaks ties
//! towards the lexicographically smallest assignment vector.

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::metrics;
use crate::parallel::map_range;
use crate::pose::{dist, norm, Pose, Vec3};
use crate::skeleton::{LimbPrior, LimbPriors, RootedTree, SkeletonGraph};

/// Non-negative per-joint likelihoods `x[u][q]`, joint-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryScores {
    pub grid: VoxelGrid,
    pub n_joints: usize,
    pub values: Vec<f64>,
}

impl UnaryScores {
    pub fn new(grid: VoxelGrid, n_joints: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_joints * grid.len() {
            return Err(Error::shape(format!(
                "unary scores have {} values, expected {}",
                values.len(),
                n_joints * grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::shape("unary scores must be finite and non-negative"));
        }
        Ok(UnaryScores { grid, n_joints, values })
    }

    pub fn joint(&self, u: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[u * n..(u + 1) * n]
    }

    fn log_joint(&self, u: usize) -> Vec<f64> {
        self.joint(u).iter().map(|&x| x.ln()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsmConfig {
    /// Half-width of the admissible limb-length window, mm.
    pub epsilon_mm: f64,
    /// Largest `|Ω|^N` brute force will enumerate.
    pub search_cap: f64,
}

impl PsmConfig {
    pub fn new(epsilon_mm: f64) -> Result<Self> {
        if !(epsilon_mm > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon_mm}")));
        }
        Ok(PsmConfig {
            epsilon_mm,
            search_cap: 1e6,
        })
    }

    /// ε = half the voxel diagonal.
    pub fn for_grid(grid: &VoxelGrid) -> Self {
        PsmConfig {
            epsilon_mm: 0.5 * grid.voxel_diagonal(),
            search_cap: 1e6,
        }
    }
}

/// One voxel index per joint.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn decode(&self, grid: &VoxelGrid) -> Result<Pose> {
        let joints = self
            .0
            .iter()
            .map(|&k| grid.voxel_center(k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pose::new(joints))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsmSolution {
    pub assignment: Assignment,
    pub energy: f64,
    pub log_energy: f64,
}

/// ψ: 1 iff `‖q − k‖` lies in the closed window `[μ − ε, μ + ε]`.
pub fn hard_pairwise(q: Vec3, k: Vec3, prior: LimbPrior, cfg: &PsmConfig) -> bool {
    within_window(dist(q, k), prior, cfg)
}

#[inline]
fn within_window(d: f64, prior: LimbPrior, cfg: &PsmConfig) -> bool {
    d >= prior.mu - cfg.epsilon_mm && d <= prior.mu + cfg.epsilon_mm
}

/// Distance between two voxel centers computed from their index offset, so
/// it depends only on `k − q`.
#[inline]
fn offset_distance(grid: &VoxelGrid, d: [isize; 3]) -> f64 {
    norm([
        d[0] as f64 * grid.spacing[0],
        d[1] as f64 * grid.spacing[1],
        d[2] as f64 * grid.spacing[2],
    ])
}

fn voxel_offset(grid: &VoxelGrid, q: usize, k: usize) -> [isize; 3] {
    let (a, b) = (grid.unflat(q), grid.unflat(k));
    [
        b[0] as isize - a[0] as isize,
        b[1] as isize - a[1] as isize,
        b[2] as isize - a[2] as isize,
    ]
}

/// ψ between two voxels of `grid`.
pub fn voxel_pairwise(grid: &VoxelGrid, q: usize, k: usize, prior: LimbPrior, cfg: &PsmConfig) -> bool {
    within_window(offset_distance(grid, voxel_offset(grid, q, k)), prior, cfg)
}

/// Index offsets `k − q` admitted by the window for one limb.
fn admissible_offsets(grid: &VoxelGrid, prior: LimbPrior, cfg: &PsmConfig) -> Vec<[isize; 3]> {
    let r = |a: usize| grid.dims[a] as isize - 1;
    let mut out = Vec::new();
    for dx in -r(0)..=r(0) {
        for dy in -r(1)..=r(1) {
            for dz in -r(2)..=r(2) {
                if within_window(offset_distance(grid, [dx, dy, dz]), prior, cfg) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn prior_for(priors: &LimbPriors, u: usize, v: usize) -> Result<LimbPrior> {
    priors
        .get(u, v)
        .ok_or_else(|| Error::InvalidConfig(format!("no limb prior for edge ({u}, {v})")))
}

fn check_assignment(assign: &Assignment, unary: &UnaryScores) -> Result<()> {
    if assign.0.len() != unary.n_joints {
        return Err(Error::shape(format!(
            "assignment has {} joints, unaries {}",
            assign.0.len(),
            unary.n_joints
        )));
    }
    for &k in &assign.0 {
        if k >= unary.grid.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: unary.grid.len(),
            });
        }
    }
    Ok(())
}

/// Log-energy in canonical order: joint terms ascending, then edges.
fn log_energy_of(
    assign: &[usize],
    log_x: impl Fn(usize, usize) -> f64,
    g: &SkeletonGraph,
    feasible: impl Fn(usize, usize, usize) -> bool,
) -> f64 {
    let mut s = 0.0;
    for (u, &k) in assign.iter().enumerate() {
        s += log_x(u, k);
    }
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        if !feasible(e, assign[u], assign[v]) {
            return f64::NEG_INFINITY;
        }
    }
    s
}

/// Energy of `assign`: Π x[u][a_u] · Π_edges ψ(a_u, a_v).
pub fn energy(
    assign: &Assignment,
    unary: &UnaryScores,
    g: &SkeletonGraph,
    priors: &LimbPriors,
    cfg: &PsmConfig,
) -> Result<f64> {
    Ok(log_energy(assign, unary, g, priors, cfg)?.exp())
}

pub fn log_energy(
    assign: &Assignment,
    unary: &UnaryScores,
    g: &SkeletonGraph,
    priors: &LimbPriors,
    cfg: &PsmConfig,
) -> Result<f64> {
    check_assignment(assign, unary)?;
    if g.n_joints() != unary.n_joints {
        return Err(Error::shape("graph and unaries disagree on joint count"));
    }
    let edge_priors = g
        .edges()
        .iter()
        .map(|&(u, v)| prior_for(priors, u, v))
        .collect::<Result<Vec<_>>>()?;
    let grid = &unary.grid;
    Ok(log_energy_of(&assign.0, |u, k| unary.joint(u)[k].ln(), g, |e, a, b| {
        voxel_pairwise(grid, a, b, edge_priors[e], cfg)
    }))
}

/// Exhaustive maximization over all `|Ω|^N` assignments.
pub fn brute_force_map(
    unary: &UnaryScores,
    g: &SkeletonGraph,
    priors: &LimbPriors,
    cfg: &PsmConfig,
) -> Result<PsmSolution> {
    let n = unary.n_joints;
    let omega = unary.grid.len();
    let size = (omega as f64).powi(n as i32);
    if size > cfg.search_cap {
        return Err(Error::SearchSpaceTooLarge {
            size,
            cap: cfg.search_cap,
        });
    }
    if g.n_joints() != n {
        return Err(Error::shape("graph and unaries disagree on joint count"));
    }
    let log_x: Vec<Vec<f64>> = (0..n).map(|u| unary.log_joint(u)).collect();
    let tables: Vec<Vec<bool>> = g
        .edges()
        .iter()
        .map(|&(u, v)| {
            let prior = prior_for(priors, u, v)?;
            let mut t = vec![false; omega * omega];
            for a in 0..omega {
                for b in 0..omega {
                    t[a * omega + b] = voxel_pairwise(&unary.grid, a, b, prior, cfg);
                }
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let feasible = |e: usize, a: usize, b: usize| tables[e][a * omega + b];
    let lx = |u: usize, k: usize| log_x[u][k];

    let mut current = vec![0usize; n];
    let mut best = current.clone();
    let mut best_val = log_energy_of(&current, lx, g, feasible);
    // odometer with joint 0 most significant: lexicographic order
    'outer: loop {
        let mut pos = n;
        loop {
            if pos == 0 {
                break 'outer;
            }
            pos -= 1;
            current[pos] += 1;
            if current[pos] < omega {
                break;
            }
            current[pos] = 0;
        }
        let val = log_energy_of(&current, lx, g, feasible);
        if val > best_val {
            best_val = val;
            best.copy_from_slice(&current);
        }
    }
    Ok(PsmSolution {
        assignment: Assignment(best),
        energy: best_val.exp(),
        log_energy: best_val,
    })
}

/// Upward-pass tables of the max-product recursion, in log space.
#[derive(Debug, Clone)]
pub struct DpTables {
    /// `log y[u][q]`
    pub log_y: Vec<Vec<f64>>,
    /// For each non-root joint `v` with parent `u`: best `k` for each parent voxel `q`.
    pub argmax: Vec<Vec<usize>>,
}

/// Leaf-to-root message passing.
pub fn upward_pass(
    unary: &UnaryScores,
    tree: &RootedTree,
    priors: &LimbPriors,
    cfg: &PsmConfig,
) -> Result<DpTables> {
    let n = unary.n_joints;
    if tree.parent.len() != n {
        return Err(Error::shape("tree and unaries disagree on joint count"));
    }
    let grid = unary.grid;
    let omega = grid.len();
    let mut log_y: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut argmax: Vec<Vec<usize>> = vec![Vec::new(); n];
    for u in tree.post_order() {
        let mut y = unary.log_joint(u);
        for &c in &tree.children[u] {
            let prior = prior_for(priors, u, c)?;
            let offsets = admissible_offsets(&grid, prior, cfg);
            let child = &log_y[c];
            let msgs: Vec<(f64, usize)> = map_range(omega, |q| {
                let qi = grid.unflat(q);
                let mut best = (f64::NEG_INFINITY, 0usize);
                for d in &offsets {
                    let (x, y, z) = (qi[0] as isize + d[0], qi[1] as isize + d[1], qi[2] as isize + d[2]);
                    if x < 0
                        || y < 0
                        || z < 0
                        || x >= grid.dims[0] as isize
                        || y >= grid.dims[1] as isize
                        || z >= grid.dims[2] as isize
                    {
                        continue;
                    }
                    let k = grid.flat([x as usize, y as usize, z as usize]);
                    let val = child[k];
                    if val > best.0 || (val == best.0 && k < best.1) {
                        best = (val, k);
                    }
                }
                best
            });
            for (yq, (m, _)) in y.iter_mut().zip(&msgs) {
                *yq += m;
            }
            argmax[c] = msgs.into_iter().map(|(_, k)| k).collect();
        }
        log_y[u] = y;
    }
    Ok(DpTables { log_y, argmax })
}

/// Exact MAP on a tree by max-product dynamic programming.
pub fn dp_map(
    unary: &UnaryScores,
    tree: &RootedTree,
    priors: &LimbPriors,
    cfg: &PsmConfig,
) -> Result<PsmSolution> {
    let tables = upward_pass(unary, tree, priors, cfg)?;
    let root_row = &tables.log_y[tree.root];
    let mut root_k = 0;
    for (k, &v) in root_row.iter().enumerate() {
        if v > root_row[root_k] {
            root_k = k;
        }
    }
    let mut assign = vec![0usize; unary.n_joints];
    assign[tree.root] = root_k;
    let mut order = tree.post_order();
    order.reverse();
    for u in order {
        for &c in &tree.children[u] {
            assign[c] = tables.argmax[c][assign[u]];
        }
    }
    // Report the energy of the decoded assignment in the same canonical
    // summation order as `energy`/`brute_force_map`; it equals `root_row[root_k]`
    // up to rounding.
    let g = SkeletonGraph::new(unary.n_joints, &tree.edges())?;
    let log_e = log_energy(&Assignment(assign.clone()), unary, &g, priors, cfg)?;
    Ok(PsmSolution {
        assignment: Assignment(assign),
        energy: log_e.exp(),
        log_energy: log_e,
    })
}

/// Limb-length and joint-position errors of a decoded voxel pose against
/// ground truth. A small limb error with a large joint error is the
/// signature of a pose that satisfies every limb constraint yet is wrong.
pub fn reproject_check(
    assign: &Assignment,
    grid: &VoxelGrid,
    gt: &Pose,
    g: &SkeletonGraph,
) -> Result<(f64, f64)> {
    let decoded = assign.decode(grid)?;
    if decoded.n_joints() != gt.n_joints() {
        return Err(Error::shape("assignment and ground truth disagree on joint count"));
    }
    let limb = metrics::mplle(&decoded, gt, g)?;
    let joint = metrics::mean_joint_error(&decoded, gt)?;
    Ok((limb, joint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3]) -> VoxelGrid {
        VoxelGrid::new(dims, [0.0; 3], [10.0; 3]).unwrap()
    }

    fn priors_all(g: &SkeletonGraph, mu: f64) -> LimbPriors {
        let mut p = LimbPriors::new();
        for &(u, v) in g.edges() {
            p.insert(u, v, LimbPrior { mu, sigma: 0.0 });
        }
        p
    }

    #[test]
    fn hard_pairwise_window() {
        let cfg = PsmConfig::new(50.0).unwrap();
        let p = LimbPrior { mu: 300.0, sigma: 0.0 };
        assert!(hard_pairwise([0.0; 3], [300.0, 0.0, 0.0], p, &cfg));
        assert!(!hard_pairwise([0.0; 3], [351.0, 0.0, 0.0], p, &cfg));
        assert!(hard_pairwise([0.0; 3], [350.0, 0.0, 0.0], p, &cfg));
        assert!(hard_pairwise([0.0; 3], [0.0, 250.0, 0.0], p, &cfg));
    }

    #[test]
    fn single_joint_energy_and_maps() {
        let gr = grid([2, 1, 1]);
        let g = SkeletonGraph::new(1, &[]).unwrap();
        let un = UnaryScores::new(gr, 1, vec![0.7, 0.2]).unwrap();
        let cfg = PsmConfig::for_grid(&gr);
        let e = energy(&Assignment(vec![0]), &un, &g, &LimbPriors::new(), &cfg).unwrap();
        assert!((e - 0.7).abs() < 1e-15);
        let bf = brute_force_map(&un, &g, &LimbPriors::new(), &cfg).unwrap();
        assert_eq!(bf.assignment.0, vec![0]);
        let dp = dp_map(&un, &g.root_tree(0).unwrap(), &LimbPriors::new(), &cfg).unwrap();
        assert_eq!(dp.assignment.0, vec![0]);
    }

    #[test]
    fn violated_edge_annihilates() {
        let gr = grid([3, 1, 1]);
        let g = SkeletonGraph::new(2, &[(0, 1)]).unwrap();
        let un = UnaryScores::new(gr, 2, vec![1.0; 6]).unwrap();
        let pr = priors_all(&g, 10.0);
        let cfg = PsmConfig::new(1.0).unwrap();
        assert_eq!(energy(&Assignment(vec![0, 2]), &un, &g, &pr, &cfg).unwrap(), 0.0);
        assert_eq!(energy(&Assignment(vec![0, 1]), &un, &g, &pr, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn energy_matches_scalar_loop() {
        let gr = grid([2, 2, 2]);
        let g = SkeletonGraph::new(2, &[(0, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        let un = UnaryScores::new(gr, 2, vals.clone()).unwrap();
        let pr = priors_all(&g, 10.0);
        let cfg = PsmConfig::new(0.5).unwrap();
        let centers = gr.centers();
        for a in 0..8 {
            for b in 0..8 {
                let d = dist(centers[a], centers[b]);
                let psi = if (9.5..=10.5).contains(&d) { 1.0 } else { 0.0 };
                let oracle = vals[a] * vals[8 + b] * psi;
                let e = energy(&Assignment(vec![a, b]), &un, &g, &pr, &cfg).unwrap();
                assert!((e - oracle).abs() <= 1e-15 * oracle.max(1.0), "{a} {b}");
            }
        }
    }

    #[test]
    fn all_zero_unaries() {
        let gr = grid([2, 1, 1]);
        let g = SkeletonGraph::new(2, &[(0, 1)]).unwrap();
        let un = UnaryScores::new(gr, 2, vec![0.0; 4]).unwrap();
        let pr = priors_all(&g, 10.0);
        let cfg = PsmConfig::for_grid(&gr);
        let bf = brute_force_map(&un, &g, &pr, &cfg).unwrap();
        assert_eq!((bf.energy, bf.assignment.0.clone()), (0.0, vec![0, 0]));
        let dp = dp_map(&un, &g.root_tree(0).unwrap(), &pr, &cfg).unwrap();
        assert_eq!((dp.energy, dp.assignment.0), (0.0, vec![0, 0]));
    }

    #[test]
    fn search_cap() {
        let gr = grid([10, 10, 10]);
        let g = SkeletonGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let un = UnaryScores::new(gr, 3, vec![1.0; 3000]).unwrap();
        let r = brute_force_map(&un, &g, &priors_all(&g, 10.0), &PsmConfig::for_grid(&gr));
        assert!(matches!(r, Err(Error::SearchSpaceTooLarge { .. })));
    }

    #[test]
    fn chain_on_line_grid() {
        // window admits only adjacent voxels
        let gr = grid([3, 1, 1]);
        let g = SkeletonGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let pr = priors_all(&g, 10.0);
        let cfg = PsmConfig::new(1.0).unwrap();
        let un = UnaryScores::new(gr, 3, vec![0.9, 0.1, 0.2, 0.3, 0.4, 0.35, 0.1, 0.2, 0.8]).unwrap();
        let bf = brute_force_map(&un, &g, &pr, &cfg).unwrap();
        let dp = dp_map(&un, &g.root_tree(1).unwrap(), &pr, &cfg).unwrap();
        assert_eq!(dp.assignment, bf.assignment);
        assert_eq!(bf.assignment.0, vec![0, 1, 2]);
        let a = &dp.assignment.0;
        assert!(a[0].abs_diff(a[1]) == 1 && a[1].abs_diff(a[2]) == 1);
    }

    fn random_instance(seed: u64, n: usize, dims: [usize; 3]) -> (UnaryScores, SkeletonGraph, LimbPriors) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gr = grid(dims);
        let edges: Vec<_> = (1..n).map(|v| (rng.random_range(0..v), v)).collect();
        let g = SkeletonGraph::new(n, &edges).unwrap();
        let mut pr = LimbPriors::new();
        for &(u, v) in g.edges() {
            pr.insert(u, v, LimbPrior { mu: 10.0 * rng.random_range(1..=2) as f64, sigma: 0.0 });
        }
        let vals = (0..n * gr.len()).map(|_| rng.random::<f64>()).collect();
        (UnaryScores::new(gr, n, vals).unwrap(), g, pr)
    }

    #[test]
    fn dp_equals_brute_force_on_random_trees() {
        for seed in 0..20 {
            let (un, g, pr) = random_instance(seed, 4, [2, 2, 2]);
            let cfg = PsmConfig::for_grid(&un.grid);
            let bf = brute_force_map(&un, &g, &pr, &cfg).unwrap();
            let root = (seed % 4) as usize;
            let dp = dp_map(&un, &g.root_tree(root).unwrap(), &pr, &cfg).unwrap();
            assert_eq!(dp.assignment, bf.assignment, "seed {seed}");
            assert_eq!(dp.energy, bf.energy);
            let tables = upward_pass(&un, &g.root_tree(root).unwrap(), &pr, &cfg).unwrap();
            let root_max = tables.log_y[root].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((root_max - dp.log_energy).abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_monotone() {
        for seed in 0..5 {
            let (un, g, pr) = random_instance(100 + seed, 4, [3, 2, 2]);
            let t = g.root_tree(0).unwrap();
            let mut last = 0.0;
            for eps in [0.5, 3.0, 6.0, 10.0, 20.0] {
                let e = dp_map(&un, &t, &pr, &PsmConfig::new(eps).unwrap()).unwrap().energy;
                assert!(e >= last);
                last = e;
            }
        }
    }

    #[test]
    fn scaling_unaries() {
        let (un, g, pr) = random_instance(9, 3, [3, 2, 2]);
        let cfg = PsmConfig::for_grid(&un.grid);
        let t = g.root_tree(0).unwrap();
        let a = dp_map(&un, &t, &pr, &cfg).unwrap();
        let scaled = UnaryScores::new(un.grid, 3, un.values.iter().map(|v| v * 2.5).collect()).unwrap();
        let b = dp_map(&scaled, &t, &pr, &cfg).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert!((b.energy - a.energy * 2.5f64.powi(3)).abs() < 1e-12 * b.energy);
    }

    #[test]
    fn zero_field_forces_zero_energy() {
        let (mut un, g, pr) = random_instance(4, 3, [2, 2, 2]);
        let n = un.grid.len();
        un.values[n..2 * n].iter_mut().for_each(|v| *v = 0.0);
        let cfg = PsmConfig::for_grid(&un.grid);
        assert_eq!(dp_map(&un, &g.root_tree(2).unwrap(), &pr, &cfg).unwrap().energy, 0.0);
    }

    #[test]
    fn reproject_quantization_and_mirror() {
        let gr = grid([8, 8, 8]);
        let g = SkeletonGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let gt = Pose::new(vec![[35.0, 35.0, 15.0], [35.0, 35.0, 45.0], [55.0, 35.0, 65.0]]);
        let exact = Assignment(gt.joints.iter().map(|&p| gr.nearest_voxel(p).unwrap()).collect());
        assert_eq!(reproject_check(&exact, &gr, &gt, &g).unwrap(), (0.0, 0.0));

        let off = Pose::new(gt.joints.iter().map(|p| [p[0] + 3.0, p[1] - 4.0, p[2] + 2.0]).collect());
        let a = Assignment(off.joints.iter().map(|&p| gr.nearest_voxel(p).unwrap()).collect());
        let (_, joint) = reproject_check(&a, &gr, &off, &g).unwrap();
        assert!(joint <= 0.5 * gr.voxel_diagonal());

        // reflect depth (x) through the plane x = 40: centers map to centers
        let mirrored: Vec<usize> = gt
            .joints
            .iter()
            .map(|p| gr.nearest_voxel([80.0 - p[0], p[1], p[2]]).unwrap())
            .collect();
        let (limb, joint) = reproject_check(&Assignment(mirrored), &gr, &gt, &g).unwrap();
        assert!(limb < 1e-9);
        assert!(joint > 10.0);
    }
}
