//! Human skeleton graph, limb-length priors and tree orientation.
//!
//! Joints are identified by index. Edges are unordered and stored once as
//! `(min, max)` pairs in ascending order; the contextual-joint relation is
//! symmetric by construction.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{dist, Pose};

/// Undirected human graph over `n_joints` joints.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    n_joints: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    names: Option<Vec<String>>,
}

/// Mean and standard deviation of a limb length, in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimbPrior {
    pub mu: f64,
    pub sigma: f64,
}

/// One prior per edge, looked up symmetrically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LimbPriors {
    map: BTreeMap<(usize, usize), LimbPrior>,
}

/// Orientation of an acyclic connected graph away from `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct RootedTree {
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
}

#[inline]
fn key(u: usize, v: usize) -> (usize, usize) {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

impl SkeletonGraph {
    /// Builds a graph, deduplicating `(u, v)` / `(v, u)` repeats.
    pub fn new(n_joints: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut set = std::collections::BTreeSet::new();
        for &(u, v) in edges {
            if u >= n_joints || v >= n_joints || u == v {
                return Err(Error::InvalidEdge(u, v, n_joints));
            }
            set.insert(key(u, v));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n_joints];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(SkeletonGraph {
            n_joints,
            edges,
            neighbors,
            names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_joints {
            return Err(Error::shape(format!(
                "{} names for {} joints",
                names.len(),
                self.n_joints
            )));
        }
        self.names = Some(names);
        Ok(self)
    }

    /// The 17-joint Human3.6M layout with its 16 limbs. Joint 0 is the mid-hip.
    pub fn h36m() -> Self {
        let names = [
            "hip", "r_hip", "r_knee", "r_foot", "l_hip", "l_knee", "l_foot", "spine", "thorax",
            "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
        ];
        SkeletonGraph::new(17, &H36M_EDGES)
            .and_then(|g| g.with_names(names.iter().map(|s| s.to_string()).collect()))
            .expect("static skeleton is valid")
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    /// Unordered edges as ascending `(min, max)` pairs.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    /// Contextual joints of `u`, ascending.
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u != v && self.edges.binary_search(&key(u, v)).is_ok()
    }

    fn components(&self) -> (usize, bool) {
        // union-find; returns (component count, saw a cycle)
        let mut parent: Vec<usize> = (0..self.n_joints).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut count = self.n_joints;
        let mut cyclic = false;
        for &(u, v) in &self.edges {
            let (a, b) = (find(&mut parent, u), find(&mut parent, v));
            if a == b {
                cyclic = true;
            } else {
                parent[a] = b;
                count -= 1;
            }
        }
        (count, cyclic)
    }

    /// True iff the undirected graph has no cycle.
    pub fn is_acyclic(&self) -> bool {
        !self.components().1
    }

    pub fn is_connected(&self) -> bool {
        self.components().0 <= 1
    }

    /// Orients the tree away from `root` (BFS); children are ascending.
    pub fn root_tree(&self, root: usize) -> Result<RootedTree> {
        if root >= self.n_joints {
            return Err(Error::IndexOutOfRange {
                index: root,
                len: self.n_joints,
            });
        }
        let (count, cyclic) = self.components();
        if cyclic {
            return Err(Error::CyclicGraph);
        }
        if count > 1 {
            return Err(Error::DisconnectedGraph);
        }
        let mut parent = vec![None; self.n_joints];
        let mut children = vec![Vec::new(); self.n_joints];
        let mut seen = vec![false; self.n_joints];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    children[u].push(v);
                    queue.push_back(v);
                }
            }
        }
        Ok(RootedTree {
            root,
            parent,
            children,
        })
    }

    /// Reads the JSON skeleton file format.
    pub fn load(path: impl AsRef<Path>) -> Result<(SkeletonGraph, Option<LimbPriors>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SkeletonFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        file.into_parts()
    }

    pub fn save(&self, priors: Option<&LimbPriors>, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&SkeletonFile::from_parts(self, priors))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub const H36M_EDGES: [(usize, usize); 16] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (0, 4),
    (4, 5),
    (5, 6),
    (0, 7),
    (7, 8),
    (8, 9),
    (9, 10),
    (8, 11),
    (11, 12),
    (12, 13),
    (8, 14),
    (14, 15),
    (15, 16),
];

impl RootedTree {
    /// Joints in an order where every child precedes its parent.
    pub fn post_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.parent.len());
        let mut stack = vec![(self.root, false)];
        while let Some((u, expanded)) = stack.pop() {
            if expanded {
                order.push(u);
            } else {
                stack.push((u, true));
                for &c in self.children[u].iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        order
    }

    /// Parent-to-child pairs in pre-order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut order = self.post_order();
        order.reverse();
        for u in order {
            for &c in &self.children[u] {
                out.push((u, c));
            }
        }
        out
    }
}

impl LimbPriors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, u: usize, v: usize, prior: LimbPrior) {
        self.map.insert(key(u, v), prior);
    }

    pub fn get(&self, u: usize, v: usize) -> Option<LimbPrior> {
        self.map.get(&key(u, v)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), LimbPrior)> + '_ {
        self.map.iter().map(|(&k, &p)| (k, p))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Checks that every edge of `g` has a prior.
    pub fn covers(&self, g: &SkeletonGraph) -> Result<()> {
        for &(u, v) in g.edges() {
            if self.get(u, v).is_none() {
                return Err(Error::InvalidConfig(format!("no limb prior for edge ({u}, {v})")));
            }
        }
        Ok(())
    }

    /// Copy with every sigma raised to at least `floor`.
    pub fn floored(&self, floor: f64) -> LimbPriors {
        LimbPriors {
            map: self
                .map
                .iter()
                .map(|(&k, p)| {
                    (
                        k,
                        LimbPrior {
                            mu: p.mu,
                            sigma: p.sigma.max(floor),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Per-edge mean and population standard deviation of limb length.
pub fn estimate_priors(poses: &[Pose], g: &SkeletonGraph) -> Result<LimbPriors> {
    if poses.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for p in poses {
        if p.n_joints() != g.n_joints() {
            return Err(Error::shape(format!(
                "pose with {} joints for a {}-joint skeleton",
                p.n_joints(),
                g.n_joints()
            )));
        }
    }
    let n = poses.len() as f64;
    let mut priors = LimbPriors::new();
    for &(u, v) in g.edges() {
        let lengths: Vec<f64> = poses.iter().map(|p| dist(p.joints[u], p.joints[v])).collect();
        let mu = lengths.iter().sum::<f64>() / n;
        let var = lengths.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / n;
        priors.insert(u, v, LimbPrior { mu, sigma: var.sqrt() });
    }
    Ok(priors)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    n_joints: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    priors: Option<Vec<PriorEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorEntry {
    u: usize,
    v: usize,
    mu: f64,
    sigma: f64,
}

impl SkeletonFile {
    fn into_parts(self) -> Result<(SkeletonGraph, Option<LimbPriors>)> {
        let edges: Vec<_> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        let mut g = SkeletonGraph::new(self.n_joints, &edges)?;
        if let Some(names) = self.names {
            g = g.with_names(names)?;
        }
        let priors = match self.priors {
            None => None,
            Some(list) => {
                let mut priors = LimbPriors::new();
                for p in list {
                    if !g.has_edge(p.u, p.v) {
                        return Err(Error::InvalidEdge(p.u, p.v, g.n_joints()));
                    }
                    if !(p.mu > 0.0) || !(p.sigma >= 0.0) {
                        return Err(Error::InvalidConfig(format!(
                            "prior ({}, {}) needs mu > 0 and sigma >= 0",
                            p.u, p.v
                        )));
                    }
                    priors.insert(p.u, p.v, LimbPrior { mu: p.mu, sigma: p.sigma });
                }
                Some(priors)
            }
        };
        Ok((g, priors))
    }

    fn from_parts(g: &SkeletonGraph, priors: Option<&LimbPriors>) -> Self {
        SkeletonFile {
            n_joints: g.n_joints(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            names: g.names.clone(),
            priors: priors.map(|p| {
                p.iter()
                    .map(|((u, v), p)| PriorEntry {
                        u,
                        v,
                        mu: p.mu,
                        sigma: p.sigma,
                    })
                    .collect()
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain3() -> SkeletonGraph {
        SkeletonGraph::new(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn build_and_dedup() {
        assert_eq!(SkeletonGraph::new(2, &[(0, 1)]).unwrap().edges().len(), 1);
        let g = SkeletonGraph::new(3, &[(0, 1), (1, 0), (1, 2)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert!(g.has_edge(1, 0) && g.has_edge(0, 1));
        assert_eq!(SkeletonGraph::h36m().edges().len(), 16);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(matches!(
            SkeletonGraph::new(2, &[(0, 2)]),
            Err(Error::InvalidEdge(0, 2, 2))
        ));
        assert!(matches!(SkeletonGraph::new(2, &[(1, 1)]), Err(Error::InvalidEdge(..))));
    }

    #[test]
    fn acyclicity() {
        assert!(chain3().is_acyclic());
        let tri = SkeletonGraph::new(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        assert!(!tri.is_acyclic());
        let h = SkeletonGraph::h36m();
        assert!(h.is_acyclic() && h.is_connected());
        assert_eq!(h.edges().len(), h.n_joints() - 1);
    }

    #[test]
    fn rooting() {
        let t = chain3().root_tree(1).unwrap();
        assert_eq!(t.children[1], vec![0, 2]);
        assert_eq!(t.parent[1], None);
        let t = chain3().root_tree(0).unwrap();
        assert_eq!(t.parent[2], Some(1));
        let tri = SkeletonGraph::new(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        assert!(matches!(tri.root_tree(0), Err(Error::CyclicGraph)));
        let split = SkeletonGraph::new(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(matches!(split.root_tree(0), Err(Error::DisconnectedGraph)));
    }

    #[test]
    fn post_order_visits_children_first() {
        let t = SkeletonGraph::h36m().root_tree(0).unwrap();
        let order = t.post_order();
        assert_eq!(order.len(), 17);
        assert_eq!(*order.last().unwrap(), 0);
        let pos: Vec<usize> = {
            let mut p = vec![0; 17];
            for (i, &u) in order.iter().enumerate() {
                p[u] = i;
            }
            p
        };
        for (u, c) in t.edges() {
            assert!(pos[c] < pos[u]);
        }
    }

    #[test]
    fn prior_statistics() {
        let g = SkeletonGraph::new(2, &[(0, 1)]).unwrap();
        let single = [Pose::new(vec![[0.0; 3], [300.0, 0.0, 0.0]])];
        let p = estimate_priors(&single, &g).unwrap().get(1, 0).unwrap();
        assert_eq!((p.mu, p.sigma), (300.0, 0.0));
        let two = [
            Pose::new(vec![[0.0; 3], [280.0, 0.0, 0.0]]),
            Pose::new(vec![[0.0; 3], [0.0, 320.0, 0.0]]),
        ];
        let p = estimate_priors(&two, &g).unwrap().get(0, 1).unwrap();
        assert!((p.mu - 300.0).abs() < 1e-12 && (p.sigma - 20.0).abs() < 1e-12);
        assert!(matches!(estimate_priors(&[], &g), Err(Error::EmptyDataset)));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("skel.json");
        let g = SkeletonGraph::h36m();
        let mut priors = LimbPriors::new();
        for &(u, v) in g.edges() {
            priors.insert(u, v, LimbPrior { mu: 100.0 + u as f64, sigma: 2.5 });
        }
        g.save(Some(&priors), &path).unwrap();
        let (g2, p2) = SkeletonGraph::load(&path).unwrap();
        assert_eq!(g, g2);
        assert_eq!(p2.unwrap(), priors);
    }

    fn random_tree(n: usize, picks: &[usize]) -> Vec<(usize, usize)> {
        (1..n).map(|v| (picks[v - 1] % v, v)).collect()
    }

    proptest! {
        #[test]
        fn rebuild_is_idempotent(n in 2usize..12, raw in proptest::collection::vec((0usize..12, 0usize..12), 0..30)) {
            let edges: Vec<_> = raw.into_iter().map(|(a, b)| (a % n, b % n)).filter(|(a, b)| a != b).collect();
            let g = SkeletonGraph::new(n, &edges).unwrap();
            let again = SkeletonGraph::new(n, g.edges()).unwrap();
            prop_assert_eq!(g, again);
        }

        #[test]
        fn rooting_preserves_edges(n in 1usize..15, picks in proptest::collection::vec(0usize..1000, 14), root in 0usize..15) {
            let g = SkeletonGraph::new(n, &random_tree(n, &picks)).unwrap();
            let t = g.root_tree(root % n).unwrap();
            let rebuilt = SkeletonGraph::new(n, &t.edges()).unwrap();
            prop_assert_eq!(rebuilt.edges(), g.edges());
            for c in 0..n {
                for w in t.children[c].windows(2) {
                    prop_assert!(w[0] < w[1]);
                }
            }
        }

        #[test]
        fn priors_rigid_invariant(angle in 0.0f64..6.28, t in proptest::array::uniform3(-500.0f64..500.0)) {
            let g = SkeletonGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
            let poses = vec![
                Pose::new(vec![[0.0, 0.0, 0.0], [100.0, 20.0, 0.0], [150.0, -30.0, 40.0]]),
                Pose::new(vec![[10.0, 0.0, 5.0], [90.0, 25.0, 0.0], [160.0, -20.0, 30.0]]),
            ];
            let (c, s) = (angle.cos(), angle.sin());
            let r = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
            let moved: Vec<_> = poses.iter().map(|p| p.transformed(&r, t)).collect();
            let a = estimate_priors(&poses, &g).unwrap();
            let b = estimate_priors(&moved, &g).unwrap();
            for ((k, pa), (_, pb)) in a.iter().zip(b.iter()) {
                prop_assert!((pa.mu - pb.mu).abs() < 1e-9, "{:?}", k);
                prop_assert!((pa.sigma - pb.sigma).abs() < 1e-9);
            }
        }
    }
}
