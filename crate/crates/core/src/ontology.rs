//! Label graph over ontology nodes and its combinatorial Laplacian.
//!
//! The Laplacian is the unnormalized `L = Deg - Adj`, whose quadratic form is
//! `gᵀLg = Σ_{(i,j)∈E} (g_i - g_j)²` with no ½ factor.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const GRAPH_FORMAT: &str = "onto-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    leaf_ids: Vec<usize>,
    adjacency: Vec<Vec<usize>>,
}

impl LabelGraph {
    /// Validates and builds a graph. Edges are undirected, without self loops
    /// or duplicates, and the graph must be connected.
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>, leaf_ids: Vec<usize>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::config("graph has no nodes"));
        }
        let mut seen = BTreeSet::new();
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(i, j) in &edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::config(format!("edge ({i},{j}) out of range")));
            }
            if i == j {
                return Err(Error::config(format!("self loop at node {i}")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::config(format!("duplicate edge ({i},{j})")));
            }
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        let mut distinct = BTreeSet::new();
        for &l in &leaf_ids {
            if l >= num_nodes || !distinct.insert(l) {
                return Err(Error::config(format!("invalid or repeated leaf id {l}")));
            }
        }
        if leaf_ids.is_empty() {
            return Err(Error::config("graph declares no leaf ids"));
        }
        let g = Self {
            num_nodes,
            edges,
            leaf_ids,
            adjacency,
        };
        if g.bfs_distances(0).iter().any(Option::is_none) {
            return Err(Error::config("graph is not connected"));
        }
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn leaf_ids(&self) -> &[usize] {
        &self.leaf_ids
    }

    pub fn num_classes(&self) -> usize {
        self.leaf_ids.len()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Hop distance from `source` to every node; `None` when unreachable.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Embeds a distribution over classes into node space.
    pub fn classes_to_nodes(&self, class_probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes];
        for (c, &p) in class_probs.iter().enumerate() {
            out[self.leaf_ids[c]] = p;
        }
        out
    }

    pub fn one_hot_leaf(&self, class: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes];
        out[self.leaf_ids[class]] = 1.0;
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = GraphFile {
            num_nodes: self.num_nodes,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            leaf_ids: self.leaf_ids.clone(),
            format: GRAPH_FORMAT.to_string(),
        };
        fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: GraphFile = serde_json::from_slice(&bytes)?;
        if file.format != GRAPH_FORMAT {
            return Err(Error::format(path, format!("unknown graph version {:?}", file.format)));
        }
        LabelGraph::new(
            file.num_nodes,
            file.edges.into_iter().map(|[i, j]| (i, j)).collect(),
            file.leaf_ids,
        )
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    leaf_ids: Vec<usize>,
    format: String,
}

/// Complete `branching`-ary tree of the given depth, nodes numbered in
/// breadth-first order. The first `num_classes` deepest leaves become the
/// class leaves.
pub fn build_tree_ontology(branching: usize, depth: usize, num_classes: usize) -> Result<LabelGraph> {
    if branching < 2 {
        return Err(Error::config("tree branching must be >= 2"));
    }
    if depth < 1 {
        return Err(Error::config("tree depth must be >= 1"));
    }
    let num_leaves = branching
        .checked_pow(depth as u32)
        .ok_or_else(|| Error::config("tree too large"))?;
    if num_leaves < num_classes {
        return Err(Error::config(format!(
            "tree has {num_leaves} leaves, fewer than {num_classes} classes"
        )));
    }
    let num_nodes = (0..=depth).map(|d| branching.pow(d as u32)).sum::<usize>();
    let internal = num_nodes - num_leaves;
    let edges = (1..num_nodes).map(|v| ((v - 1) / branching, v)).collect();
    let leaf_ids = (internal..internal + num_classes).collect();
    LabelGraph::new(num_nodes, edges, leaf_ids)
}

/// Dense symmetric `|V|×|V|` Laplacian, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    n: usize,
    data: Vec<f64>,
}

impl Laplacian {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// `Lv`, evaluated as `Σ_j −L_ij·(v_i − v_j)` (rows sum to zero), so
    /// constant vectors map to exactly zero.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .enumerate()
                    .filter(|&(j, (a, _))| j != i && *a != 0.0)
                    .map(|(_, (a, vj))| -a * (v[i] - vj))
                    .sum()
            })
            .collect()
    }

    /// `vᵀLv`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let lv = self.apply(v);
        v.iter().zip(&lv).map(|(a, b)| a * b).sum()
    }
}

pub fn laplacian(graph: &LabelGraph) -> Laplacian {
    let n = graph.num_nodes();
    let mut data = vec![0.0; n * n];
    for &(i, j) in graph.edges() {
        data[i * n + j] -= 1.0;
        data[j * n + i] -= 1.0;
        data[i * n + i] += 1.0;
        data[j * n + j] += 1.0;
    }
    Laplacian { n, data }
}

/// Smoothness penalty `gᵀLg` and its gradient `2Lg`.
pub fn smoothness(g: &[f64], lap: &Laplacian) -> Result<(f64, Vec<f64>)> {
    check_dim("smoothness input", lap.dim(), g.len())?;
    let lg = lap.apply(g);
    let value = g.iter().zip(&lg).map(|(a, b)| a * b).sum();
    let grad = lg.into_iter().map(|v| 2.0 * v).collect();
    Ok((value, grad))
}

/// Distribution with weight ∝ `alpha^dist(node, source)`, normalized.
///
/// `alpha = 0` yields the one-hot on `source` (the degenerate-smoothing limit).
pub fn propagate_mass(graph: &LabelGraph, source: usize, alpha: f64) -> Result<Vec<f64>> {
    if source >= graph.num_nodes() {
        return Err(Error::config(format!("source node {source} out of range")));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(format!("propagation alpha {alpha} outside [0,1)")));
    }
    let dist = graph.bfs_distances(source);
    let weights: Vec<f64> = dist
        .iter()
        .map(|d| alpha.powi(d.expect("connected graph") as i32))
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path3() -> LabelGraph {
        LabelGraph::new(3, vec![(0, 1), (1, 2)], vec![0, 2]).unwrap()
    }

    #[test]
    fn smallest_tree() {
        let g = build_tree_ontology(2, 1, 2).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.edges().len(), 2);
        assert_eq!(g.leaf_ids(), &[1, 2]);
    }

    #[test]
    fn depth_three_binary_tree() {
        let g = build_tree_ontology(2, 3, 8).unwrap();
        assert_eq!(g.num_nodes(), 15);
        assert_eq!(g.edges().len(), 14);
        assert_eq!(g.leaf_ids(), &[7, 8, 9, 10, 11, 12, 13, 14]);
        for &l in g.leaf_ids() {
            assert_eq!(g.degree(l), 1);
        }
        assert!(g.bfs_distances(0).iter().all(Option::is_some));
    }

    #[test]
    fn tree_argument_errors() {
        assert!(build_tree_ontology(1, 3, 1).is_err());
        assert!(build_tree_ontology(2, 0, 1).is_err());
        assert!(build_tree_ontology(2, 2, 5).is_err());
    }

    #[test]
    fn graph_validation() {
        assert!(LabelGraph::new(3, vec![(0, 1)], vec![0]).is_err()); // disconnected
        assert!(LabelGraph::new(3, vec![(0, 1), (1, 0), (1, 2)], vec![0]).is_err());
        assert!(LabelGraph::new(2, vec![(0, 0), (0, 1)], vec![0]).is_err());
        assert!(LabelGraph::new(2, vec![(0, 2)], vec![0]).is_err());
        assert!(LabelGraph::new(2, vec![(0, 1)], vec![1, 1]).is_err());
    }

    #[test]
    fn path_laplacian() {
        let l = laplacian(&path3());
        let expect = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(l.get(i, j), expect[i][j]);
            }
        }
        assert_eq!(l.apply(&[1.0, 1.0, 1.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn path_smoothness() {
        let l = laplacian(&path3());
        let (v, g) = smoothness(&[1.0, 0.0, 0.0], &l).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g, vec![2.0, -2.0, 0.0]);
        assert_eq!(smoothness(&[3.5; 3], &l).unwrap().0, 0.0);
        assert!(smoothness(&[1.0, 0.0], &l).is_err());
    }

    #[test]
    fn smoothness_gradient_finite_difference() {
        let g = build_tree_ontology(3, 2, 4).unwrap();
        let l = laplacian(&g);
        let x: Vec<f64> = (0..g.num_nodes()).map(|i| ((i * 37 % 11) as f64) / 7.0 - 0.6).collect();
        let (_, grad) = smoothness(&x, &l).unwrap();
        let h = 1e-5;
        let mut num = Vec::new();
        for i in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p[i] += h;
            m[i] -= h;
            num.push((l.quadratic_form(&p) - l.quadratic_form(&m)) / (2.0 * h));
        }
        let diff: f64 = grad.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-6);
    }

    #[test]
    fn path_propagation() {
        let p = propagate_mass(&path3(), 0, 0.5).unwrap();
        let expect = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(propagate_mass(&path3(), 1, 0.0).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(propagate_mass(&path3(), 3, 0.5).is_err());
        assert!(propagate_mass(&path3(), 0, 1.0).is_err());
    }

    #[test]
    fn graph_json_roundtrip() {
        let g = build_tree_ontology(2, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        g.write_json(&p).unwrap();
        assert_eq!(LabelGraph::read_json(&p).unwrap(), g);
        let text = std::fs::read_to_string(&p).unwrap().replace("onto-v1", "onto-v0");
        std::fs::write(&p, text).unwrap();
        assert!(LabelGraph::read_json(&p).is_err());
    }

    /// Random connected graph: a random spanning tree plus extra edges.
    fn arb_graph() -> impl Strategy<Value = LabelGraph> {
        (2usize..12)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    proptest::collection::vec(any::<u32>(), n - 1),
                    proptest::collection::vec((0..n, 0..n), 0..n),
                )
            })
            .prop_map(|(n, parents, extra)| {
                let mut set = BTreeSet::new();
                for v in 1..n {
                    let p = parents[v - 1] as usize % v;
                    set.insert((p, v));
                }
                for (a, b) in extra {
                    if a != b {
                        set.insert((a.min(b), a.max(b)));
                    }
                }
                LabelGraph::new(n, set.into_iter().collect(), vec![0]).unwrap()
            })
    }

    proptest! {
        #[test]
        fn propagation_is_distribution_and_monotone(g in arb_graph(), src in 0usize..12, alpha in 0.01f64..0.99) {
            let src = src % g.num_nodes();
            let p = propagate_mass(&g, src, alpha).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let d = g.bfs_distances(src);
            for i in 0..p.len() {
                prop_assert!(p[i] >= 0.0);
                for j in 0..p.len() {
                    if d[i].unwrap() <= d[j].unwrap() {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn laplacian_rows_sum_to_zero_and_symmetric(g in arb_graph()) {
            let l = laplacian(&g);
            for i in 0..l.dim() {
                prop_assert!(l.row(i).iter().sum::<f64>().abs() < 1e-12);
                for j in 0..l.dim() {
                    prop_assert_eq!(l.get(i, j), l.get(j, i));
                }
            }
        }
    }
}
