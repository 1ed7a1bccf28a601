//! Graph container and dataset partitioning.
//!
//! Graphs are immutable undirected adjacency in CSR form. Canonical form:
//! node order is ascending lexicographic external id, neighbor lists are
//! sorted ascending, no self-loops, no duplicates. Everything downstream
//! (masking, layers, trees, caching) relies on this ordering for
//! reproducible float summation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Undirected graph in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_ids: Vec<String>,
    row_offsets: Vec<usize>,
    neighbor_ids: Vec<u32>,
}

impl Graph {
    /// Build from external ids and undirected edges given as id-index pairs.
    /// Deduplicates edges and drops self-loops; panics if an edge index is
    /// out of range (callers validate ids first).
    pub fn from_edges(node_ids: Vec<String>, edges: &[(u32, u32)]) -> Graph {
        let n = node_ids.len();
        let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            assert!((a as usize) < n && (b as usize) < n, "edge index out of range");
            if a == b {
                continue;
            }
            adj[a as usize].insert(b);
            adj[b as usize].insert(a);
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut neighbor_ids = Vec::new();
        row_offsets.push(0);
        for set in adj {
            neighbor_ids.extend(set);
            row_offsets.push(neighbor_ids.len());
        }
        Graph {
            node_ids,
            row_offsets,
            neighbor_ids,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Undirected edge count (handshake: half the stored adjacency entries).
    pub fn num_edges(&self) -> usize {
        self.neighbor_ids.len() / 2
    }

    pub fn degree(&self, v: usize) -> usize {
        self.row_offsets[v + 1] - self.row_offsets[v]
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.neighbor_ids[self.row_offsets[v]..self.row_offsets[v + 1]]
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_id(&self, v: usize) -> &str {
        &self.node_ids[v]
    }

    /// Index of an external id, if present. Node order is sorted, so this is
    /// a binary search.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.binary_search_by(|probe| probe.as_str().cmp(id)).ok()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&(v as u32)).is_ok()
    }
}

/// Dense per-node feature matrix, rows aligned with graph node order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: crate::engine::Tensor,
}

impl FeatureMatrix {
    pub fn new(values: crate::engine::Tensor) -> Result<FeatureMatrix> {
        values.check_finite("feature matrix")?;
        Ok(FeatureMatrix { values })
    }

    pub fn num_nodes(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &crate::engine::Tensor {
        &self.values
    }

    pub fn row(&self, v: usize) -> &[f64] {
        self.values.row(v)
    }

    /// Rows for `keep`, in the given order.
    pub fn subset(&self, keep: &[usize]) -> FeatureMatrix {
        let mut out = crate::engine::Tensor::zeros(keep.len(), self.dim());
        for (i, &v) in keep.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.values.row(v));
        }
        FeatureMatrix { values: out }
    }
}

/// Integer class labels per node.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    labels: Vec<u32>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<u32>, num_classes: usize) -> Result<LabelVector> {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Ingest(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabelVector {
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, v: usize) -> u32 {
        self.labels[v]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.labels
    }

    pub fn subset(&self, keep: &[usize]) -> LabelVector {
        LabelVector {
            labels: keep.iter().map(|&v| self.labels[v]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }
}

/// A stratified train/validation/test partition of node indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn total_len(&self) -> usize {
        self.train_ids.len() + self.val_ids.len() + self.test_ids.len()
    }
}

/// Largest-remainder apportionment of `frac * counts[c]` per class, summing
/// to `round(frac * total)`. Ties broken by class index.
fn apportion(counts: &[usize], frac: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (frac * total as f64).round() as usize;
    let mut floors: Vec<usize> = counts.iter().map(|&c| (frac * c as f64).floor() as usize).collect();
    let assigned: usize = floors.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = frac * counts[a] as f64 - floors[a] as f64;
        let rb = frac * counts[b] as f64 - floors[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().take(target.saturating_sub(assigned)) {
        floors[c] += 1;
    }
    floors
}

/// Stratified split: per-class proportions preserved within one node of the
/// requested global fractions; deterministic for a fixed seed.
pub fn stratified_split(
    labels: &LabelVector,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<SplitSpec> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train_frac {train_frac} outside (0,1)")));
    }
    if !(val_frac > 0.0 && train_frac + val_frac < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < val_frac and train_frac + val_frac < 1, got {train_frac} + {val_frac}"
        )));
    }
    let hist = labels.class_histogram();
    for (class, &count) in hist.iter().enumerate() {
        if count < 3 {
            return Err(Error::ClassTooSmall {
                class,
                count,
                parts: 3,
            });
        }
    }
    let train_counts = apportion(&hist, train_frac);
    let val_counts = apportion(&hist, val_frac);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    let mut test_ids = Vec::new();
    for class in 0..labels.num_classes() {
        let mut members: Vec<usize> = (0..labels.len())
            .filter(|&v| labels.get(v) as usize == class)
            .collect();
        members.shuffle(&mut rng);
        let nt = train_counts[class].min(members.len().saturating_sub(2));
        let nv = val_counts[class].min(members.len() - nt - 1);
        train_ids.extend(&members[..nt]);
        val_ids.extend(&members[nt..nt + nv]);
        test_ids.extend(&members[nt + nv..]);
    }
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    test_ids.sort_unstable();
    Ok(SplitSpec {
        train_ids,
        val_ids,
        test_ids,
        seed,
    })
}

/// Subgraph induced by `keep` (node indices into `g`); kept nodes appear in
/// ascending original order, which preserves canonical form.
pub fn induced_subgraph(g: &Graph, keep: &[usize]) -> Result<(Graph, Vec<usize>)> {
    let mut sorted: Vec<usize> = keep.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(&bad) = sorted.iter().find(|&&v| v >= g.num_nodes()) {
        return Err(Error::UnknownNode {
            id: format!("#{bad}"),
        });
    }
    let mut local_of = vec![usize::MAX; g.num_nodes()];
    for (local, &orig) in sorted.iter().enumerate() {
        local_of[orig] = local;
    }
    let node_ids: Vec<String> = sorted.iter().map(|&v| g.node_id(v).to_string()).collect();
    let mut row_offsets = Vec::with_capacity(sorted.len() + 1);
    let mut neighbor_ids = Vec::new();
    row_offsets.push(0);
    for &orig in &sorted {
        for &u in g.neighbors(orig) {
            let lu = local_of[u as usize];
            if lu != usize::MAX {
                neighbor_ids.push(lu as u32);
            }
        }
        row_offsets.push(neighbor_ids.len());
    }
    Ok((
        Graph {
            node_ids,
            row_offsets,
            neighbor_ids,
        },
        sorted,
    ))
}

/// Aggregation adjacency: for each node v the sorted member list of
/// `{v} ∪ N_v`, flattened. GAT/SGAT attention runs over these segments; the
/// stored graph itself stays self-loop-free.
#[derive(Debug, Clone)]
pub struct AggAdj {
    offsets: Vec<usize>,
    members: Vec<u32>,
}

impl AggAdj {
    pub fn build(g: &Graph) -> AggAdj {
        let n = g.num_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut members = Vec::with_capacity(g.neighbor_ids.len() + n);
        offsets.push(0);
        for v in 0..n {
            let nbrs = g.neighbors(v);
            let pos = nbrs.partition_point(|&u| (u as usize) < v);
            members.extend_from_slice(&nbrs[..pos]);
            members.push(v as u32);
            members.extend_from_slice(&nbrs[pos..]);
            offsets.push(members.len());
        }
        AggAdj { offsets, members }
    }

    pub fn num_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_pairs(&self) -> usize {
        self.members.len()
    }

    pub fn segment(&self, v: usize) -> &[u32] {
        &self.members[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn segment_bounds(&self, v: usize) -> (usize, usize) {
        (self.offsets[v], self.offsets[v + 1])
    }

    pub fn members(&self) -> &[u32] {
        &self.members
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_labels(per_class: &[usize]) -> LabelVector {
        let mut labels = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            labels.extend(std::iter::repeat(c as u32).take(n));
        }
        LabelVector::new(labels, per_class.len()).unwrap()
    }

    fn triangle() -> Graph {
        Graph::from_edges(
            vec!["a".into(), "b".into(), "c".into()],
            &[(0, 1), (1, 2), (2, 0)],
        )
    }

    #[test]
    fn from_edges_dedups_and_symmetrizes() {
        let g = Graph::from_edges(
            vec!["a".into(), "b".into(), "c".into()],
            &[(0, 1), (1, 0), (1, 2), (1, 1)],
        );
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(0), &[1]);
        let handshake: usize = (0..3).map(|v| g.degree(v)).sum();
        assert_eq!(handshake, 2 * g.num_edges());
    }

    #[test]
    fn split_counts_balanced_two_class() {
        // 10 nodes, 2 balanced classes, train 0.5 / val 0.1:
        // 5 train (3 of one class, 2 of the other), 1 val, 4 test.
        let labels = toy_labels(&[5, 5]);
        let s = stratified_split(&labels, 0.5, 0.1, 7).unwrap();
        assert_eq!(s.train_ids.len(), 5);
        assert_eq!(s.val_ids.len(), 1);
        assert_eq!(s.test_ids.len(), 4);
        let class0_train = s.train_ids.iter().filter(|&&v| v < 5).count();
        assert!(class0_train == 2 || class0_train == 3);
        assert_eq!(s.total_len(), 10);
    }

    #[test]
    fn split_deterministic_and_disjoint() {
        let labels = toy_labels(&[8, 5, 7]);
        let a = stratified_split(&labels, 0.3, 0.2, 42).unwrap();
        let b = stratified_split(&labels, 0.3, 0.2, 42).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a
            .train_ids
            .iter()
            .chain(&a.val_ids)
            .chain(&a.test_ids)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_tiny_class() {
        let labels = toy_labels(&[6, 2]);
        match stratified_split(&labels, 0.5, 0.2, 1) {
            Err(Error::ClassTooSmall { class, .. }) => assert_eq!(class, 1),
            other => panic!("expected ClassTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn induced_triangle_edge() {
        let g = triangle();
        let (sub, kept) = induced_subgraph(&g, &[0, 1]).unwrap();
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(sub.num_nodes(), 2);
        assert_eq!(sub.num_edges(), 1);
        assert_eq!(sub.neighbors(0), &[1]);
    }

    #[test]
    fn induced_identity_and_empty() {
        let g = triangle();
        let (all, _) = induced_subgraph(&g, &[0, 1, 2]).unwrap();
        assert_eq!(all, g);
        let (none, _) = induced_subgraph(&g, &[]).unwrap();
        assert_eq!(none.num_nodes(), 0);
        assert_eq!(none.num_edges(), 0);
    }

    #[test]
    fn induced_idempotent() {
        let g = Graph::from_edges(
            (0..6).map(|i| format!("n{i}")).collect(),
            &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)],
        );
        let keep = [0, 1, 2, 4];
        let (s1, _) = induced_subgraph(&g, &keep).unwrap();
        let (s2, _) = induced_subgraph(&s1, &[0, 1, 2, 3]).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn induced_unknown_id_errors() {
        let g = triangle();
        assert!(induced_subgraph(&g, &[5]).is_err());
    }

    #[test]
    fn agg_adj_inserts_self_sorted() {
        let g = triangle();
        let agg = AggAdj::build(&g);
        assert_eq!(agg.segment(0), &[0, 1, 2]);
        assert_eq!(agg.segment(1), &[0, 1, 2]);
        assert_eq!(agg.segment(2), &[0, 1, 2]);
        let path = Graph::from_edges(vec!["a".into(), "b".into(), "c".into()], &[(0, 1), (1, 2)]);
        let agg = AggAdj::build(&path);
        assert_eq!(agg.segment(0), &[0, 1]);
        assert_eq!(agg.segment(1), &[0, 1, 2]);
        assert_eq!(agg.segment(2), &[1, 2]);
    }
}
