//! Reverse-mode gradient tape.
//!
//! A `Tape` records one forward pass as a flat list of nodes in execution
//! order, so backward is a single reverse sweep. Values are computed eagerly;
//! calling [`Tape::backward`] on a scalar loss populates gradients for every
//! node reachable from a parameter. Graph-shaped operations (neighbor sums,
//! segment attention) are first-class ops so that no dense N x N matrix is
//! ever materialized.

use std::rc::Rc;

use rand::Rng;

use crate::engine::tensor::{SparseMatrix, Tensor};
use crate::error::{Error, Result};
use crate::graph::{AggAdj, Graph};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Handle to a persistent parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Parameter values and their gradients, persistent across tapes.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, value: Tensor) -> ParamId {
        let (r, c) = value.shape();
        self.values.push(value);
        self.grads.push(Tensor::zeros(r, c));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, p: ParamId) -> &Tensor {
        &self.values[p.0]
    }

    pub fn value_mut(&mut self, p: ParamId) -> &mut Tensor {
        &mut self.values[p.0]
    }

    pub fn grad(&self, p: ParamId) -> &Tensor {
        &self.grads[p.0]
    }

    pub fn grad_mut(&mut self, p: ParamId) -> &mut Tensor {
        &mut self.grads[p.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Snapshot of all parameter values (used by early stopping).
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.values.len());
        self.values.clone_from_slice(snapshot);
    }
}

enum Op {
    Leaf,
    MatMul(VarId, VarId),
    SparseMatMul(Rc<SparseMatrix>, VarId),
    Add(VarId, VarId),
    AddBias(VarId, VarId),
    Scale(VarId, f64),
    ElemMul(VarId, VarId),
    Sum(VarId),
    Relu(VarId),
    Elu(VarId),
    LeakyRelu(VarId, f64),
    Dropout(VarId, Rc<Vec<f64>>),
    MaskedRowSoftmax(VarId, Rc<Vec<bool>>),
    NeighborSum(VarId, Rc<Graph>, Option<Rc<Vec<bool>>>),
    RowDotSlice {
        x: VarId,
        a: VarId,
        offset: usize,
    },
    EdgeScore {
        src: VarId,
        tgt: VarId,
        agg: Rc<AggAdj>,
    },
    SegmentSoftmax(VarId, Rc<AggAdj>),
    EdgeScale(VarId, Rc<Vec<f64>>),
    SegmentWeightedSum {
        coef: VarId,
        feat: VarId,
        agg: Rc<AggAdj>,
    },
    SegmentConstSum {
        feat: VarId,
        weights: Rc<Vec<f64>>,
        agg: Rc<AggAdj>,
    },
    Concat(Vec<VarId>),
    CrossEntropy {
        logits: VarId,
        labels: Rc<Vec<u32>>,
        subset: Rc<Vec<u32>>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, VarId)>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: VarId) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf initialized from the store. Gradients accumulated on
    /// the tape are copied back by [`Tape::collect_param_grads`].
    pub fn param(&mut self, store: &ParamStore, p: ParamId) -> VarId {
        let v = self.push(store.value(p).clone(), true, Op::Leaf);
        self.param_vars.push((p, v));
        v
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::MatMul(a, b))
    }

    pub fn sparse_matmul(&mut self, s: Rc<SparseMatrix>, b: VarId) -> VarId {
        let value = s.matmul(self.value(b));
        let rg = self.rg(b);
        self.push(value, rg, Op::SparseMatMul(s, b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::Add(a, b))
    }

    /// Broadcast a 1 x C bias over every row.
    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> VarId {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(bias).shape(), (1, c));
        let mut value = self.value(a).clone();
        {
            let brow: Vec<f64> = self.nodes[bias.0].value.row(0).to_vec();
            for i in 0..r {
                for (x, b) in value.row_mut(i).iter_mut().zip(&brow) {
                    *x += b;
                }
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, rg, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let mut value = self.value(a).clone();
        value.scale_assign(c);
        let rg = self.rg(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn elem_mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let (r, c) = self.value(a).shape();
        let mut value = Tensor::zeros(r, c);
        for ((o, x), y) in value
            .data_mut()
            .iter_mut()
            .zip(self.nodes[a.0].value.data())
            .zip(self.nodes[b.0].value.data())
        {
            *o = x * y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::ElemMul(a, b))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let rg = self.rg(a);
        self.push(value, rg, Op::Relu(a))
    }

    pub fn elu(&mut self, a: VarId) -> VarId {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            if *x < 0.0 {
                *x = x.exp() - 1.0;
            }
        }
        let rg = self.rg(a);
        self.push(value, rg, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        let mut value = self.value(a).clone();
        for x in value.data_mut() {
            if *x < 0.0 {
                *x *= slope;
            }
        }
        let rg = self.rg(a);
        self.push(value, rg, Op::LeakyRelu(a, slope))
    }

    /// Inverted dropout: in training mode entries survive with probability
    /// `1 - rate` and are scaled by `1/(1 - rate)`; in evaluation mode this
    /// is the identity (no RNG draws are consumed).
    pub fn dropout(
        &mut self,
        a: VarId,
        rate: f64,
        rng: &mut impl Rng,
        training: bool,
    ) -> Result<VarId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.value(a).data().len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        Ok(self.dropout_with_mask(a, Rc::new(mask)))
    }

    pub fn dropout_with_mask(&mut self, a: VarId, mask: Rc<Vec<f64>>) -> VarId {
        assert_eq!(mask.len(), self.value(a).data().len());
        let (r, c) = self.value(a).shape();
        let mut value = Tensor::zeros(r, c);
        for ((o, x), m) in value
            .data_mut()
            .iter_mut()
            .zip(self.nodes[a.0].value.data())
            .zip(mask.iter())
        {
            *o = x * m;
        }
        let rg = self.rg(a);
        self.push(value, rg, Op::Dropout(a, mask))
    }

    /// Row softmax restricted to `active` entries; inactive outputs are
    /// exactly zero. Stable via row-max subtraction.
    pub fn masked_row_softmax(&mut self, a: VarId, active: Rc<Vec<bool>>) -> Result<VarId> {
        let (r, c) = self.value(a).shape();
        assert_eq!(active.len(), r * c, "active mask shape mismatch");
        let mut value = Tensor::zeros(r, c);
        for i in 0..r {
            let row = self.nodes[a.0].value.row(i);
            let act = &active[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (x, &on) in row.iter().zip(act) {
                if on && *x > max {
                    max = *x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Shape(format!("softmax row {i} has no active entries")));
            }
            let mut denom = 0.0;
            let orow = value.row_mut(i);
            for (j, (&x, &on)) in row.iter().zip(act).enumerate() {
                if on {
                    let e = (x - max).exp();
                    orow[j] = e;
                    denom += e;
                }
            }
            for (o, &on) in orow.iter_mut().zip(act) {
                if on {
                    *o /= denom;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::MaskedRowSoftmax(a, active)))
    }

    /// Per-node sum of neighbor rows; a contributor u is skipped when
    /// `delta[u]` is false. The self row is never part of this sum.
    pub fn neighbor_sum(
        &mut self,
        a: VarId,
        g: Rc<Graph>,
        delta: Option<Rc<Vec<bool>>>,
    ) -> VarId {
        let (r, c) = self.value(a).shape();
        assert_eq!(r, g.num_nodes(), "feature rows != graph nodes");
        let mut value = Tensor::zeros(r, c);
        {
            let input = &self.nodes[a.0].value;
            for v in 0..r {
                let orow_start = v * c;
                for &u in g.neighbors(v) {
                    if let Some(d) = &delta {
                        if !d[u as usize] {
                            continue;
                        }
                    }
                    let urow = input.row(u as usize);
                    let orow = &mut value.data_mut()[orow_start..orow_start + c];
                    for (o, x) in orow.iter_mut().zip(urow) {
                        *o += x;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, rg, Op::NeighborSum(a, g, delta))
    }

    /// Per-row dot product with a slice of a 1 x K parameter vector:
    /// `out[v] = sum_j x[v,j] * a[0, offset + j]`.
    pub fn row_dot_slice(&mut self, x: VarId, a: VarId, offset: usize) -> VarId {
        let (r, c) = self.value(x).shape();
        assert!(self.value(a).rows() == 1 && self.value(a).cols() >= offset + c);
        let mut value = Tensor::zeros(r, 1);
        {
            let xs = &self.nodes[x.0].value;
            let avec = &self.nodes[a.0].value.row(0)[offset..offset + c];
            for v in 0..r {
                let mut s = 0.0;
                for (xv, av) in xs.row(v).iter().zip(avec) {
                    s += xv * av;
                }
                value.set(v, 0, s);
            }
        }
        let rg = self.rg(x) || self.rg(a);
        self.push(value, rg, Op::RowDotSlice { x, a, offset })
    }

    /// Raw attention logits per aggregation pair:
    /// `e[m] = src_score[segment_owner(m)] + tgt_score[member(m)]`.
    pub fn edge_score(&mut self, src: VarId, tgt: VarId, agg: Rc<AggAdj>) -> VarId {
        let n = agg.num_segments();
        assert_eq!(self.value(src).shape(), (n, 1));
        assert_eq!(self.value(tgt).shape(), (n, 1));
        let mut value = Tensor::zeros(agg.num_pairs(), 1);
        {
            let s = &self.nodes[src.0].value;
            let t = &self.nodes[tgt.0].value;
            let mut m = 0;
            for v in 0..n {
                let sv = s.get(v, 0);
                for &u in agg.segment(v) {
                    value.set(m, 0, sv + t.get(u as usize, 0));
                    m += 1;
                }
            }
        }
        let rg = self.rg(src) || self.rg(tgt);
        self.push(value, rg, Op::EdgeScore { src, tgt, agg })
    }

    /// Softmax over each node's aggregation segment.
    pub fn segment_softmax(&mut self, e: VarId, agg: Rc<AggAdj>) -> VarId {
        assert_eq!(self.value(e).shape(), (agg.num_pairs(), 1));
        let mut value = Tensor::zeros(agg.num_pairs(), 1);
        {
            let input = &self.nodes[e.0].value;
            for v in 0..agg.num_segments() {
                let (lo, hi) = agg.segment_bounds(v);
                let mut max = f64::NEG_INFINITY;
                for m in lo..hi {
                    max = max.max(input.get(m, 0));
                }
                let mut denom = 0.0;
                for m in lo..hi {
                    let ex = (input.get(m, 0) - max).exp();
                    value.set(m, 0, ex);
                    denom += ex;
                }
                for m in lo..hi {
                    let x = value.get(m, 0) / denom;
                    value.set(m, 0, x);
                }
            }
        }
        let rg = self.rg(e);
        self.push(value, rg, Op::SegmentSoftmax(e, agg))
    }

    /// Per-pair constant multiplier (masking flags, attention dropout).
    pub fn edge_scale(&mut self, e: VarId, weights: Rc<Vec<f64>>) -> VarId {
        assert_eq!(self.value(e).rows(), weights.len());
        let mut value = self.value(e).clone();
        for (x, w) in value.data_mut().iter_mut().zip(weights.iter()) {
            *x *= w;
        }
        let rg = self.rg(e);
        self.push(value, rg, Op::EdgeScale(e, weights))
    }

    /// `out[v,:] = sum over v's segment of coef[m] * feat[member(m),:]`.
    pub fn segment_weighted_sum(&mut self, coef: VarId, feat: VarId, agg: Rc<AggAdj>) -> VarId {
        let (fr, fc) = self.value(feat).shape();
        assert_eq!(fr, agg.num_segments());
        assert_eq!(self.value(coef).shape(), (agg.num_pairs(), 1));
        let mut value = Tensor::zeros(fr, fc);
        {
            let coefs = &self.nodes[coef.0].value;
            let feats = &self.nodes[feat.0].value;
            let mut m = 0;
            for v in 0..fr {
                let orow_start = v * fc;
                for &u in agg.segment(v) {
                    let w = coefs.get(m, 0);
                    let frow = feats.row(u as usize);
                    let orow = &mut value.data_mut()[orow_start..orow_start + fc];
                    for (o, x) in orow.iter_mut().zip(frow) {
                        *o += w * x;
                    }
                    m += 1;
                }
            }
        }
        let rg = self.rg(coef) || self.rg(feat);
        self.push(value, rg, Op::SegmentWeightedSum { coef, feat, agg })
    }

    /// Segment-weighted sum with constant per-pair weights (uniform
    /// attention): no gradient flows into the coefficients.
    pub fn segment_const_sum(
        &mut self,
        feat: VarId,
        weights: Rc<Vec<f64>>,
        agg: Rc<AggAdj>,
    ) -> VarId {
        let (fr, fc) = self.value(feat).shape();
        assert_eq!(fr, agg.num_segments());
        assert_eq!(weights.len(), agg.num_pairs());
        let mut value = Tensor::zeros(fr, fc);
        {
            let feats = &self.nodes[feat.0].value;
            let mut m = 0;
            for v in 0..fr {
                let orow_start = v * fc;
                for &u in agg.segment(v) {
                    let w = weights[m];
                    if w != 0.0 {
                        let frow = feats.row(u as usize);
                        let orow = &mut value.data_mut()[orow_start..orow_start + fc];
                        for (o, x) in orow.iter_mut().zip(frow) {
                            *o += w * x;
                        }
                    }
                    m += 1;
                }
            }
        }
        let rg = self.rg(feat);
        self.push(
            value,
            rg,
            Op::SegmentConstSum {
                feat,
                weights,
                agg,
            },
        )
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(r, total);
        let mut col = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows(), r);
            for i in 0..r {
                value.row_mut(i)[col..col + t.cols()].copy_from_slice(t.row(i));
            }
            col += t.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, rg, Op::Concat(parts.to_vec()))
    }

    /// Mean of per-part values: convenience for head averaging.
    pub fn mean_of(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Mean negative log-likelihood of `labels` over `subset` rows of the
    /// logits, as a 1x1 tensor.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[u32], subset: &[u32]) -> Result<VarId> {
        if subset.is_empty() {
            return Err(Error::Shape("cross-entropy over empty subset".into()));
        }
        let (r, c) = self.value(logits).shape();
        assert_eq!(labels.len(), r, "labels must cover all logit rows");
        for &v in subset {
            if v as usize >= r || labels[v as usize] as usize >= c {
                return Err(Error::Shape(format!("subset node {v} or its label out of range")));
            }
        }
        let mut total = 0.0;
        {
            let lg = &self.nodes[logits.0].value;
            for &v in subset {
                let row = lg.row(v as usize);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[labels[v as usize] as usize];
            }
        }
        let value = Tensor::scalar(total / subset.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                labels: Rc::new(labels.to_vec()),
                subset: Rc::new(subset.to_vec()),
            },
        ))
    }

    fn accumulate(&mut self, v: VarId, delta: &Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let (r, c) = self.nodes[v.0].value.shape();
        let grad = self.nodes[v.0]
            .grad
            .get_or_insert_with(|| Tensor::zeros(r, c));
        grad.add_assign(delta);
    }

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// reachable node with `requires_grad`; unreachable parameters keep a
    /// zero gradient when collected.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = self.nodes[idx].grad.take().unwrap();
            self.propagate(idx, &grad);
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        // Ops only reference earlier nodes, so split_at_mut-style aliasing is
        // avoided by cloning small descriptors out of the op first.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let da = g.matmul_t(&self.nodes[b.0].value);
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    let db = self.nodes[a.0].value.t_matmul(g);
                    self.accumulate(b, &db);
                }
            }
            Op::SparseMatMul(s, b) => {
                let (s, b) = (Rc::clone(s), *b);
                if self.rg(b) {
                    let db = s.t_matmul(g);
                    self.accumulate(b, &db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::AddBias(a, bias) => {
                let (a, bias) = (*a, *bias);
                self.accumulate(a, g);
                if self.rg(bias) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, x) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    self.accumulate(bias, &db);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let mut da = g.clone();
                da.scale_assign(c);
                self.accumulate(a, &da);
            }
            Op::ElemMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *x *= y;
                    }
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    let mut db = g.clone();
                    for (x, y) in db.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *x *= y;
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Sum(a) => {
                let a = *a;
                let (r, c) = self.nodes[a.0].value.shape();
                let mut da = Tensor::zeros(r, c);
                da.fill(g.item());
                self.accumulate(a, &da);
            }
            Op::Relu(a) => {
                let a = *a;
                let mut da = g.clone();
                for (x, inp) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    if *inp <= 0.0 {
                        *x = 0.0;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Elu(a) => {
                let a = *a;
                let mut da = g.clone();
                let out = self.nodes[idx].value.data();
                for ((x, inp), o) in da
                    .data_mut()
                    .iter_mut()
                    .zip(self.nodes[a.0].value.data())
                    .zip(out)
                {
                    if *inp <= 0.0 {
                        *x *= o + 1.0;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let mut da = g.clone();
                for (x, inp) in da.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                    if *inp <= 0.0 {
                        *x *= slope;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Dropout(a, mask) => {
                let (a, mask) = (*a, Rc::clone(mask));
                let mut da = g.clone();
                for (x, m) in da.data_mut().iter_mut().zip(mask.iter()) {
                    *x *= m;
                }
                self.accumulate(a, &da);
            }
            Op::MaskedRowSoftmax(a, active) => {
                let (a, active) = (*a, Rc::clone(active));
                let (r, c) = self.nodes[idx].value.shape();
                let mut da = Tensor::zeros(r, c);
                for i in 0..r {
                    let y = self.nodes[idx].value.row(i);
                    let gi = g.row(i);
                    let act = &active[i * c..(i + 1) * c];
                    let dot: f64 = y
                        .iter()
                        .zip(gi)
                        .zip(act)
                        .filter(|(_, &on)| on)
                        .map(|((yv, gv), _)| yv * gv)
                        .sum();
                    let orow = da.row_mut(i);
                    for j in 0..c {
                        if act[j] {
                            orow[j] = y[j] * (gi[j] - dot);
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::NeighborSum(a, graph, delta) => {
                let (a, graph, delta) = (*a, Rc::clone(graph), delta.clone());
                let (r, c) = self.nodes[a.0].value.shape();
                let mut da = Tensor::zeros(r, c);
                // Symmetric adjacency: grad of contributor u gathers the
                // output grads of every node it fed, gated by its own flag.
                for u in 0..r {
                    if let Some(d) = &delta {
                        if !d[u] {
                            continue;
                        }
                    }
                    let orow_start = u * c;
                    for &w in graph.neighbors(u) {
                        let grow = g.row(w as usize);
                        let orow = &mut da.data_mut()[orow_start..orow_start + c];
                        for (o, x) in orow.iter_mut().zip(grow) {
                            *o += x;
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::RowDotSlice { x, a, offset } => {
                let (x, a, offset) = (*x, *a, *offset);
                let (r, c) = self.nodes[x.0].value.shape();
                if self.rg(x) {
                    let mut dx = Tensor::zeros(r, c);
                    let avec: Vec<f64> =
                        self.nodes[a.0].value.row(0)[offset..offset + c].to_vec();
                    for v in 0..r {
                        let gv = g.get(v, 0);
                        for (o, av) in dx.row_mut(v).iter_mut().zip(&avec) {
                            *o = gv * av;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                if self.rg(a) {
                    let mut da = Tensor::zeros(1, self.nodes[a.0].value.cols());
                    for v in 0..r {
                        let gv = g.get(v, 0);
                        let xrow = self.nodes[x.0].value.row(v);
                        for (j, xv) in xrow.iter().enumerate() {
                            let slot = &mut da.row_mut(0)[offset + j];
                            *slot += gv * xv;
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::EdgeScore { src, tgt, agg } => {
                let (src, tgt, agg) = (*src, *tgt, Rc::clone(agg));
                let n = agg.num_segments();
                if self.rg(src) {
                    let mut ds = Tensor::zeros(n, 1);
                    let mut m = 0;
                    for v in 0..n {
                        let mut s = 0.0;
                        for _ in agg.segment(v) {
                            s += g.get(m, 0);
                            m += 1;
                        }
                        ds.set(v, 0, s);
                    }
                    self.accumulate(src, &ds);
                }
                if self.rg(tgt) {
                    let mut dt = Tensor::zeros(n, 1);
                    let mut m = 0;
                    for v in 0..n {
                        for &u in agg.segment(v) {
                            let slot_val = dt.get(u as usize, 0) + g.get(m, 0);
                            dt.set(u as usize, 0, slot_val);
                            m += 1;
                        }
                    }
                    self.accumulate(tgt, &dt);
                }
            }
            Op::SegmentSoftmax(e, agg) => {
                let (e, agg) = (*e, Rc::clone(agg));
                let mut de = Tensor::zeros(agg.num_pairs(), 1);
                for v in 0..agg.num_segments() {
                    let (lo, hi) = agg.segment_bounds(v);
                    let mut dot = 0.0;
                    for m in lo..hi {
                        dot += self.nodes[idx].value.get(m, 0) * g.get(m, 0);
                    }
                    for m in lo..hi {
                        let y = self.nodes[idx].value.get(m, 0);
                        de.set(m, 0, y * (g.get(m, 0) - dot));
                    }
                }
                self.accumulate(e, &de);
            }
            Op::EdgeScale(e, weights) => {
                let (e, weights) = (*e, Rc::clone(weights));
                let mut de = g.clone();
                for (x, w) in de.data_mut().iter_mut().zip(weights.iter()) {
                    *x *= w;
                }
                self.accumulate(e, &de);
            }
            Op::SegmentWeightedSum { coef, feat, agg } => {
                let (coef, feat, agg) = (*coef, *feat, Rc::clone(agg));
                let (fr, fc) = self.nodes[feat.0].value.shape();
                if self.rg(coef) {
                    let mut dc = Tensor::zeros(agg.num_pairs(), 1);
                    let mut m = 0;
                    for v in 0..fr {
                        let grow = g.row(v);
                        for &u in agg.segment(v) {
                            let frow = self.nodes[feat.0].value.row(u as usize);
                            let mut s = 0.0;
                            for (gv, fv) in grow.iter().zip(frow) {
                                s += gv * fv;
                            }
                            dc.set(m, 0, s);
                            m += 1;
                        }
                    }
                    self.accumulate(coef, &dc);
                }
                if self.rg(feat) {
                    let mut df = Tensor::zeros(fr, fc);
                    let mut m = 0;
                    for v in 0..fr {
                        let grow_start = v * fc;
                        for &u in agg.segment(v) {
                            let w = self.nodes[coef.0].value.get(m, 0);
                            let urow_start = u as usize * fc;
                            for j in 0..fc {
                                df.data_mut()[urow_start + j] += w * g.data()[grow_start + j];
                            }
                            m += 1;
                        }
                    }
                    self.accumulate(feat, &df);
                }
            }
            Op::SegmentConstSum {
                feat,
                weights,
                agg,
            } => {
                let (feat, weights, agg) = (*feat, Rc::clone(weights), Rc::clone(agg));
                let (fr, fc) = self.nodes[feat.0].value.shape();
                let mut df = Tensor::zeros(fr, fc);
                let mut m = 0;
                for v in 0..fr {
                    let grow_start = v * fc;
                    for &u in agg.segment(v) {
                        let w = weights[m];
                        if w != 0.0 {
                            let urow_start = u as usize * fc;
                            for j in 0..fc {
                                df.data_mut()[urow_start + j] += w * g.data()[grow_start + j];
                            }
                        }
                        m += 1;
                    }
                }
                self.accumulate(feat, &df);
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut col = 0;
                for p in parts {
                    let (r, c) = self.nodes[p.0].value.shape();
                    if self.rg(p) {
                        let mut dp = Tensor::zeros(r, c);
                        for i in 0..r {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[col..col + c]);
                        }
                        self.accumulate(p, &dp);
                    }
                    col += c;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                subset,
            } => {
                let (logits, labels, subset) = (*logits, Rc::clone(labels), Rc::clone(subset));
                let (r, c) = self.nodes[logits.0].value.shape();
                let scale = g.item() / subset.len() as f64;
                let mut dl = Tensor::zeros(r, c);
                for &v in subset.iter() {
                    let row = self.nodes[logits.0].value.row(v as usize);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    let orow = dl.row_mut(v as usize);
                    for (j, &x) in row.iter().enumerate() {
                        let p = (x - max).exp() / denom;
                        orow[j] = scale * (p - if labels[v as usize] as usize == j { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(logits, &dl);
            }
        }
    }

    /// Copy accumulated leaf gradients back into the parameter store.
    /// Parameters unused by this tape get zero gradients.
    pub fn collect_param_grads(&self, store: &mut ParamStore) {
        store.zero_grads();
        for &(p, v) in &self.param_vars {
            if let Some(g) = &self.nodes[v.0].grad {
                store.grad_mut(p).add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let p = s.add(t);
        (s, p)
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let (mut store, p) = store_with(Tensor::from_fn(3, 2, |i, j| (i + j) as f64));
        let mut tape = Tape::new();
        let w = tape.param(&store, p);
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        tape.collect_param_grads(&mut store);
        assert!(store.grad(p).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn backward_of_half_squared_norm_is_identity() {
        let (mut store, p) = store_with(Tensor::from_fn(2, 3, |i, j| i as f64 - j as f64 * 0.5));
        let mut tape = Tape::new();
        let w = tape.param(&store, p);
        let sq = tape.elem_mul(w, w);
        let half = tape.scale(sq, 0.5);
        let loss = tape.sum(half);
        tape.backward(loss).unwrap();
        tape.collect_param_grads(&mut store);
        for (g, v) in store.grad(p).data().iter().zip(store.value(p).data()) {
            assert!((g - v).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (store, p) = store_with(Tensor::zeros(2, 2));
        let mut tape = Tape::new();
        let w = tape.param(&store, p);
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn unreachable_param_grad_is_zero() {
        let mut store = ParamStore::new();
        let p1 = store.add(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let p2 = store.add(Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        let mut tape = Tape::new();
        let w1 = tape.param(&store, p1);
        let _w2 = tape.param(&store, p2);
        let loss = tape.sum(w1);
        tape.backward(loss).unwrap();
        tape.collect_param_grads(&mut store);
        assert_eq!(store.grad(p1).data(), &[1.0, 1.0]);
        assert_eq!(store.grad(p2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_basics() {
        let mut tape = Tape::new();
        // Two equal active entries split 0.5/0.5; masked third stays 0.
        let x = tape.leaf(Tensor::from_vec(1, 3, vec![0.0, 0.0, 55.0]));
        let y = tape
            .masked_row_softmax(x, Rc::new(vec![true, true, false]))
            .unwrap();
        let out = tape.value(y);
        assert!((out.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(out.get(0, 2), 0.0);
    }

    #[test]
    fn masked_softmax_matches_high_precision_oracle() {
        // softmax([1,2,3]) computed with 40-digit arithmetic.
        let expect = [
            0.09003057317038045799802,
            0.244728471054797652473,
            0.665240955774821889529,
        ];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let y = tape
            .masked_row_softmax(x, Rc::new(vec![true, true, true]))
            .unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        assert!(tape.masked_row_softmax(x, Rc::new(vec![false, false])).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 7));
        let ce = tape.cross_entropy(x, &[3, 5], &[0, 1]).unwrap();
        assert!((tape.value(ce).item() - 1.945910149055313305105).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_oracle() {
        // Frozen from a 40-digit evaluation of the same logits/subset.
        let logits = Tensor::from_vec(
            4,
            3,
            vec![
                0.5, -1.25, 2.0, 1.5, 0.25, -0.75, -2.0, 0.0, 1.0, 0.125, 0.625, -0.5,
            ],
        );
        let mut tape = Tape::new();
        let x = tape.leaf(logits);
        let ce = tape.cross_entropy(x, &[0, 2, 1, 1], &[0, 1, 3]).unwrap();
        assert!((tape.value(ce).item() - 1.657142475604764594633).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_empty_subset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 3));
        assert!(tape.cross_entropy(x, &[0, 1], &[]).is_err());
    }

    #[test]
    fn elu_limits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 3, vec![0.0, 1.0, -700.0]));
        let y = tape.elu(x);
        let out = tape.value(y);
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(0, 1), 1.0);
        assert!((out.get(0, 2) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_rate_one_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.0, &mut rng, true).unwrap();
        assert_eq!(x, y);
        assert!(tape.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_preserves_mean_statistically() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, n, vec![1.0; n]));
        let y = tape.dropout(x, 0.5, &mut rng, true).unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn neighbor_sum_respects_delta() {
        let g = Rc::new(Graph::from_edges(
            vec!["a".into(), "b".into(), "c".into()],
            &[(0, 1), (1, 2)],
        ));
        let h = Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(h);
        let all = tape.neighbor_sum(x, Rc::clone(&g), None);
        assert_eq!(tape.value(all).data(), &[2.0, 4.0, 2.0]);
        // Mask node b (index 1): its contributions vanish everywhere.
        let delta = Rc::new(vec![true, false, true]);
        let masked = tape.neighbor_sum(x, g, Some(delta));
        assert_eq!(tape.value(masked).data(), &[0.0, 4.0, 0.0]);
    }
}
