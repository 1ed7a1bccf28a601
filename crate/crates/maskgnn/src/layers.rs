//! Aggregation-based layers with node masking: GIN-0, GAT, and SGAT.
//!
//! Masking semantics differ per architecture and are applied literally:
//!
//! * GIN-0: `row v = MLP(h_v + sum over unmasked neighbors of h_u)`. The
//!   self term is never masked; a masked node only vanishes from other
//!   nodes' neighbor sums.
//! * GAT: attention is scored and softmax-normalized over the full set
//!   `{v} ∪ N_v`, then each member's coefficient is multiplied by its keep
//!   flag with no renormalization. A masked node therefore loses its own
//!   self term too.
//! * SGAT: coefficients are `flag(u) / |{v} ∪ N_v|`; the denominator is the
//!   full set size regardless of masking.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{ParamId, ParamStore, SparseMatrix, Tape, Tensor, VarId};
use crate::graph::{AggAdj, Graph};
use crate::masking::MaskVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Gin0,
    Gat,
    Sgat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
    None,
}

/// Shape and behavior of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Attention heads (GAT/SGAT); ignored by GIN-0.
    pub num_heads: usize,
    /// Concatenate heads (hidden layers) or average them (output layer).
    pub concat_heads: bool,
    /// Dropout on normalized attention coefficients (baseline GAT/SGAT).
    pub attn_dropout_rate: f64,
    /// Dropout on the layer input (GAT recipe).
    pub input_dropout_rate: f64,
    pub activation: Activation,
}

impl LayerConfig {
    pub fn head_dim(&self) -> usize {
        if self.concat_heads {
            assert!(
                self.out_dim % self.num_heads == 0,
                "out_dim {} not divisible by {} heads",
                self.out_dim,
                self.num_heads
            );
            self.out_dim / self.num_heads
        } else {
            self.out_dim
        }
    }
}

/// One attention head: a weight matrix, plus the scoring vector for GAT
/// (absent for SGAT's uniform coefficients).
#[derive(Debug, Clone)]
pub struct AttnHead {
    pub weight: ParamId,
    pub attn: Option<ParamId>,
}

/// Parameters of one layer, as ids into the model's parameter store.
#[derive(Debug, Clone)]
pub enum LayerParams {
    /// Two affine stages with a rectifier between; hidden width = out_dim.
    Gin {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Attn { heads: Vec<AttnHead> },
}

impl LayerParams {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            LayerParams::Gin { w1, b1, w2, b2 } => vec![*w1, *b1, *w2, *b2],
            LayerParams::Attn { heads } => heads
                .iter()
                .flat_map(|h| {
                    let mut v = vec![h.weight];
                    v.extend(h.attn);
                    v
                })
                .collect(),
        }
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 * limit - limit)
}

/// Allocate and initialize one layer's parameters (fan-based uniform init).
pub fn init_layer_params(
    cfg: &LayerConfig,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> LayerParams {
    match cfg.kind {
        LayerKind::Gin0 => {
            let hidden = cfg.out_dim;
            let w1 = store.add(glorot(cfg.in_dim, hidden, rng));
            let b1 = store.add(Tensor::zeros(1, hidden));
            let w2 = store.add(glorot(hidden, cfg.out_dim, rng));
            let b2 = store.add(Tensor::zeros(1, cfg.out_dim));
            LayerParams::Gin { w1, b1, w2, b2 }
        }
        LayerKind::Gat => {
            let d = cfg.head_dim();
            let heads = (0..cfg.num_heads)
                .map(|_| AttnHead {
                    weight: store.add(glorot(cfg.in_dim, d, rng)),
                    attn: Some(store.add(glorot(1, 2 * d, rng))),
                })
                .collect();
            LayerParams::Attn { heads }
        }
        LayerKind::Sgat => {
            let d = cfg.head_dim();
            let heads = (0..cfg.num_heads)
                .map(|_| AttnHead {
                    weight: store.add(glorot(cfg.in_dim, d, rng)),
                    attn: None,
                })
                .collect();
            LayerParams::Attn { heads }
        }
    }
}

/// Per-graph compute context shared across layers and epochs.
#[derive(Debug, Clone)]
pub struct GraphCtx {
    pub graph: Rc<Graph>,
    pub agg: Rc<AggAdj>,
}

impl GraphCtx {
    pub fn new(graph: Rc<Graph>) -> GraphCtx {
        let agg = Rc::new(AggAdj::build(&graph));
        GraphCtx { graph, agg }
    }
}

/// Layer input: either a constant sparse matrix (raw features) or a dense
/// tape variable (hidden representations).
#[derive(Clone)]
pub enum LayerInput {
    Sparse(Rc<SparseMatrix>),
    Dense(VarId),
}

/// Counters surfaced in run diagnostics.
#[derive(Debug, Default, Clone, Copy)]
pub struct LayerStats {
    /// Aggregation sets whose members were all masked (output forced to
    /// sigma(0) for that node).
    pub all_masked_sets: u64,
}

/// Self row plus the masked neighbor-row sums of a constant sparse input,
/// as a new sparse matrix. Contributions are accumulated self-first then
/// neighbors in ascending order, so results are reproducible bit-for-bit.
fn masked_neighbor_augment(
    x: &SparseMatrix,
    g: &Graph,
    delta: Option<&MaskVector>,
) -> SparseMatrix {
    let n = x.rows();
    let mut acc = vec![0.0f64; x.cols()];
    let mut touched: Vec<u32> = Vec::new();
    let rows = (0..n).map(|v| {
        for &t in &touched {
            acc[t as usize] = 0.0;
        }
        touched.clear();
        let mut absorb = |node: usize, acc: &mut Vec<f64>, touched: &mut Vec<u32>| {
            let (cols, vals) = x.row_entries(node);
            for (&c, &val) in cols.iter().zip(vals) {
                if acc[c as usize] == 0.0 && !touched.contains(&c) {
                    touched.push(c);
                }
                acc[c as usize] += val;
            }
        };
        absorb(v, &mut acc, &mut touched);
        for &u in g.neighbors(v) {
            if let Some(d) = delta {
                if !d.keep(u as usize) {
                    continue;
                }
            }
            absorb(u as usize, &mut acc, &mut touched);
        }
        touched.sort_unstable();
        touched.iter().map(|&c| (c, acc[c as usize])).collect()
    });
    // Iterator is lazy; drive it through the constructor row by row.
    SparseMatrix::from_rows(n, x.cols(), rows)
}

fn apply_activation(tape: &mut Tape, x: VarId, act: Activation) -> VarId {
    match act {
        Activation::Elu => tape.elu(x),
        Activation::Relu => tape.relu(x),
        Activation::None => x,
    }
}

/// Dropout on a constant sparse input: zero entries stay zero, so only the
/// stored values draw from the RNG.
fn sparse_dropout(
    x: &SparseMatrix,
    rate: f64,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Rc<SparseMatrix> {
    if !training || rate == 0.0 {
        return Rc::new(x.clone());
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut out = x.clone();
    for v in out.values_mut() {
        *v = if rng.random::<f64>() < keep { *v * scale } else { 0.0 };
    }
    Rc::new(out)
}

/// Record one layer's forward pass on the tape. `delta` is the node mask for
/// this epoch (None when masking is inactive); `training` gates dropout.
pub fn layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &LayerConfig,
    params: &LayerParams,
    input: LayerInput,
    ctx: &GraphCtx,
    delta: Option<&MaskVector>,
    training: bool,
    rng: &mut ChaCha8Rng,
    stats: &mut LayerStats,
) -> VarId {
    match (params, cfg.kind) {
        (LayerParams::Gin { w1, b1, w2, b2 }, LayerKind::Gin0) => {
            let combined = match input {
                LayerInput::Sparse(x) => {
                    let s = Rc::new(masked_neighbor_augment(&x, &ctx.graph, delta));
                    LayerInput::Sparse(s)
                }
                LayerInput::Dense(h) => {
                    let agg = tape.neighbor_sum(
                        h,
                        Rc::clone(&ctx.graph),
                        delta.map(|d| Rc::new(d.flags().to_vec())),
                    );
                    LayerInput::Dense(tape.add(h, agg))
                }
            };
            let w1v = tape.param(store, *w1);
            let z1 = match combined {
                LayerInput::Sparse(s) => tape.sparse_matmul(s, w1v),
                LayerInput::Dense(h) => tape.matmul(h, w1v),
            };
            let b1v = tape.param(store, *b1);
            let z1 = tape.add_bias(z1, b1v);
            let a1 = tape.relu(z1);
            let w2v = tape.param(store, *w2);
            let z2 = tape.matmul(a1, w2v);
            let b2v = tape.param(store, *b2);
            let z2 = tape.add_bias(z2, b2v);
            apply_activation(tape, z2, cfg.activation)
        }
        (LayerParams::Attn { heads }, kind) => {
            let agg = Rc::clone(&ctx.agg);
            // Keep flags per aggregation pair; count fully-masked sets.
            let delta_weights: Option<Vec<f64>> = delta.map(|d| {
                let mut w = Vec::with_capacity(agg.num_pairs());
                for v in 0..agg.num_segments() {
                    let seg = agg.segment(v);
                    let mut any = false;
                    for &u in seg {
                        let keep = d.keep(u as usize);
                        any |= keep;
                        w.push(if keep { 1.0 } else { 0.0 });
                    }
                    if !any {
                        stats.all_masked_sets += 1;
                    }
                }
                w
            });
            let input = match input {
                LayerInput::Sparse(x) => {
                    LayerInput::Sparse(sparse_dropout(&x, cfg.input_dropout_rate, rng, training))
                }
                LayerInput::Dense(h) => LayerInput::Dense(
                    tape.dropout(h, cfg.input_dropout_rate, rng, training)
                        .expect("input dropout rate validated by config"),
                ),
            };
            let mut head_outputs = Vec::with_capacity(heads.len());
            for head in heads {
                let wv = tape.param(store, head.weight);
                let transformed = match &input {
                    LayerInput::Sparse(x) => tape.sparse_matmul(Rc::clone(x), wv),
                    LayerInput::Dense(h) => tape.matmul(*h, wv),
                };
                let attn_drop: Option<Vec<f64>> = if training && cfg.attn_dropout_rate > 0.0 {
                    let keep = 1.0 - cfg.attn_dropout_rate;
                    let scale = 1.0 / keep;
                    Some(
                        (0..agg.num_pairs())
                            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                            .collect(),
                    )
                } else {
                    None
                };
                let aggregated = match kind {
                    LayerKind::Gat => {
                        let d = cfg.head_dim();
                        let av = tape.param(
                            store,
                            head.attn.expect("GAT head carries an attention vector"),
                        );
                        let s_src = tape.row_dot_slice(transformed, av, 0);
                        let s_tgt = tape.row_dot_slice(transformed, av, d);
                        let e = tape.edge_score(s_src, s_tgt, Rc::clone(&agg));
                        let e = tape.leaky_relu(e, 0.2);
                        let mut alpha = tape.segment_softmax(e, Rc::clone(&agg));
                        if let Some(dropw) = attn_drop {
                            alpha = tape.edge_scale(alpha, Rc::new(dropw));
                        }
                        if let Some(dw) = &delta_weights {
                            alpha = tape.edge_scale(alpha, Rc::new(dw.clone()));
                        }
                        tape.segment_weighted_sum(alpha, transformed, Rc::clone(&agg))
                    }
                    LayerKind::Sgat => {
                        // Uniform coefficients 1/|{v} ∪ N_v| over the full
                        // set, gated by keep flags and attention dropout.
                        let mut w = Vec::with_capacity(agg.num_pairs());
                        for v in 0..agg.num_segments() {
                            let size = agg.segment(v).len() as f64;
                            for _ in agg.segment(v) {
                                w.push(1.0 / size);
                            }
                        }
                        if let Some(dropw) = attn_drop {
                            for (x, d) in w.iter_mut().zip(&dropw) {
                                *x *= d;
                            }
                        }
                        if let Some(dw) = &delta_weights {
                            for (x, d) in w.iter_mut().zip(dw) {
                                *x *= d;
                            }
                        }
                        tape.segment_const_sum(transformed, Rc::new(w), Rc::clone(&agg))
                    }
                    LayerKind::Gin0 => unreachable!("GIN handled above"),
                };
                head_outputs.push(aggregated);
            }
            if cfg.concat_heads {
                let activated: Vec<VarId> = head_outputs
                    .iter()
                    .map(|&h| apply_activation(tape, h, cfg.activation))
                    .collect();
                tape.concat(&activated)
            } else {
                let mean = tape.mean_of(&head_outputs);
                apply_activation(tape, mean, cfg.activation)
            }
        }
        _ => panic!("layer params do not match layer kind"),
    }
}

/// Evaluate one layer on plain inputs (no training, no dropout); used by the
/// per-operation contract tests and the cached-inference path.
pub fn layer_eval(
    cfg: &LayerConfig,
    params: &LayerParams,
    store: &ParamStore,
    h: &Tensor,
    g: &Graph,
    delta: Option<&MaskVector>,
) -> Tensor {
    let ctx = GraphCtx::new(Rc::new(g.clone()));
    let mut tape = Tape::new();
    let input = LayerInput::Dense(tape.leaf(h.clone()));
    let mut rng = crate::masking::stream_rng(0, 0);
    let mut stats = LayerStats::default();
    let out = layer_forward(
        &mut tape, store, cfg, params, input, &ctx, delta, false, &mut rng, &mut stats,
    );
    tape.value(out).clone()
}

/// Standalone multilayer-perceptron application (the GIN combine stage):
/// two affine stages with a rectifier between.
pub fn mlp_forward(x: &Tensor, params: &LayerParams, store: &ParamStore) -> Tensor {
    let LayerParams::Gin { w1, b1, w2, b2 } = params else {
        panic!("mlp_forward needs GIN parameters");
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let w1v = tape.param(store, *w1);
    let z1 = tape.matmul(xv, w1v);
    let b1v = tape.param(store, *b1);
    let z1 = tape.add_bias(z1, b1v);
    let a1 = tape.relu(z1);
    let w2v = tape.param(store, *w2);
    let z2 = tape.matmul(a1, w2v);
    let b2v = tape.param(store, *b2);
    let z2 = tape.add_bias(z2, b2v);
    tape.value(z2).clone()
}
