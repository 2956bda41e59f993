//! The CLGT graph transformer.
//!
//! Three streams are carried through every layer: node states `v` (n×d) and
//! two per-edge streams, edge-type states `e` and edge-weight states `w`
//! (m×d each). For an edge `j → i` the attention score is
//!
//! ```text
//! h_ij = (Q v_i ⊙ K v_j) / √d_k ⊙ (E e_ij) ⊙ (E_weight w_ij)
//! ```
//!
//! a d-vector whose k-th block of `d_k` entries belongs to head k. Scores are
//! softmax-normalized over the in-neighbours of `i` per dimension and weight
//! `V v_j`. Layer outputs are post-norm residuals:
//!
//! ```text
//! v' = LN(O_v · ĥ + v)    e' = LN(O_e · h + e)    w' = LN(O_w · h + w)
//! ```
//!
//! Per-head projections are stored stacked, so `Q`, `K`, `V`, `E` and
//! `E_weight` are each one d×d matrix whose column block `k·d_k..(k+1)·d_k`
//! is head k.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::graphgen::{EdgeKind, Level, NodeFeatureTable, WeeklyInteractionGraph};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How per-edge score vectors become attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Softmax per dimension over in-neighbours.
    #[default]
    Elementwise,
    /// Sum each head's block to one scalar score, softmax per head, and
    /// broadcast the weight back over the head's dimensions.
    Scalar,
}

/// Edge input width: kind one-hot (3) followed by level one-hot (3).
pub const EDGE_FEATURE_DIM: usize = 6;
/// Edge-weight input width: the influence value.
pub const WEIGHT_FEATURE_DIM: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClgtConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
    pub node_in_dim: usize,
    pub edge_in_dim: usize,
    pub weight_in_dim: usize,
    pub dropout: f64,
    pub attention: AttentionMode,
    /// When false the `E_weight · w` factor is dropped from the score, which
    /// gives the edge-feature-only transformer.
    pub weighted_pipeline: bool,
    /// Laplacian eigenvector positional encoding width; 0 disables it.
    pub laplacian_pe_dim: usize,
}

impl Default for ClgtConfig {
    fn default() -> Self {
        ClgtConfig {
            hidden_dim: 88,
            heads: 8,
            layers: 10,
            classes: 3,
            // 8 activity features + 11 team one-hot columns
            node_in_dim: 19,
            edge_in_dim: EDGE_FEATURE_DIM,
            weight_in_dim: WEIGHT_FEATURE_DIM,
            dropout: 0.0,
            attention: AttentionMode::Elementwise,
            weighted_pipeline: true,
            laplacian_pe_dim: 0,
        }
    }
}

impl ClgtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        if self.heads == 0 || self.hidden_dim == 0 {
            return bad("hidden_dim and heads must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.node_in_dim == 0 || self.edge_in_dim == 0 || self.weight_in_dim == 0 {
            return bad("input widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Glorot,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

/// Number of parameter tensors per transformer layer.
const PER_LAYER: usize = 17;

/// Parameter indices of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub e: usize,
    pub e_weight: usize,
    pub o_v: (usize, usize),
    pub o_e: (usize, usize),
    pub o_w: (usize, usize),
    pub norm_v: (usize, usize),
    pub norm_e: (usize, usize),
    pub norm_w: (usize, usize),
}

fn layout(config: &ClgtConfig) -> Vec<ParamSpec> {
    fn push(specs: &mut Vec<ParamSpec>, name: String, rows: usize, cols: usize, init: Init) {
        specs.push(ParamSpec {
            name,
            rows,
            cols,
            init,
        });
    }
    fn linear(specs: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize) {
        push(specs, format!("{name}.weight"), fan_in, fan_out, Init::Glorot);
        push(specs, format!("{name}.bias"), 1, fan_out, Init::Zeros);
    }

    let d = config.hidden_dim;
    let mut specs = Vec::new();
    linear(&mut specs, "input.node", config.node_in_dim, d);
    linear(&mut specs, "input.edge", config.edge_in_dim, d);
    linear(&mut specs, "input.weight", config.weight_in_dim, d);
    if config.laplacian_pe_dim > 0 {
        linear(&mut specs, "input.laplacian", config.laplacian_pe_dim, d);
    }
    for l in 0..config.layers {
        for m in ["Q", "K", "V", "E", "E_weight"] {
            push(&mut specs, format!("layer{l}.{m}"), d, d, Init::Glorot);
        }
        for o in ["O_v", "O_e", "O_w"] {
            linear(&mut specs, &format!("layer{l}.{o}"), d, d);
        }
        for n in ["norm_v", "norm_e", "norm_w"] {
            push(&mut specs, format!("layer{l}.{n}.gain"), 1, d, Init::Ones);
            push(&mut specs, format!("layer{l}.{n}.bias"), 1, d, Init::Zeros);
        }
    }
    linear(&mut specs, "classifier", d, config.classes);
    specs
}

/// Trainable parameters plus the config and seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClgtModel {
    config: ClgtConfig,
    seed: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Dense inputs for one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// n × node_in_dim
    pub node_features: Tensor,
    /// m × edge_in_dim
    pub edge_features: Tensor,
    /// m × weight_in_dim
    pub edge_weights: Tensor,
    /// n × laplacian_pe_dim, when enabled
    pub positional: Option<Tensor>,
}

impl GraphInput {
    /// Edge `src → dst` sends a message from `src` to `dst`.
    pub fn new(
        node_features: Tensor,
        edges: &[(usize, usize)],
        edge_features: Tensor,
        edge_weights: Tensor,
    ) -> Result<Self> {
        let n = node_features.rows();
        if edge_features.rows() != edges.len() || edge_weights.rows() != edges.len() {
            return Err(DiffError::ShapeMismatch {
                op: "graph_input",
                left: (edges.len(), 0),
                right: (edge_features.rows(), edge_weights.rows()),
            }
            .into());
        }
        if let Some(&(s, d)) = edges.iter().find(|(s, d)| *s >= n || *d >= n) {
            return Err(DiffError::IndexOutOfRange {
                op: "graph_input",
                index: s.max(d),
                len: n,
            }
            .into());
        }
        Ok(GraphInput {
            num_nodes: n,
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
            node_features,
            edge_features,
            edge_weights,
            positional: None,
        })
    }

    /// Edge inputs are `[kind one-hot ‖ level one-hot]` and `[influence]`;
    /// an unset level leaves its one-hot block zero.
    pub fn from_graph(graph: &WeeklyInteractionGraph, features: &NodeFeatureTable) -> Result<Self> {
        let node_features = Tensor::from_rows(&features.features)?;
        if node_features.rows() != graph.num_vertices() {
            return Err(DiffError::ShapeMismatch {
                op: "from_graph",
                left: node_features.shape(),
                right: (graph.num_vertices(), 0),
            }
            .into());
        }
        let m = graph.edges.len();
        let mut ef = Tensor::zeros(m, EDGE_FEATURE_DIM);
        let mut ew = Tensor::zeros(m, WEIGHT_FEATURE_DIM);
        for (k, e) in graph.edges.iter().enumerate() {
            ef.set(k, e.kind.index(), 1.0);
            if let Some(level) = e.level {
                ef.set(k, 3 + (level.code() as usize - 1), 1.0);
            }
            ew.set(k, 0, e.influence);
        }
        let edges: Vec<(usize, usize)> = graph.edges.iter().map(|e| (e.src, e.dst)).collect();
        GraphInput::new(node_features, &edges, ef, ew)
    }

    pub fn with_laplacian_pe(mut self, dim: usize) -> Self {
        self.positional = (dim > 0).then(|| laplacian_pe(self.num_nodes, &self.src, &self.dst, dim));
        self
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Relabel vertices: vertex `i` becomes `perm[i]`. Edge order is kept.
    pub fn permuted(&self, perm: &[usize]) -> GraphInput {
        let n = self.num_nodes;
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        GraphInput {
            num_nodes: n,
            src: self.src.iter().map(|&s| perm[s]).collect(),
            dst: self.dst.iter().map(|&d| perm[d]).collect(),
            node_features: self.node_features.select_rows(&inv),
            edge_features: self.edge_features.clone(),
            edge_weights: self.edge_weights.clone(),
            positional: self.positional.as_ref().map(|p| p.select_rows(&inv)),
        }
    }
}

/// Eigenvectors of the symmetric normalized Laplacian of the undirected
/// skeleton, skipping the smallest eigenvalue. The sign of each vector is
/// fixed so that its largest-magnitude entry is positive.
pub fn laplacian_pe(n: usize, src: &[usize], dst: &[usize], dim: usize) -> Tensor {
    let mut adj = nalgebra::DMatrix::<f64>::zeros(n, n);
    for (&s, &d) in src.iter().zip(dst) {
        if s != d {
            adj[(s, d)] = 1.0;
            adj[(d, s)] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| adj.row(i).sum()).collect();
    let mut lap = nalgebra::DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            if adj[(i, j)] != 0.0 {
                lap[(i, j)] -= adj[(i, j)] / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut out = Tensor::zeros(n, dim);
    for (c, &k) in order.iter().skip(1).take(dim).enumerate() {
        let col = eig.eigenvectors.column(k);
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            out.set(r, c, sign * col[r]);
        }
    }
    out
}

/// Overrides applied during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightFactor {
    /// Use `E_weight · w` as computed.
    #[default]
    Learned,
    /// Replace `E_weight · w` by the all-ones vector.
    Unit,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub weight_factor: WeightFactor,
}

/// Values recorded for one layer during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    /// Raw scores `h` (m×d) before softmax.
    pub scores: Tensor,
    /// Attention weights after the per-neighbourhood softmax (m×d).
    pub attention: Tensor,
    /// Aggregated messages `ĥ` (n×d).
    pub aggregated: Tensor,
    pub v: Tensor,
    pub e: Tensor,
    pub w: Tensor,
}

/// Tape variables produced by [`ClgtModel::record`].
pub struct ForwardTrace {
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub scores: Var,
    pub attention: Var,
    pub aggregated: Var,
    pub v: Var,
    pub e: Var,
    pub w: Option<Var>,
}

/// Dropout source for training passes.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Column-block indicator (d × heads) used by scalar attention.
fn head_blocks(d: usize, heads: usize) -> Tensor {
    let dk = d / heads;
    let mut b = Tensor::zeros(d, heads);
    for c in 0..d {
        b.set(c, c / dk, 1.0);
    }
    b
}

impl ClgtModel {
    /// Uniform(−a, a) with `a = √(6 / (fan_in + fan_out))` for weight
    /// matrices, zero biases, unit norm gains.
    pub fn init(config: ClgtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = layout(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.rows, spec.cols),
                Init::Ones => Tensor::filled(spec.rows, spec.cols, 1.0),
                Init::Glorot => {
                    let a = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                    let data = (0..spec.rows * spec.cols)
                        .map(|_| rng.random_range(-a..a))
                        .collect();
                    Tensor::new(spec.rows, spec.cols, data)?
                }
            };
            names.push(spec.name);
            params.push(t);
        }
        Ok(ClgtModel {
            config,
            seed,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ClgtConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ModelError::UnknownParam(name.into()))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.param_index(name)?])
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self.param_index(name)?;
        if self.params[i].shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set_param",
                left: self.params[i].shape(),
                right: value.shape(),
            }
            .into());
        }
        self.params[i] = value;
        Ok(())
    }

    fn input_params(&self) -> usize {
        6 + if self.config.laplacian_pe_dim > 0 { 2 } else { 0 }
    }

    pub fn layer_params(&self, layer: usize) -> LayerParams {
        let b = self.input_params() + layer * PER_LAYER;
        LayerParams {
            q: b,
            k: b + 1,
            v: b + 2,
            e: b + 3,
            e_weight: b + 4,
            o_v: (b + 5, b + 6),
            o_e: (b + 7, b + 8),
            o_w: (b + 9, b + 10),
            norm_v: (b + 11, b + 12),
            norm_e: (b + 13, b + 14),
            norm_w: (b + 15, b + 16),
        }
    }

    fn classifier_params(&self) -> (usize, usize) {
        let b = self.input_params() + self.config.layers * PER_LAYER;
        (b, b + 1)
    }

    /// Put every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn check_input(&self, input: &GraphInput) -> Result<()> {
        let c = &self.config;
        let checks = [
            ("node_features", input.node_features.shape(), (input.num_nodes, c.node_in_dim)),
            ("edge_features", input.edge_features.shape(), (input.num_edges(), c.edge_in_dim)),
            ("edge_weights", input.edge_weights.shape(), (input.num_edges(), c.weight_in_dim)),
        ];
        for (op, got, want) in checks {
            if got != want {
                return Err(DiffError::ShapeMismatch {
                    op,
                    left: got,
                    right: want,
                }
                .into());
            }
        }
        if c.laplacian_pe_dim > 0 {
            match &input.positional {
                Some(p) if p.shape() == (input.num_nodes, c.laplacian_pe_dim) => {}
                _ => {
                    return Err(ModelError::BadConfig(
                        "positional encoding missing or mis-shaped".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// `v⁰ = P_v x_v (+ P_lap pe)`, `e⁰ = P_e x_e`, `w⁰ = P_w x_w`.
    pub fn embed_inputs(&self, tape: &mut Tape, p: &[Var], input: &GraphInput) -> Result<(Var, Var, Var)> {
        self.check_input(input)?;
        let xv = tape.constant(input.node_features.clone());
        let xe = tape.constant(input.edge_features.clone());
        let xw = tape.constant(input.edge_weights.clone());
        let mut v = tape.linear(xv, p[0], Some(p[1]))?;
        if let Some(pe) = input.positional.as_ref().filter(|_| self.config.laplacian_pe_dim > 0) {
            let xp = tape.constant(pe.clone());
            let lp = tape.linear(xp, p[6], Some(p[7]))?;
            v = tape.add(v, lp)?;
        }
        let e = tape.linear(xe, p[2], Some(p[3]))?;
        let w = tape.linear(xw, p[4], Some(p[5]))?;
        Ok((v, e, w))
    }

    /// Per-edge scores for all heads (m×d); head k owns columns
    /// `k·d_k..(k+1)·d_k`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_scores(
        &self,
        tape: &mut Tape,
        p: &[Var],
        layer: usize,
        v: Var,
        e: Var,
        w: Option<Var>,
        src: &Rc<[usize]>,
        dst: &Rc<[usize]>,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let lp = self.layer_params(layer);
        let q = tape.matmul(v, p[lp.q])?;
        let k = tape.matmul(v, p[lp.k])?;
        let q_i = tape.gather_rows(q, dst.clone())?;
        let k_j = tape.gather_rows(k, src.clone())?;
        let qk = tape.mul(q_i, k_j)?;
        let qk = tape.scale(qk, 1.0 / (self.config.head_dim() as f64).sqrt());
        let ee = tape.matmul(e, p[lp.e])?;
        let mut h = tape.mul(qk, ee)?;
        if self.config.weighted_pipeline {
            let factor = match opts.weight_factor {
                WeightFactor::Learned => {
                    let w = w.ok_or_else(|| ModelError::BadConfig("weight stream missing".into()))?;
                    tape.matmul(w, p[lp.e_weight])?
                }
                WeightFactor::Unit => {
                    let (m, d) = tape.value(ee).shape();
                    tape.constant(Tensor::filled(m, d, 1.0))
                }
            };
            h = tape.mul(h, factor)?;
        }
        Ok(h)
    }

    /// Normalize scores over each vertex's in-neighbours and sum the weighted
    /// values `V v_j`. Returns `(attention, ĥ)`; vertices without
    /// in-neighbours aggregate to zero.
    #[allow(clippy::too_many_arguments)]
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        p: &[Var],
        layer: usize,
        scores: Var,
        v: Var,
        src: &Rc<[usize]>,
        dst: &Rc<[usize]>,
        n: usize,
    ) -> Result<(Var, Var)> {
        let lp = self.layer_params(layer);
        let attention = match self.config.attention {
            AttentionMode::Elementwise => tape.neighbor_softmax(scores, dst.clone(), n)?,
            AttentionMode::Scalar => {
                let blocks = head_blocks(self.config.hidden_dim, self.config.heads);
                let b = tape.constant(blocks.clone());
                let bt = tape.constant(blocks.transpose());
                let per_head = tape.matmul(scores, b)?;
                let a = tape.neighbor_softmax(per_head, dst.clone(), n)?;
                tape.matmul(a, bt)?
            }
        };
        let vv = tape.matmul(v, p[lp.v])?;
        let v_j = tape.gather_rows(vv, src.clone())?;
        let msg = tape.mul(attention, v_j)?;
        let agg = tape.segment_sum(msg, dst.clone(), n)?;
        Ok((attention, agg))
    }

    fn dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
        match dropout {
            Some(Dropout { rate, rng }) if *rate > 0.0 => {
                let (r, c) = tape.value(x).shape();
                let keep = 1.0 - *rate;
                let data = (0..r * c)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = tape.constant(Tensor::new(r, c, data)?);
                Ok(tape.mul(x, mask)?)
            }
            _ => Ok(x),
        }
    }

    /// One transformer layer.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        layer: usize,
        (v, e, w): (Var, Var, Option<Var>),
        src: &Rc<[usize]>,
        dst: &Rc<[usize]>,
        n: usize,
        opts: &ForwardOptions,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<LayerTrace> {
        let lp = self.layer_params(layer);
        let scores = self.attention_scores(tape, p, layer, v, e, w, src, dst, opts)?;
        let (attention, aggregated) = self.aggregate(tape, p, layer, scores, v, src, dst, n)?;

        let agg = Self::dropout(tape, aggregated, dropout)?;
        let ov = tape.linear(agg, p[lp.o_v.0], Some(p[lp.o_v.1]))?;
        let rv = tape.add(ov, v)?;
        let v_next = tape.layer_norm(rv, p[lp.norm_v.0], p[lp.norm_v.1])?;

        let hs = Self::dropout(tape, scores, dropout)?;
        let oe = tape.linear(hs, p[lp.o_e.0], Some(p[lp.o_e.1]))?;
        let re = tape.add(oe, e)?;
        let e_next = tape.layer_norm(re, p[lp.norm_e.0], p[lp.norm_e.1])?;

        let w_next = match w {
            Some(w) => {
                let ow = tape.linear(hs, p[lp.o_w.0], Some(p[lp.o_w.1]))?;
                let rw = tape.add(ow, w)?;
                Some(tape.layer_norm(rw, p[lp.norm_w.0], p[lp.norm_w.1])?)
            }
            None => None,
        };
        Ok(LayerTrace {
            scores,
            attention,
            aggregated,
            v: v_next,
            e: e_next,
            w: w_next,
        })
    }

    /// Record the full forward pass on `tape`, with `p` from
    /// [`ClgtModel::register`].
    pub fn record(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &GraphInput,
        opts: &ForwardOptions,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<ForwardTrace> {
        let (mut v, mut e, w0) = self.embed_inputs(tape, p, input)?;
        let mut w = self.config.weighted_pipeline.then_some(w0);
        let src: Rc<[usize]> = Rc::from(input.src.as_slice());
        let dst: Rc<[usize]> = Rc::from(input.dst.as_slice());
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let t = self.layer_forward(tape, p, l, (v, e, w), &src, &dst, input.num_nodes, opts, &mut dropout)?;
            v = t.v;
            e = t.e;
            w = t.w;
            layers.push(t);
        }
        let (cw, cb) = self.classifier_params();
        let logits = tape.linear(v, p[cw], Some(p[cb]))?;
        Ok(ForwardTrace { logits, layers })
    }

    /// Logits (n × classes) for one graph.
    pub fn forward(&self, input: &GraphInput) -> Result<Tensor> {
        self.forward_with(input, &ForwardOptions::default())
    }

    pub fn forward_with(&self, input: &GraphInput, opts: &ForwardOptions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.register(&mut tape);
        let trace = self.record(&mut tape, &p, input, opts, None)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Logits plus per-layer activations.
    pub fn forward_with_activations(&self, input: &GraphInput) -> Result<(Tensor, Vec<LayerActivations>)> {
        let mut tape = Tape::new();
        let p = self.register(&mut tape);
        let trace = self.record(&mut tape, &p, input, &ForwardOptions::default(), None)?;
        let acts = trace
            .layers
            .iter()
            .map(|l| LayerActivations {
                scores: tape.value(l.scores).clone(),
                attention: tape.value(l.attention).clone(),
                aggregated: tape.value(l.aggregated).clone(),
                v: tape.value(l.v).clone(),
                e: tape.value(l.e).clone(),
                w: l.w.map(|w| tape.value(w).clone()).unwrap_or_else(|| Tensor::zeros(0, 0)),
            })
            .collect();
        Ok((tape.value(trace.logits).clone(), acts))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, t)| NamedParam {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut model = ClgtModel::init(ck.config.clone(), ck.seed)?;
        if model.names.len() != ck.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.names.len(),
                ck.params.len()
            )));
        }
        for (i, np) in ck.params.iter().enumerate() {
            if np.name != model.names[i] {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {i} is `{}`, expected `{}`",
                    np.name, model.names[i]
                )));
            }
            let t = Tensor::new(np.rows, np.cols, np.data.clone())?;
            model.set_param(&np.name, t)?;
        }
        Ok(model)
    }
}

/// Extract head `k`'s block from an m×d or n×d activation.
pub fn head_slice(t: &Tensor, head: usize, heads: usize) -> Tensor {
    let dk = t.cols() / heads;
    t.col_slice(head * dk, (head + 1) * dk)
}

pub const CHECKPOINT_FORMAT: &str = "clgt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// JSON model checkpoint: config, seed and flat parameter arrays. `extra`
/// carries caller metadata (thresholds, provenance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ClgtConfig,
    pub seed: u64,
    pub params: Vec<NamedParam>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}

/// Edge one-hot helpers, exposed for callers assembling inputs by hand.
pub fn edge_feature_row(kind: EdgeKind, level: Option<Level>) -> [f64; EDGE_FEATURE_DIM] {
    let mut row = [0.0; EDGE_FEATURE_DIM];
    row[kind.index()] = 1.0;
    if let Some(l) = level {
        row[3 + l.code() as usize - 1] = 1.0;
    }
    row
}
