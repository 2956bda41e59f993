//! Perturbation-based explanations of node predictions.
//!
//! A round perturbs a random subset of vertices (their feature rows are
//! replaced by the mean row), reruns the predictor and records which
//! predictions changed. Over many rounds this gives a table of binary
//! variables per vertex. For each target vertex a Markov blanket is grown
//! from the table with conditional independence tests, a Bayesian network is
//! fitted over the target and its blanket by BIC hill climbing, and the
//! blanket members adjacent to the target become weighted influence edges.

mod blanket;
mod bn;
mod stats;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::model::{ClgtModel, GraphInput, ModelError};

pub use blanket::{markov_blanket, BlanketMember, BlanketOptions};
pub use bn::{bic_score, family_score, hill_climb, BayesianNetwork, Cpt, Move, MIN_IMPROVEMENT};
pub use stats::{
    dependency_test, entropy, mutual_information, normalized_mutual_information, test_columns, DiscreteData,
    TestKind, TestResult,
};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("perturbation probability must lie in (0, 1], got {0}")]
    BadProbability(f64),
    #[error("sample count must be at least 1")]
    EmptySamples,
    #[error("unknown variable {0}")]
    UnknownVariable(usize),
    #[error("shape: {0}")]
    Shape(String),
    #[error("invalid explainer config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

/// Anything that maps a node feature matrix to one predicted class per
/// vertex over a fixed graph.
pub trait NodePredictor: Sync {
    fn num_vertices(&self) -> usize;
    fn predict(&self, features: &Tensor) -> Result<Vec<usize>>;
}

/// A trained model bound to one input graph.
pub struct ClgtPredictor<'a> {
    pub model: &'a ClgtModel,
    pub input: &'a GraphInput,
}

impl NodePredictor for ClgtPredictor<'_> {
    fn num_vertices(&self) -> usize {
        self.input.num_nodes
    }

    fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let input = GraphInput {
            node_features: features.clone(),
            ..self.input.clone()
        };
        Ok(self.model.forward(&input)?.argmax_rows())
    }
}

/// How each vertex is represented as a random variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// A target is its prediction-changed flag; a candidate influencer is
    /// its perturbed flag.
    #[default]
    Changed,
    /// Every vertex is the 4-state `2·perturbed + changed`.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    pub samples: usize,
    pub p: f64,
    pub alpha: f64,
    pub max_parents: usize,
    pub seed: u64,
    pub encoding: Encoding,
    pub test: TestKind,
    pub pair_lookahead: bool,
    /// Vertices to explain; all when `None`.
    pub targets: Option<Vec<usize>>,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            samples: 800,
            p: 0.5,
            alpha: 0.05,
            max_parents: 3,
            seed: 0,
            encoding: Encoding::Changed,
            test: TestKind::ChiSquare,
            pair_lookahead: true,
            targets: None,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        check_probability(self.p)?;
        if self.samples == 0 {
            return Err(ExplainError::EmptySamples);
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ExplainError::BadConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.max_parents == 0 {
            return Err(ExplainError::BadConfig("max_parents must be at least 1".into()));
        }
        Ok(())
    }

    pub fn blanket_options(&self) -> BlanketOptions {
        BlanketOptions {
            alpha: self.alpha,
            test: self.test,
            pair_lookahead: self.pair_lookahead,
        }
    }
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(ExplainError::BadProbability(p))
    }
}

/// Column means of a feature matrix.
pub fn mean_row(features: &Tensor) -> Vec<f64> {
    let n = features.rows().max(1) as f64;
    (0..features.cols())
        .map(|c| (0..features.rows()).map(|r| features.get(r, c)).sum::<f64>() / n)
        .collect()
}

/// Select each vertex with probability `p` and overwrite its feature row
/// with `mean`.
pub fn perturb(features: &Tensor, mean: &[f64], p: f64, rng: &mut impl Rng) -> Result<(Tensor, Vec<bool>)> {
    check_probability(p)?;
    if mean.len() != features.cols() {
        return Err(ExplainError::Shape(format!(
            "mean row of {} for {} feature columns",
            mean.len(),
            features.cols()
        )));
    }
    let mut out = features.clone();
    let flags: Vec<bool> = (0..features.rows()).map(|_| rng.random_bool(p)).collect();
    for (r, f) in flags.iter().enumerate() {
        if *f {
            out.row_mut(r).copy_from_slice(mean);
        }
    }
    Ok((out, flags))
}

/// `s × n` outcome of the perturbation rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTable {
    pub perturbed: Vec<Vec<bool>>,
    pub changed: Vec<Vec<bool>>,
    /// Unperturbed prediction per vertex.
    pub baseline: Vec<usize>,
}

impl SampleTable {
    pub fn rows(&self) -> usize {
        self.perturbed.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.baseline.len()
    }

    fn column(&self, v: usize, pick: impl Fn(usize, usize) -> u8) -> Vec<u8> {
        (0..self.rows()).map(|r| pick(r, v)).collect()
    }

    pub fn changed_column(&self, v: usize) -> Vec<u8> {
        self.column(v, |r, v| u8::from(self.changed[r][v]))
    }

    pub fn perturbed_column(&self, v: usize) -> Vec<u8> {
        self.column(v, |r, v| u8::from(self.perturbed[r][v]))
    }

    pub fn joint_column(&self, v: usize) -> Vec<u8> {
        self.column(v, |r, v| 2 * u8::from(self.perturbed[r][v]) + u8::from(self.changed[r][v]))
    }

    /// Variables for explaining `target`: column 0 is the target, column
    /// `1 + k` is `candidates[k]`.
    pub fn target_data(&self, target: usize, candidates: &[usize], encoding: Encoding) -> Result<DiscreteData> {
        let n = self.num_vertices();
        if let Some(bad) = std::iter::once(target).chain(candidates.iter().copied()).find(|v| *v >= n) {
            return Err(ExplainError::UnknownVariable(bad));
        }
        let (first, card) = match encoding {
            Encoding::Changed => (self.changed_column(target), 2),
            Encoding::Joint => (self.joint_column(target), 4),
        };
        let mut columns = vec![first];
        for &u in candidates {
            columns.push(match encoding {
                Encoding::Changed => self.perturbed_column(u),
                Encoding::Joint => self.joint_column(u),
            });
        }
        let cards = vec![card; columns.len()];
        DiscreteData::new(columns, cards)
    }
}

/// `samples` independent perturbation rounds. Round `r` draws from a ChaCha8
/// stream `r` under `seed`, so the table does not depend on thread
/// scheduling.
pub fn generate_samples(
    predictor: &dyn NodePredictor,
    features: &Tensor,
    p: f64,
    samples: usize,
    seed: u64,
) -> Result<SampleTable> {
    check_probability(p)?;
    if samples == 0 {
        return Err(ExplainError::EmptySamples);
    }
    if features.rows() != predictor.num_vertices() {
        return Err(ExplainError::Shape(format!(
            "{} feature rows for {} vertices",
            features.rows(),
            predictor.num_vertices()
        )));
    }
    let baseline = predictor.predict(features)?;
    let mean = mean_row(features);
    let rounds: Vec<(Vec<bool>, Vec<bool>)> = (0..samples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let (x, flags) = perturb(features, &mean, p, &mut rng)?;
            let pred = predictor.predict(&x)?;
            let changed = pred.iter().zip(&baseline).map(|(a, b)| a != b).collect();
            Ok((flags, changed))
        })
        .collect::<Result<_>>()?;
    let (perturbed, changed) = rounds.into_iter().unzip();
    Ok(SampleTable {
        perturbed,
        changed,
        baseline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEdge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetExplanation {
    pub target: usize,
    pub blanket: Vec<usize>,
    /// Network edges as `(from, to)` vertex ids.
    pub network_edges: Vec<(usize, usize)>,
    pub bic: f64,
}

pub const MIN_INFLUENCE_WEIGHT: f64 = 1e-6;

/// Influence graph over the same vertex set as the explained graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationGraph {
    pub num_vertices: usize,
    pub edges: Vec<InfluenceEdge>,
    pub targets: Vec<TargetExplanation>,
    pub config: ExplainerConfig,
    pub samples: usize,
}

/// Blanket, network and influence edges for one target.
pub fn explain_target(
    table: &SampleTable,
    target: usize,
    config: &ExplainerConfig,
) -> Result<(TargetExplanation, Vec<InfluenceEdge>)> {
    let candidates: Vec<usize> = (0..table.num_vertices()).filter(|u| *u != target).collect();
    let data = table.target_data(target, &candidates, config.encoding)?;
    let vars: Vec<usize> = (1..=candidates.len()).collect();
    let members = markov_blanket(&data, 0, &vars, &config.blanket_options())?;
    let mut nodes = vec![0];
    nodes.extend(members.iter().map(|m| m.variable));
    let net = hill_climb(&data, &nodes, config.max_parents);
    let vertex = |col: usize| if col == 0 { target } else { candidates[col - 1] };
    let mut edges = Vec::new();
    for m in &members {
        let pos = net.position(m.variable).expect("blanket member is a network node");
        if net.adjacent(0, pos) {
            let nmi = normalized_mutual_information(&data, m.variable, 0);
            edges.push(InfluenceEdge {
                src: vertex(m.variable),
                dst: target,
                weight: nmi.clamp(MIN_INFLUENCE_WEIGHT, 1.0),
                p_value: m.p_value,
            });
        }
    }
    edges.sort_by_key(|e| e.src);
    let mut blanket: Vec<usize> = members.iter().map(|m| vertex(m.variable)).collect();
    blanket.sort_unstable();
    let network_edges = net
        .edges()
        .into_iter()
        .map(|(a, b)| (vertex(net.variables[a]), vertex(net.variables[b])))
        .collect();
    Ok((
        TargetExplanation {
            target,
            blanket,
            network_edges,
            bic: net.score,
        },
        edges,
    ))
}

/// Per-target explanations assembled into one graph. Targets are processed
/// in parallel and merged in target order.
pub fn build_influence_graph(table: &SampleTable, config: &ExplainerConfig) -> Result<ExplanationGraph> {
    let n = table.num_vertices();
    let targets: Vec<usize> = match &config.targets {
        Some(t) => t.clone(),
        None => (0..n).collect(),
    };
    if let Some(bad) = targets.iter().find(|t| **t >= n) {
        return Err(ExplainError::UnknownVariable(*bad));
    }
    let results: Vec<(TargetExplanation, Vec<InfluenceEdge>)> = targets
        .par_iter()
        .map(|t| explain_target(table, *t, config))
        .collect::<Result<_>>()?;
    let mut edges = Vec::new();
    let mut explanations = Vec::new();
    for (t, e) in results {
        explanations.push(t);
        edges.extend(e);
    }
    Ok(ExplanationGraph {
        num_vertices: n,
        edges,
        targets: explanations,
        config: config.clone(),
        samples: table.rows(),
    })
}

/// Sample, then explain.
pub fn explain(predictor: &dyn NodePredictor, features: &Tensor, config: &ExplainerConfig) -> Result<ExplanationGraph> {
    config.validate()?;
    let table = generate_samples(predictor, features, config.p, config.samples, config.seed)?;
    build_influence_graph(&table, config)
}

/// Vertex display attributes for DOT export.
#[derive(Debug, Clone, Default)]
pub struct DotStyle<'a> {
    pub labels: Option<&'a [String]>,
    /// Group (e.g. team) per vertex; vertices are coloured by group.
    pub groups: Option<&'a [usize]>,
    /// Draw vertices without any incident edge.
    pub show_isolated: bool,
}

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#aec7e8", "#ffbb78",
];

pub fn group_color(group: usize) -> &'static str {
    PALETTE[group % PALETTE.len()]
}

impl ExplanationGraph {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_json()?)
    }

    /// Directed graph with pen width proportional to influence weight.
    pub fn to_dot(&self, style: &DotStyle<'_>) -> String {
        let mut out = String::from("digraph influence {\n  node [shape=circle, style=filled, fontsize=10];\n");
        let mut used = vec![style.show_isolated; self.num_vertices];
        for e in &self.edges {
            used[e.src] = true;
            used[e.dst] = true;
        }
        for v in (0..self.num_vertices).filter(|v| used[*v]) {
            let label = style.labels.and_then(|l| l.get(v)).cloned().unwrap_or_else(|| v.to_string());
            let color = style.groups.and_then(|g| g.get(v)).map_or("#dddddd", |g| group_color(*g));
            let _ = writeln!(out, "  {v} [label=\"{}\", fillcolor=\"{color}\"];", escape(&label));
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "  {} -> {} [penwidth={:.3}, label=\"{:.2}\"];",
                e.src,
                e.dst,
                0.5 + 4.5 * e.weight,
                e.weight
            );
        }
        out.push_str("}\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| ExplainError::Io {
        path: path.display().to_string(),
        source,
    })
}
