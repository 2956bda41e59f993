//! Python bindings: course data, graph building, the grade model,
//! training, metrics and the explainer.
//!
//! ```python
//! import pyclgt
//! course = pyclgt.Course.synthetic(seed=0)
//! graphs = course.build_graphs()
//! model = pyclgt.Model(hidden_dim=8, heads=2, layers=2, node_in_dim=graphs.feature_dim)
//! model, history = pyclgt.train(model, graphs, max_epochs=5)
//! print(pyclgt.evaluate(model, graphs)["acc"])
//! ```

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError, PyValueError};
use pyo3::prelude::*;

use clgt::explainer::{explain as run_explain, ClgtPredictor, DotStyle, Encoding, ExplainerConfig, ExplanationGraph};
use clgt::graphgen::{normalize_influences as normalize, EdgeKind, ScopeConfig};
use clgt::model::{AttentionMode, Checkpoint, ClgtConfig, ClgtModel};
use clgt::pipeline::{activity_matrix, build_graphs, samples, weekly_graphs, BuiltGraphs, CourseData, DataPaths};
use clgt::synth::{generate, write_course, SynthConfig};
use clgt::train::{
    compute_metrics, evaluate as evaluate_mask, full_mask, roc_auc as auc, split_dataset, train_loop, Sample,
    SplitRatios, TrainConfig,
};

create_exception!(pyclgt, ClgtError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    ClgtError::new_err(e.to_string())
}

/// Parse a JSON string into Python objects.
fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Parsed course exports: roster, commits, issues and grades.
#[pyclass(module = "pyclgt", frozen)]
struct Course {
    data: CourseData,
}

#[pymethods]
impl Course {
    /// Load `commits.csv`, `issues.csv`, `grades.csv` and `roster.csv` from a directory.
    #[staticmethod]
    #[pyo3(signature = (data_dir, weeks=16))]
    fn load(data_dir: PathBuf, weeks: u32) -> PyResult<Self> {
        let data = CourseData::load(&DataPaths::in_dir(data_dir), weeks).map_err(err)?;
        Ok(Course { data })
    }

    /// A synthetic course: 75 students, 11 teams, 16 weeks by default.
    #[staticmethod]
    #[pyo3(signature = (seed=0, weeks=16, commits=4903, issues=862, team_sizes=None))]
    fn synthetic(seed: u64, weeks: u32, commits: usize, issues: usize, team_sizes: Option<Vec<usize>>) -> PyResult<Self> {
        let mut cfg = SynthConfig {
            seed,
            weeks,
            commits,
            issues,
            ..SynthConfig::default()
        };
        if let Some(t) = team_sizes {
            cfg.team_sizes = t;
        }
        let data = generate(&cfg).map_err(err)?;
        Ok(Course { data })
    }

    /// Write the four CSV exports into `out_dir`.
    fn write(&self, out_dir: PathBuf) -> PyResult<()> {
        write_course(&self.data, out_dir).map(|_| ()).map_err(err)
    }

    #[getter]
    fn num_students(&self) -> usize {
        self.data.roster.len()
    }

    #[getter]
    fn num_teams(&self) -> usize {
        self.data.roster.teams.len()
    }

    #[getter]
    fn num_weeks(&self) -> u32 {
        self.data.num_weeks
    }

    #[getter]
    fn num_commits(&self) -> usize {
        self.data.commits.len()
    }

    #[getter]
    fn num_issues(&self) -> usize {
        self.data.issues.len()
    }

    #[getter]
    fn student_ids(&self) -> Vec<String> {
        self.data.roster.students.iter().map(|(s, _)| s.0.clone()).collect()
    }

    #[getter]
    fn team_ids(&self) -> Vec<String> {
        self.data.roster.students.iter().map(|(_, t)| t.0.clone()).collect()
    }

    /// Weekly graphs, level thresholds, matrices and node features.
    #[pyo3(signature = (thresholds=None))]
    fn build_graphs(&self, thresholds: Option<(f64, f64)>) -> PyResult<Graphs> {
        let t = thresholds.map(|(a, b)| clgt::graphgen::LevelThresholds::uniform(a, b));
        let built = build_graphs(&self.data, &ScopeConfig::default(), t).map_err(err)?;
        let samples = samples(&self.data, &built).map_err(err)?;
        Ok(Graphs { built, samples })
    }

    /// Student × week outgoing influence mass, rows grouped by team.
    /// Returns `(student_ids, rows)`.
    fn activity_matrix(&self) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
        let graphs = weekly_graphs(&self.data, &ScopeConfig::default()).map_err(err)?;
        let m = activity_matrix(&graphs, &self.data.roster);
        Ok((m.student_ids, m.values))
    }

    fn __repr__(&self) -> String {
        format!(
            "Course(students={}, teams={}, weeks={}, commits={}, issues={})",
            self.num_students(),
            self.num_teams(),
            self.num_weeks(),
            self.num_commits(),
            self.num_issues()
        )
    }
}

/// Built weekly graphs and model-ready samples.
#[pyclass(module = "pyclgt", frozen)]
struct Graphs {
    built: BuiltGraphs,
    samples: Vec<Sample>,
}

impl Graphs {
    fn week(&self, week: u32) -> PyResult<usize> {
        self.built
            .weeks
            .iter()
            .position(|w| w.graph.week == week)
            .ok_or_else(|| PyIndexError::new_err(format!("no graph for week {week}")))
    }
}

fn edge_kind(kind: &str) -> PyResult<EdgeKind> {
    match kind {
        "addition" => Ok(EdgeKind::Addition),
        "deletion" => Ok(EdgeKind::Deletion),
        "issue" => Ok(EdgeKind::Issue),
        _ => Err(PyValueError::new_err(format!("unknown edge kind `{kind}`"))),
    }
}

#[pymethods]
impl Graphs {
    #[getter]
    fn num_weeks(&self) -> usize {
        self.built.weeks.len()
    }

    #[getter]
    fn matrix_count(&self) -> usize {
        self.built.matrix_count()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.built.weeks.first().map_or(0, |w| w.features.num_features())
    }

    /// `{"addition": (t1, t2), "deletion": ..., "issue": ...}`
    #[getter]
    fn thresholds<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.built.thresholds)
    }

    fn num_edges(&self, week: u32) -> PyResult<usize> {
        Ok(self.built.weeks[self.week(week)?].graph.edges.len())
    }

    /// The week's graph as JSON.
    fn graph_json(&self, week: u32) -> PyResult<String> {
        Ok(self.built.weeks[self.week(week)?].graph.to_json())
    }

    /// Dense n×n influence matrix of one kind: "addition", "deletion" or "issue".
    fn matrix(&self, week: u32, kind: &str) -> PyResult<Vec<Vec<f64>>> {
        let k = edge_kind(kind)?;
        Ok(self.built.weeks[self.week(week)?].matrices.values(k).clone())
    }

    fn features(&self, week: u32) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.built.weeks[self.week(week)?].features.features.clone())
    }
}

/// The graph transformer with the weighted-edge pipeline.
#[pyclass(module = "pyclgt", frozen)]
struct Model {
    inner: ClgtModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (
        hidden_dim=88, heads=8, layers=10, classes=3, node_in_dim=19,
        attention="elementwise", weighted_pipeline=true, dropout=0.0, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        hidden_dim: usize,
        heads: usize,
        layers: usize,
        classes: usize,
        node_in_dim: usize,
        attention: &str,
        weighted_pipeline: bool,
        dropout: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let attention = match attention {
            "elementwise" => AttentionMode::Elementwise,
            "scalar" => AttentionMode::Scalar,
            other => return Err(PyValueError::new_err(format!("unknown attention mode `{other}`"))),
        };
        let config = ClgtConfig {
            hidden_dim,
            heads,
            layers,
            classes,
            node_in_dim,
            attention,
            weighted_pipeline,
            dropout,
            ..ClgtConfig::default()
        };
        Ok(Model {
            inner: ClgtModel::init(config, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(err)?;
        Ok(Model {
            inner: ClgtModel::from_checkpoint(&ck).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().save(path).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    /// Per-vertex class logits for one week.
    fn forward(&self, graphs: &Graphs, week: u32) -> PyResult<Vec<Vec<f64>>> {
        let s = &graphs.samples[graphs.week(week)?];
        let out = self.inner.forward(&s.input).map_err(err)?;
        Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(hidden_dim={}, heads={}, layers={}, params={})",
            c.hidden_dim,
            c.heads,
            c.layers,
            self.inner.param_count()
        )
    }
}

/// Train on the course's weekly grades. Returns the best-validation model
/// and the epoch history as a list of dicts.
#[pyfunction]
#[pyo3(signature = (model, graphs, max_epochs=200, initial_lr=1e-3, patience=5, seed=0, split=(0.6, 0.2, 0.2)))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    model: &Model,
    graphs: &Graphs,
    max_epochs: usize,
    initial_lr: f64,
    patience: usize,
    seed: u64,
    split: (f64, f64, f64),
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let config = TrainConfig {
        max_epochs,
        initial_lr,
        patience,
        seed,
        split: SplitRatios {
            train: split.0,
            val: split.1,
            test: split.2,
        },
        ..TrainConfig::default()
    };
    let masks = split_dataset(&graphs.samples, config.split, seed).map_err(err)?;
    let outcome = train_loop(model.inner.clone(), &graphs.samples, &masks, &config).map_err(err)?;
    let history = to_py(py, &outcome.history)?;
    Ok((Model { inner: outcome.model }, history))
}

/// Metrics over every labelled week × student cell.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &Model, graphs: &Graphs) -> PyResult<Bound<'py, PyAny>> {
    let mask = full_mask(&graphs.samples);
    let m = evaluate_mask(&model.inner, &graphs.samples, &mask).map_err(err)?;
    to_py(py, &m)
}

/// Accuracy, F1 and one-vs-rest AUC from per-row class scores.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, scores: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> PyResult<Bound<'py, PyAny>> {
    let m = compute_metrics(&scores, &labels, classes).map_err(err)?;
    to_py(py, &m)
}

/// Binary ROC AUC; `None` when one class is absent.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(auc(&scores, &labels))
}

/// `value / sum(values)`; all values must be positive.
#[pyfunction]
fn normalize_influences(values: Vec<f64>) -> PyResult<Vec<f64>> {
    normalize(&values).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Influence graph from the perturbation explainer.
#[pyclass(module = "pyclgt", frozen)]
struct Explanation {
    graph: ExplanationGraph,
    labels: Vec<String>,
    groups: Vec<usize>,
}

#[pymethods]
impl Explanation {
    #[getter]
    fn num_vertices(&self) -> usize {
        self.graph.num_vertices
    }

    /// `(src, dst, weight)` triples.
    #[getter]
    fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.graph.edges.iter().map(|e| (e.src, e.dst, e.weight)).collect()
    }

    fn blanket(&self, target: usize) -> PyResult<Vec<usize>> {
        self.graph
            .targets
            .iter()
            .find(|t| t.target == target)
            .map(|t| t.blanket.clone())
            .ok_or_else(|| PyIndexError::new_err(format!("no explanation for vertex {target}")))
    }

    fn to_json(&self) -> PyResult<String> {
        self.graph.to_json().map_err(err)
    }

    fn to_dot(&self) -> String {
        self.graph.to_dot(&DotStyle {
            labels: Some(&self.labels),
            groups: Some(&self.groups),
            show_isolated: true,
        })
    }
}

/// Explain the model's predictions on one week's graph.
#[pyfunction]
#[pyo3(signature = (model, course, graphs, week, samples=800, p=0.5, alpha=0.05, seed=0, encoding="changed"))]
#[allow(clippy::too_many_arguments)]
fn explain(
    model: &Model,
    course: &Course,
    graphs: &Graphs,
    week: u32,
    samples: usize,
    p: f64,
    alpha: f64,
    seed: u64,
    encoding: &str,
) -> PyResult<Explanation> {
    let encoding = match encoding {
        "changed" => Encoding::Changed,
        "joint" => Encoding::Joint,
        other => return Err(PyValueError::new_err(format!("unknown encoding `{other}`"))),
    };
    let config = ExplainerConfig {
        samples,
        p,
        alpha,
        seed,
        encoding,
        ..ExplainerConfig::default()
    };
    let s = &graphs.samples[graphs.week(week)?];
    let predictor = ClgtPredictor {
        model: &model.inner,
        input: &s.input,
    };
    let graph = run_explain(&predictor, &s.input.node_features, &config).map_err(err)?;
    let roster = &course.data.roster;
    Ok(Explanation {
        graph,
        labels: roster.students.iter().map(|(s, _)| s.0.clone()).collect(),
        groups: (0..roster.len())
            .map(|i| roster.team_index(roster.team_of(i)).unwrap_or(0))
            .collect(),
    })
}

#[pymodule]
fn pyclgt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ClgtError", m.py().get_type::<ClgtError>())?;
    m.add_class::<Course>()?;
    m.add_class::<Graphs>()?;
    m.add_class::<Model>()?;
    m.add_class::<Explanation>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_influences, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    Ok(())
}
