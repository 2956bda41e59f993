use std::path::{Path, PathBuf};

use clgt::explainer::{explain, ClgtPredictor, DotStyle, ExplanationGraph};
use clgt::graphgen::{vertices_of, EdgeKind, LevelThresholds};
use clgt::model::{Checkpoint, ClgtModel};
use clgt::pipeline::{activity_matrix, build_graphs, samples, weekly_graphs, BuiltGraphs, CourseData};
use clgt::synth::{generate, write_course, SynthConfig};
use clgt::train::{
    evaluate as evaluate_mask, full_mask, mask_count, predict_final, split_dataset, train_loop,
    write_history_csv, Mask, Sample, SplitMasks, TrainConfig, TrainError, TrainOutcome,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{RunConfig, SplitChoice};
use crate::error::{CliError, CliResult, EXIT_MISSING_CHECKPOINT};
use crate::output::{create, provenance, read_json, write_json, write_json_report, write_text, OutputDir};

const KINDS: [EdgeKind; 3] = [EdgeKind::Addition, EdgeKind::Deletion, EdgeKind::Issue];

fn load_course(config: &RunConfig) -> CliResult<CourseData> {
    let paths = config.validate_inputs()?;
    Ok(CourseData::load(&paths, config.data.weeks)?)
}

fn week_name(week: u32) -> String {
    format!("week_{week:02}")
}

pub fn build_graph(config: &RunConfig) -> CliResult<()> {
    config.validate()?;
    let data = load_course(config)?;
    let built = build_graphs(&data, &config.graph.scope, config.graph.thresholds)?;
    let out = OutputDir::claim(&config.paths.out)?;
    let graphs = out.subdir("graphs")?;
    let matrices = out.subdir("matrices")?;
    let features = out.subdir("features")?;
    let vertices = vertices_of(&data.roster);
    for w in &built.weeks {
        let name = week_name(w.graph.week);
        write_text(&graphs.join(format!("{name}.json")), &w.graph.to_json())?;
        for kind in KINDS {
            let path = matrices.join(format!("{name}_{}.csv", kind.as_str()));
            w.matrices.write_triples(kind, create(&path)?)?;
        }
        w.features
            .write_csv(&vertices, create(&features.join(format!("{name}.csv")))?)?;
    }
    write_json_report(&out.path("thresholds.json"), built.thresholds, config, "build-graph")?;
    println!(
        "{} weekly graphs, {} matrices -> {}",
        built.weeks.len(),
        built.matrix_count(),
        out.root.display()
    );
    Ok(())
}

/// Samples with positional encodings attached when the model uses them.
fn model_samples(data: &CourseData, built: &BuiltGraphs, pe_dim: usize) -> CliResult<Vec<Sample>> {
    let mut s = samples(data, built)?;
    if pe_dim > 0 {
        s = s
            .into_iter()
            .map(|mut x| {
                x.input = x.input.with_laplacian_pe(pe_dim);
                x
            })
            .collect();
    }
    Ok(s)
}

#[derive(Debug, Serialize)]
struct MetricsReport {
    checkpoint: PathBuf,
    splits: serde_json::Map<String, Value>,
    final_grades: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    training: Option<Value>,
}

fn split_metrics(model: &ClgtModel, samples: &[Sample], mask: &Mask) -> CliResult<Value> {
    let cells = mask_count(mask);
    if cells == 0 {
        return Ok(json!({ "cells": 0, "metrics": null }));
    }
    match evaluate_mask(model, samples, mask) {
        Ok(m) => Ok(json!({ "cells": cells, "metrics": m })),
        Err(TrainError::DegenerateClass(msg)) => Ok(json!({ "cells": cells, "metrics": null, "degenerate": msg })),
        Err(e) => Err(e.into()),
    }
}

fn final_grade_accuracy(model: &ClgtModel, samples: &[Sample], data: &CourseData) -> CliResult<Value> {
    let predicted = predict_final(model, samples)?;
    let mut correct = 0usize;
    let mut n = 0usize;
    for ((sid, _), p) in data.roster.students.iter().zip(&predicted) {
        if let (Some(truth), Some(p)) = (data.grades.final_grades.get(sid), p) {
            n += 1;
            correct += usize::from(truth.index() == *p);
        }
    }
    let acc = if n > 0 { Some(correct as f64 / n as f64) } else { None };
    Ok(json!({ "n": n, "acc": acc }))
}

fn metrics_report(
    model: &ClgtModel,
    samples: &[Sample],
    masks: &SplitMasks,
    choice: SplitChoice,
    data: &CourseData,
    checkpoint: &Path,
) -> CliResult<MetricsReport> {
    let mut splits = serde_json::Map::new();
    let all = full_mask(samples);
    let chosen: Vec<(&str, &Mask)> = match choice {
        SplitChoice::Train => vec![("train", &masks.train)],
        SplitChoice::Val => vec![("val", &masks.val)],
        SplitChoice::Test => vec![("test", &masks.test)],
        SplitChoice::All => vec![
            ("train", &masks.train),
            ("val", &masks.val),
            ("test", &masks.test),
            ("all", &all),
        ],
    };
    for (name, mask) in chosen {
        splits.insert(name.to_string(), split_metrics(model, samples, mask)?);
    }
    Ok(MetricsReport {
        checkpoint: checkpoint.to_path_buf(),
        splits,
        final_grades: final_grade_accuracy(model, samples, data)?,
        training: None,
    })
}

/// What `train` stores next to the parameters so later commands rebuild
/// identical inputs and splits.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointExtra {
    thresholds: LevelThresholds,
    train: TrainConfig,
    weeks: u32,
}

pub fn train(config: &RunConfig) -> CliResult<()> {
    config.validate()?;
    let data = load_course(config)?;
    let built = build_graphs(&data, &config.graph.scope, config.graph.thresholds)?;
    let samples = model_samples(&data, &built, config.model.laplacian_pe_dim)?;
    let mut model_config = config.model.clone();
    model_config.node_in_dim = built.weeks[0].features.num_features();
    let model = ClgtModel::init(model_config, config.seed)?;
    let masks = split_dataset(&samples, config.train.split, config.train.seed)?;
    let out = OutputDir::claim(&config.paths.out)?;
    let TrainOutcome {
        model,
        history,
        best_epoch,
        stop,
        final_lr,
    } = train_loop(model, &samples, &masks, &config.train)?;

    let ck_path = config.paths.checkpoint();
    let mut ck = model.to_checkpoint();
    let extra = CheckpointExtra {
        thresholds: built.thresholds,
        train: config.train.clone(),
        weeks: config.data.weeks,
    };
    ck.extra = json!({
        "run": extra,
        "provenance": provenance(config),
        "metadata": crate::output::metadata("train"),
    });
    ck.save(&ck_path)?;
    write_history_csv(&history, out.path("history.csv"))?;

    let mut report = metrics_report(&model, &samples, &masks, SplitChoice::All, &data, &ck_path)?;
    report.training = Some(json!({
        "epochs": history.len(),
        "best_epoch": best_epoch,
        "stop": stop,
        "final_lr": final_lr,
        "param_count": model.param_count(),
    }));
    write_json_report(&out.path("metrics.json"), &report, config, "train")?;
    let acc = |name: &str| {
        report.splits[name]["metrics"]["acc"]
            .as_f64()
            .map_or("n/a".to_string(), |a| format!("{a:.4}"))
    };
    println!(
        "{} epochs (best {}), train acc {}, test acc {} -> {}",
        history.len(),
        best_epoch.map_or("-".to_string(), |e| e.to_string()),
        acc("train"),
        acc("test"),
        out.root.display()
    );
    Ok(())
}

struct Loaded {
    model: ClgtModel,
    extra: Option<CheckpointExtra>,
    path: PathBuf,
}

fn load_checkpoint(config: &RunConfig) -> CliResult<Loaded> {
    let path = config.paths.checkpoint();
    if !path.is_file() {
        return Err(CliError::new(
            EXIT_MISSING_CHECKPOINT,
            anyhow::anyhow!("checkpoint not found: {} (run `clgt train` first)", path.display()),
        ));
    }
    let ck = Checkpoint::load(&path).map_err(|e| CliError::from(e).context(path.display()))?;
    let extra = serde_json::from_value(ck.extra["run"].clone()).ok();
    let model = ClgtModel::from_checkpoint(&ck).map_err(|e| CliError::from(e).context(path.display()))?;
    Ok(Loaded { model, extra, path })
}

/// Course data, graphs and samples rebuilt the way the checkpoint saw them.
fn checkpoint_inputs(config: &RunConfig, loaded: &Loaded) -> CliResult<(CourseData, Vec<Sample>)> {
    let data = load_course(config)?;
    let thresholds = loaded.extra.as_ref().map(|e| e.thresholds).or(config.graph.thresholds);
    let built = build_graphs(&data, &config.graph.scope, thresholds)?;
    let mc = loaded.model.config();
    let samples = model_samples(&data, &built, mc.laplacian_pe_dim)?;
    let width = built.weeks[0].features.num_features();
    if width != mc.node_in_dim {
        return Err(CliError::invalid(format!(
            "data has {width} node features but the checkpoint expects {}",
            mc.node_in_dim
        )));
    }
    Ok((data, samples))
}

pub fn evaluate(config: &RunConfig, split: SplitChoice) -> CliResult<()> {
    config.validate()?;
    let loaded = load_checkpoint(config)?;
    let (data, samples) = checkpoint_inputs(config, &loaded)?;
    let train_cfg = loaded.extra.as_ref().map_or(&config.train, |e| &e.train);
    let masks = split_dataset(&samples, train_cfg.split, train_cfg.seed)?;
    let out = OutputDir::claim(&config.paths.out)?;
    let report = metrics_report(&loaded.model, &samples, &masks, split, &data, &loaded.path)?;
    write_json_report(&out.path("metrics.json"), &report, config, "evaluate")?;
    for (name, v) in &report.splits {
        let m = &v["metrics"];
        match (m["acc"].as_f64(), m["f1_macro"].as_f64(), m["auc_macro_ovr"].as_f64()) {
            (Some(a), Some(f), Some(u)) => println!("{name}: acc {a:.4}  f1 {f:.4}  auc {u:.4}"),
            _ => println!("{name}: n/a"),
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VertexInfo {
    pub index: usize,
    pub student_id: String,
    pub team_id: String,
    pub team: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExplanationFile {
    pub week: u32,
    pub vertices: Vec<VertexInfo>,
    pub explanation: ExplanationGraph,
}

fn vertex_info(data: &CourseData) -> Vec<VertexInfo> {
    data.roster
        .students
        .iter()
        .enumerate()
        .map(|(index, (sid, tid))| VertexInfo {
            index,
            student_id: sid.0.clone(),
            team_id: tid.0.clone(),
            team: data.roster.team_index(tid).unwrap_or(0),
        })
        .collect()
}

fn influence_dot(file: &ExplanationFile, header: &str) -> String {
    let labels: Vec<String> = file.vertices.iter().map(|v| v.student_id.clone()).collect();
    let groups: Vec<usize> = file.vertices.iter().map(|v| v.team).collect();
    let style = DotStyle {
        labels: (labels.len() == file.explanation.num_vertices).then_some(&labels[..]),
        groups: (groups.len() == file.explanation.num_vertices).then_some(&groups[..]),
        show_isolated: true,
    };
    format!("{header}{}", file.explanation.to_dot(&style))
}

fn dot_header(config: &RunConfig) -> String {
    format!("// config {} seed {}\n", config.hash(), config.seed)
}

pub fn explain_cmd(config: &RunConfig) -> CliResult<()> {
    config.validate()?;
    let loaded = load_checkpoint(config)?;
    let (data, samples) = checkpoint_inputs(config, &loaded)?;
    let week = config.explain.week.unwrap_or(config.data.weeks);
    let sample = samples
        .iter()
        .find(|s| s.week == week)
        .ok_or_else(|| CliError::invalid(format!("no graph for week {week}")))?;
    let out = OutputDir::claim(&config.paths.out)?;
    let predictor = ClgtPredictor {
        model: &loaded.model,
        input: &sample.input,
    };
    let explanation = explain(&predictor, &sample.input.node_features, &config.explain.explainer)?;
    let file = ExplanationFile {
        week,
        vertices: vertex_info(&data),
        explanation,
    };
    write_json_report(&out.path("explanation.json"), &file, config, "explain")?;
    write_text(&out.path("influence.dot"), &influence_dot(&file, &dot_header(config)))?;
    println!(
        "week {week}: {} vertices, {} influence edges -> {}",
        file.explanation.num_vertices,
        file.explanation.edges.len(),
        out.root.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VizKind {
    Influence,
    Activity,
}

fn read_explanation(path: &Path) -> CliResult<ExplanationFile> {
    let value = read_json(path)?;
    let parsed = if value.get("explanation").is_some() {
        serde_json::from_value::<ExplanationFile>(value)
    } else {
        serde_json::from_value::<ExplanationGraph>(value).map(|explanation| ExplanationFile {
            week: 0,
            vertices: Vec::new(),
            explanation,
        })
    };
    let file = parsed.map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
    let g = &file.explanation;
    if let Some(e) = g.edges.iter().find(|e| e.src >= g.num_vertices || e.dst >= g.num_vertices) {
        return Err(CliError::parse(format!(
            "{}: edge {} -> {} outside {} vertices",
            path.display(),
            e.src,
            e.dst,
            g.num_vertices
        )));
    }
    Ok(file)
}

pub fn export_viz(config: &RunConfig, what: VizKind, input: Option<&Path>) -> CliResult<()> {
    match what {
        VizKind::Influence => {
            let path = input.map_or_else(|| config.paths.out.join("explanation.json"), Path::to_path_buf);
            let file = read_explanation(&path)?;
            let out = OutputDir::claim(&config.paths.out)?;
            write_text(&out.path("influence.dot"), &influence_dot(&file, &dot_header(config)))?;
            println!("{} edges -> {}", file.explanation.edges.len(), out.path("influence.dot").display());
        }
        VizKind::Activity => {
            if config.data.weeks == 0 {
                return Err(CliError::invalid("data.weeks must be at least 1"));
            }
            let data = load_course(config)?;
            let graphs = weekly_graphs(&data, &config.graph.scope)?;
            let matrix = activity_matrix(&graphs, &data.roster);
            let out = OutputDir::claim(&config.paths.out)?;
            let path = out.path("activity.csv");
            matrix
                .write_csv(create(&path)?)
                .map_err(|e| CliError::failure(format!("{}: {e}", path.display())))?;
            let (r, c) = matrix.shape();
            println!("{r}x{c} activity matrix -> {}", path.display());
        }
    }
    Ok(())
}

/// Writes a synthetic course and a config pointing at it.
pub fn synth(config: &RunConfig) -> CliResult<()> {
    let synth = SynthConfig {
        seed: config.seed,
        weeks: config.data.weeks,
        ..SynthConfig::default()
    };
    let data = generate(&synth)?;
    let out = OutputDir::claim(&config.paths.out)?;
    write_course(&data, &out.root)?;
    let mut run = RunConfig::default();
    run.paths.data_dir = PathBuf::from(".");
    run.paths.out = PathBuf::from("run");
    run.data.weeks = synth.weeks;
    run.seed = config.seed;
    write_text(&out.path("clgt.toml"), &run.to_toml())?;
    write_json(&out.path("synth.json"), &synth)?;
    println!(
        "{} students, {} commits, {} issues -> {}",
        data.roster.len(),
        data.commits.len(),
        data.issues.len(),
        out.root.display()
    );
    Ok(())
}
