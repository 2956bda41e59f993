//! From course exports to model-ready samples and visualization data.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphgen::{
    assign_levels, build_node_features, build_weekly_graph, compute_thresholds, to_matrices, GraphError,
    InteractionMatrixSet, LevelThresholds, NodeFeatureTable, ScopeConfig, WeeklyInteractionGraph,
};
use crate::ingest::{
    parse_commits, parse_grades, parse_issues, parse_roster, section_by_week, CommitRecord, GradeTable,
    IngestError, IssueRecord, ParseContext, Roster,
};
use crate::model::{GraphInput, ModelError};
use crate::train::Sample;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub commits: PathBuf,
    pub issues: PathBuf,
    pub grades: PathBuf,
    pub roster: PathBuf,
}

impl DataPaths {
    /// `commits.csv`, `issues.csv`, `grades.csv` and `roster.csv` in `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        DataPaths {
            commits: d.join("commits.csv"),
            issues: d.join("issues.csv"),
            grades: d.join("grades.csv"),
            roster: d.join("roster.csv"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.commits, &self.issues, &self.grades, &self.roster]
    }
}

/// Parsed, validated course exports.
#[derive(Debug, Clone)]
pub struct CourseData {
    pub roster: Roster,
    pub commits: Vec<CommitRecord>,
    pub issues: Vec<IssueRecord>,
    pub grades: GradeTable,
    pub num_weeks: u32,
}

impl CourseData {
    pub fn load(paths: &DataPaths, num_weeks: u32) -> Result<Self> {
        let roster = parse_roster(&paths.roster)?;
        let ctx = ParseContext {
            roster: Some(&roster),
            num_weeks,
        };
        let commits = parse_commits(&paths.commits, &ctx)?;
        let issues = parse_issues(&paths.issues, &ctx)?;
        let grades = parse_grades(&paths.grades, &ctx)?;
        grades.validate_complete(&roster)?;
        Ok(CourseData {
            roster,
            commits,
            issues,
            grades,
            num_weeks,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeekArtifacts {
    pub graph: WeeklyInteractionGraph,
    pub matrices: InteractionMatrixSet,
    pub features: NodeFeatureTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltGraphs {
    pub thresholds: LevelThresholds,
    pub weeks: Vec<WeekArtifacts>,
}

impl BuiltGraphs {
    pub fn matrix_count(&self) -> usize {
        3 * self.weeks.len()
    }
}

/// Unlevelled graphs for weeks `1..=num_weeks`.
pub fn weekly_graphs(data: &CourseData, scope: &ScopeConfig) -> Result<Vec<WeeklyInteractionGraph>> {
    let commits = section_by_week(&data.commits, data.num_weeks)?;
    let issues = section_by_week(&data.issues, data.num_weeks)?;
    let weeks: Vec<u32> = (1..=data.num_weeks).collect();
    weeks
        .par_iter()
        .map(|w| {
            let c = commits.get(w).map_or(&[][..], Vec::as_slice);
            let i = issues.get(w).map_or(&[][..], Vec::as_slice);
            Ok(build_weekly_graph(*w, c, i, &data.roster, scope)?)
        })
        .collect()
}

/// Graphs, level-annotated matrices and node features for weeks
/// `1..=num_weeks`, including weeks without activity. Thresholds are
/// computed from all weeks unless given.
pub fn build_graphs(
    data: &CourseData,
    scope: &ScopeConfig,
    thresholds: Option<LevelThresholds>,
) -> Result<BuiltGraphs> {
    let commits = section_by_week(&data.commits, data.num_weeks)?;
    let issues = section_by_week(&data.issues, data.num_weeks)?;
    let weeks: Vec<u32> = (1..=data.num_weeks).collect();
    let raw: Vec<(WeeklyInteractionGraph, NodeFeatureTable)> = weeks
        .par_iter()
        .map(|w| {
            let c = commits.get(w).map_or(&[][..], Vec::as_slice);
            let i = issues.get(w).map_or(&[][..], Vec::as_slice);
            let g = build_weekly_graph(*w, c, i, &data.roster, scope)?;
            let f = build_node_features(*w, c, i, &data.roster)?;
            Ok((g, f))
        })
        .collect::<Result<_>>()?;
    let thresholds = match thresholds {
        Some(t) => {
            t.validate()?;
            t
        }
        None => compute_thresholds(raw.iter().map(|(g, _)| g))?,
    };
    let weeks = raw
        .into_iter()
        .map(|(mut graph, features)| {
            assign_levels(&mut graph, &thresholds);
            let matrices = to_matrices(&graph, &thresholds);
            WeekArtifacts {
                graph,
                matrices,
                features,
            }
        })
        .collect();
    Ok(BuiltGraphs { thresholds, weeks })
}

/// One training sample per week, labeled with that week's grades.
pub fn samples(data: &CourseData, built: &BuiltGraphs) -> Result<Vec<Sample>> {
    let teams: Vec<usize> = (0..data.roster.len())
        .map(|s| data.roster.team_index(data.roster.team_of(s)).unwrap_or(0))
        .collect();
    built
        .weeks
        .iter()
        .map(|w| {
            let input = GraphInput::from_graph(&w.graph, &w.features)?;
            let labels = data
                .roster
                .students
                .iter()
                .map(|(sid, _)| data.grades.weekly_grade(sid, w.graph.week).map(|g| g.index()))
                .collect();
            Ok(Sample {
                week: w.graph.week,
                input,
                labels,
                teams: teams.clone(),
            })
        })
        .collect()
}

/// Student × week activity: the outgoing influence mass of each student in
/// each weekly graph. Rows are grouped by team.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityMatrix {
    pub student_ids: Vec<String>,
    pub team_ids: Vec<String>,
    pub weeks: Vec<u32>,
    pub values: Vec<Vec<f64>>,
}

pub fn activity_matrix(graphs: &[WeeklyInteractionGraph], roster: &Roster) -> ActivityMatrix {
    let order = roster.team_ordered();
    let mass: Vec<Vec<f64>> = graphs.iter().map(WeeklyInteractionGraph::outgoing_mass).collect();
    ActivityMatrix {
        student_ids: order.iter().map(|s| roster.students[*s].0 .0.clone()).collect(),
        team_ids: order.iter().map(|s| roster.students[*s].1 .0.clone()).collect(),
        weeks: graphs.iter().map(|g| g.week).collect(),
        values: order
            .iter()
            .map(|s| mass.iter().map(|m| m.get(*s).copied().unwrap_or(0.0)).collect())
            .collect(),
    }
}

impl ActivityMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.values.len(), self.weeks.len())
    }

    /// Header `student_id,team_id,week_01,...`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::result::Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["student_id".to_string(), "team_id".to_string()];
        header.extend(self.weeks.iter().map(|w| format!("week_{w:02}")));
        wtr.write_record(&header)?;
        for ((sid, tid), row) in self.student_ids.iter().zip(&self.team_ids).zip(&self.values) {
            let mut rec = vec![sid.clone(), tid.clone()];
            rec.extend(row.iter().map(|x| x.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
