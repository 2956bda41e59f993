//! Weekly interaction graphs, interaction matrices and node features.
//!
//! A commit by student `s` influences every teammate of `s`; an issue raised
//! by `s` against team `T` influences every member of `T`. Influences are
//! shares of a normalization pool: the raw amount (lines or severity) summed
//! per source unit, divided by the pool total.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CommitRecord, FileKind, IssueRecord, Roster, StudentId, TeamId};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("cannot normalize an empty sequence")]
    EmptyInput,
    #[error("value at position {index} is not positive: {value}")]
    NonPositiveValue { index: usize, value: f64 },
    #[error("unknown student `{0}`")]
    UnknownStudent(String),
    #[error("unknown team `{0}`")]
    UnknownTeam(String),
    #[error("record for week {found} passed to the builder for week {expected}")]
    MixedWeeks { expected: u32, found: u32 },
    #[error("{kind:?} influences have {distinct} distinct nonzero values; need at least 3")]
    InsufficientData { kind: EdgeKind, distinct: usize },
    #[error("thresholds for {kind:?} are not monotone: ({t1}, {t2})")]
    BadThresholds { kind: EdgeKind, t1: f64, t2: f64 },
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Addition,
    Deletion,
    Issue,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 3] = [EdgeKind::Addition, EdgeKind::Deletion, EdgeKind::Issue];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeKind::Addition => "addition",
            EdgeKind::Deletion => "deletion",
            EdgeKind::Issue => "issue",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Minor = 1,
    Moderate = 2,
    Severe = 3,
}

impl Level {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Level> {
        match code {
            1 => Some(Level::Minor),
            2 => Some(Level::Moderate),
            3 => Some(Level::Severe),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEdge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
    pub influence: f64,
    /// Unset until thresholds have been applied.
    pub level: Option<Level>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vertex {
    pub index: usize,
    pub student_id: StudentId,
    pub team_id: TeamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyInteractionGraph {
    pub week: u32,
    pub vertices: Vec<Vertex>,
    pub edges: Vec<InteractionEdge>,
}

impl WeeklyInteractionGraph {
    pub fn empty(week: u32, roster: &Roster) -> Self {
        WeeklyInteractionGraph {
            week,
            vertices: vertices_of(roster),
            edges: Vec::new(),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// Sum of outgoing influence per vertex across all kinds.
    pub fn outgoing_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.vertices.len()];
        for e in &self.edges {
            mass[e.src] += e.influence;
        }
        mass
    }
}

pub fn vertices_of(roster: &Roster) -> Vec<Vertex> {
    roster
        .students
        .iter()
        .enumerate()
        .map(|(index, (sid, tid))| Vertex {
            index,
            student_id: sid.clone(),
            team_id: tid.clone(),
        })
        .collect()
}

/// Pool over which commit (addition/deletion) amounts are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CommitScope {
    /// One pool per team per week.
    #[default]
    TeamWeek,
    /// One pool per week across all teams.
    Week,
}

/// Pool over which issue severities are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IssueScope {
    /// One pool per week across all teams.
    #[default]
    Week,
    /// One pool per target team per week.
    TargetTeam,
    /// One pool per issuing team per week.
    AuthorTeam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ScopeConfig {
    #[serde(default)]
    pub commit_scope: CommitScope,
    #[serde(default)]
    pub issue_scope: IssueScope,
}

/// `value_i / Σ values`, in input order.
pub fn normalize_influences(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(GraphError::EmptyInput);
    }
    if let Some((index, &value)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v > 0.0))
    {
        return Err(GraphError::NonPositiveValue { index, value });
    }
    let total: f64 = values.iter().sum();
    Ok(values.iter().map(|v| v / total).collect())
}

/// Identifies one normalization pool.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PoolKey {
    Week,
    Team(usize),
}

/// A normalized pool: every source unit with its share. Units are source
/// students for commits and `(source, target team)` pairs for issues.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluencePool {
    pub kind: EdgeKind,
    pub key: PoolKey,
    pub shares: Vec<((usize, usize), f64)>,
}

#[derive(Default)]
struct PoolAccumulator {
    // (kind, pool) -> (unit -> raw amount), ordered for determinism
    pools: BTreeMap<(EdgeKind, PoolKey), BTreeMap<(usize, usize), f64>>,
}

impl PoolAccumulator {
    fn add(&mut self, kind: EdgeKind, key: PoolKey, unit: (usize, usize), amount: f64) {
        if amount > 0.0 {
            *self
                .pools
                .entry((kind, key))
                .or_default()
                .entry(unit)
                .or_insert(0.0) += amount;
        }
    }

    fn finish(self) -> Result<Vec<InfluencePool>> {
        let mut out = Vec::with_capacity(self.pools.len());
        for ((kind, key), units) in self.pools {
            let raw: Vec<f64> = units.values().copied().collect();
            let shares = normalize_influences(&raw)?;
            out.push(InfluencePool {
                kind,
                key,
                shares: units.keys().copied().zip(shares).collect(),
            });
        }
        Ok(out)
    }
}

fn check_week<'a>(week: u32, found: impl Iterator<Item = u32> + 'a) -> Result<()> {
    for w in found {
        if w != week {
            return Err(GraphError::MixedWeeks {
                expected: week,
                found: w,
            });
        }
    }
    Ok(())
}

/// Compute the normalization pools for one week.
pub fn influence_pools(
    week: u32,
    commits: &[CommitRecord],
    issues: &[IssueRecord],
    roster: &Roster,
    scope: &ScopeConfig,
) -> Result<Vec<InfluencePool>> {
    check_week(week, commits.iter().map(|c| c.week))?;
    check_week(week, issues.iter().map(|i| i.week))?;
    let student = |id: &StudentId| {
        roster
            .student_index(id)
            .ok_or_else(|| GraphError::UnknownStudent(id.0.clone()))
    };
    let team = |id: &TeamId| {
        roster
            .team_index(id)
            .ok_or_else(|| GraphError::UnknownTeam(id.0.clone()))
    };

    let mut acc = PoolAccumulator::default();
    for c in commits {
        let s = student(&c.student_id)?;
        let t = team(roster.team_of(s))?;
        let key = match scope.commit_scope {
            CommitScope::TeamWeek => PoolKey::Team(t),
            CommitScope::Week => PoolKey::Week,
        };
        acc.add(EdgeKind::Addition, key.clone(), (s, t), c.lines_added as f64);
        acc.add(EdgeKind::Deletion, key, (s, t), c.lines_deleted as f64);
    }
    for i in issues {
        let s = student(&i.author_id)?;
        let target = team(&i.target_team)?;
        let key = match scope.issue_scope {
            IssueScope::Week => PoolKey::Week,
            IssueScope::TargetTeam => PoolKey::Team(target),
            IssueScope::AuthorTeam => PoolKey::Team(team(roster.team_of(s))?),
        };
        acc.add(EdgeKind::Issue, key, (s, target), i.severity);
    }
    acc.finish()
}

/// Build one week's interaction graph. Edge levels are left unset; see
/// [`assign_levels`].
pub fn build_weekly_graph(
    week: u32,
    commits: &[CommitRecord],
    issues: &[IssueRecord],
    roster: &Roster,
    scope: &ScopeConfig,
) -> Result<WeeklyInteractionGraph> {
    let pools = influence_pools(week, commits, issues, roster, scope)?;
    let mut edges: BTreeMap<(usize, usize, EdgeKind), f64> = BTreeMap::new();
    for pool in &pools {
        for &((src, team), share) in &pool.shares {
            for dst in roster.members(&roster.teams[team]) {
                if dst != src {
                    *edges.entry((src, dst, pool.kind)).or_insert(0.0) += share;
                }
            }
        }
    }
    let mut graph = WeeklyInteractionGraph::empty(week, roster);
    graph.edges = edges
        .into_iter()
        .map(|((src, dst, kind), influence)| InteractionEdge {
            src,
            dst,
            kind,
            influence,
            level: None,
        })
        .collect();
    Ok(graph)
}

/// Tercile cut points per edge kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelThresholds {
    pub addition: (f64, f64),
    pub deletion: (f64, f64),
    pub issue: (f64, f64),
}

impl LevelThresholds {
    pub fn uniform(t1: f64, t2: f64) -> Self {
        LevelThresholds {
            addition: (t1, t2),
            deletion: (t1, t2),
            issue: (t1, t2),
        }
    }

    pub fn for_kind(&self, kind: EdgeKind) -> (f64, f64) {
        match kind {
            EdgeKind::Addition => self.addition,
            EdgeKind::Deletion => self.deletion,
            EdgeKind::Issue => self.issue,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in EdgeKind::ALL {
            let (t1, t2) = self.for_kind(kind);
            if !(t1 > 0.0 && t1 <= t2 && t2.is_finite()) {
                return Err(GraphError::BadThresholds { kind, t1, t2 });
            }
        }
        Ok(())
    }

    /// `v ≤ t1` is minor, `v ≤ t2` moderate, otherwise severe. When the cuts
    /// coincide, a value equal to the cut is moderate.
    pub fn classify(&self, kind: EdgeKind, value: f64) -> Level {
        let (t1, t2) = self.for_kind(kind);
        if t1 == t2 {
            return if value < t1 {
                Level::Minor
            } else if value == t1 {
                Level::Moderate
            } else {
                Level::Severe
            };
        }
        if value <= t1 {
            Level::Minor
        } else if value <= t2 {
            Level::Moderate
        } else {
            Level::Severe
        }
    }
}

/// Nearest-rank quantile of sorted data: the element at rank `⌈n·num/den⌉`.
fn nearest_rank(sorted: &[f64], num: usize, den: usize) -> f64 {
    let n = sorted.len();
    let rank = (n * num).div_ceil(den).max(1);
    sorted[rank - 1]
}

/// Empirical 1/3 and 2/3 quantiles (nearest rank) of the nonzero influences of
/// each kind across the given graphs.
pub fn compute_thresholds<'a>(
    graphs: impl IntoIterator<Item = &'a WeeklyInteractionGraph>,
) -> Result<LevelThresholds> {
    let mut values: [Vec<f64>; 3] = Default::default();
    for g in graphs {
        for e in &g.edges {
            if e.influence > 0.0 {
                values[e.kind.index()].push(e.influence);
            }
        }
    }
    let mut cuts = [(0.0, 0.0); 3];
    for kind in EdgeKind::ALL {
        let v = &mut values[kind.index()];
        v.sort_by(f64::total_cmp);
        let mut distinct = v.clone();
        distinct.dedup();
        cuts[kind.index()] = match distinct.len() {
            1 => (distinct[0], distinct[0]),
            d if d >= 3 => (nearest_rank(v, 1, 3), nearest_rank(v, 2, 3)),
            d => return Err(GraphError::InsufficientData { kind, distinct: d }),
        };
    }
    Ok(LevelThresholds {
        addition: cuts[0],
        deletion: cuts[1],
        issue: cuts[2],
    })
}

pub fn assign_levels(graph: &mut WeeklyInteractionGraph, thresholds: &LevelThresholds) {
    for e in &mut graph.edges {
        e.level = Some(thresholds.classify(e.kind, e.influence));
    }
}

/// The three n×n interaction matrices of one week, with level codes
/// (0 absent, 1 minor, 2 moderate, 3 severe).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionMatrixSet {
    pub week: u32,
    pub addition: Vec<Vec<f64>>,
    pub deletion: Vec<Vec<f64>>,
    pub issue: Vec<Vec<f64>>,
    pub addition_levels: Vec<Vec<u8>>,
    pub deletion_levels: Vec<Vec<u8>>,
    pub issue_levels: Vec<Vec<u8>>,
}

impl InteractionMatrixSet {
    pub fn zeros(week: u32, n: usize) -> Self {
        let z = vec![vec![0.0; n]; n];
        let zl = vec![vec![0u8; n]; n];
        InteractionMatrixSet {
            week,
            addition: z.clone(),
            deletion: z.clone(),
            issue: z,
            addition_levels: zl.clone(),
            deletion_levels: zl.clone(),
            issue_levels: zl,
        }
    }

    pub fn dim(&self) -> usize {
        self.addition.len()
    }

    pub fn values(&self, kind: EdgeKind) -> &Vec<Vec<f64>> {
        match kind {
            EdgeKind::Addition => &self.addition,
            EdgeKind::Deletion => &self.deletion,
            EdgeKind::Issue => &self.issue,
        }
    }

    pub fn levels(&self, kind: EdgeKind) -> &Vec<Vec<u8>> {
        match kind {
            EdgeKind::Addition => &self.addition_levels,
            EdgeKind::Deletion => &self.deletion_levels,
            EdgeKind::Issue => &self.issue_levels,
        }
    }

    fn slot_mut(&mut self, kind: EdgeKind) -> (&mut Vec<Vec<f64>>, &mut Vec<Vec<u8>>) {
        match kind {
            EdgeKind::Addition => (&mut self.addition, &mut self.addition_levels),
            EdgeKind::Deletion => (&mut self.deletion, &mut self.deletion_levels),
            EdgeKind::Issue => (&mut self.issue, &mut self.issue_levels),
        }
    }

    /// Nonzero entries as edges, ordered by kind then row then column.
    pub fn to_edges(&self) -> Vec<InteractionEdge> {
        let mut out = Vec::new();
        for kind in EdgeKind::ALL {
            let (vals, lv) = (self.values(kind), self.levels(kind));
            for (i, row) in vals.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if v != 0.0 {
                        out.push(InteractionEdge {
                            src: i,
                            dst: j,
                            kind,
                            influence: v,
                            level: Level::from_code(lv[i][j]),
                        });
                    }
                }
            }
        }
        out
    }

    /// Sparse `(row, col, value, level)` triples for one kind.
    pub fn write_triples<W: Write>(&self, kind: EdgeKind, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| GraphError::Csv(e.to_string());
        wtr.write_record(["row", "col", "value", "level"]).map_err(err)?;
        let (vals, lv) = (self.values(kind), self.levels(kind));
        for (i, row) in vals.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    wtr.write_record([
                        i.to_string(),
                        j.to_string(),
                        v.to_string(),
                        lv[i][j].to_string(),
                    ])
                    .map_err(err)?;
                }
            }
        }
        wtr.flush().map_err(|e| GraphError::Csv(e.to_string()))
    }
}

pub fn to_matrices(graph: &WeeklyInteractionGraph, thresholds: &LevelThresholds) -> InteractionMatrixSet {
    let n = graph.num_vertices();
    let mut set = InteractionMatrixSet::zeros(graph.week, n);
    for e in &graph.edges {
        if e.src == e.dst {
            continue;
        }
        let level = thresholds.classify(e.kind, e.influence);
        let (vals, lv) = set.slot_mut(e.kind);
        vals[e.src][e.dst] = e.influence;
        lv[e.src][e.dst] = level.code();
    }
    set
}

/// Names of the per-student activity features, before the team one-hot.
pub const ACTIVITY_FEATURES: [&str; 8] = [
    "doc_lines_added",
    "doc_lines_deleted",
    "code_lines_added",
    "code_lines_deleted",
    "commit_count",
    "issues_raised",
    "mean_severity_raised",
    "issues_received",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatureTable {
    pub week: u32,
    /// Row-major n×F.
    pub features: Vec<Vec<f64>>,
    pub feature_names: Vec<String>,
}

impl NodeFeatureTable {
    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn write_csv<W: Write>(&self, vertices: &[Vertex], w: W) -> Result<()> {
        let err = |e: csv::Error| GraphError::Csv(e.to_string());
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["student_id".to_string()];
        header.extend(self.feature_names.iter().cloned());
        wtr.write_record(&header).map_err(err)?;
        for (v, row) in vertices.iter().zip(&self.features) {
            let mut rec = vec![v.student_id.0.clone()];
            rec.extend(row.iter().map(|x| x.to_string()));
            wtr.write_record(&rec).map_err(err)?;
        }
        wtr.flush().map_err(|e| GraphError::Csv(e.to_string()))
    }
}

/// Feature width for a roster: activity features plus team one-hot.
pub fn node_feature_dim(roster: &Roster) -> usize {
    ACTIVITY_FEATURES.len() + roster.teams.len()
}

/// Column-wise z-scores with population variance; zero-variance columns map
/// to 0.
pub fn z_normalize_columns(rows: &mut [Vec<f64>], columns: std::ops::Range<usize>) {
    let n = rows.len();
    if n == 0 {
        return;
    }
    for c in columns {
        let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for r in rows.iter_mut() {
            r[c] = if sd > 1e-12 { (r[c] - mean) / sd } else { 0.0 };
        }
    }
}

pub fn build_node_features(
    week: u32,
    commits: &[CommitRecord],
    issues: &[IssueRecord],
    roster: &Roster,
) -> Result<NodeFeatureTable> {
    check_week(week, commits.iter().map(|c| c.week))?;
    check_week(week, issues.iter().map(|i| i.week))?;
    let n = roster.len();
    let activity = ACTIVITY_FEATURES.len();
    let mut rows = vec![vec![0.0; node_feature_dim(roster)]; n];
    let student = |id: &StudentId| {
        roster
            .student_index(id)
            .ok_or_else(|| GraphError::UnknownStudent(id.0.clone()))
    };

    for c in commits {
        let r = &mut rows[student(&c.student_id)?];
        let base = match c.file_kind {
            FileKind::Doc => 0,
            FileKind::Code => 2,
        };
        r[base] += c.lines_added as f64;
        r[base + 1] += c.lines_deleted as f64;
        r[4] += 1.0;
    }
    let mut received: HashMap<&TeamId, f64> = HashMap::new();
    for i in issues {
        let r = &mut rows[student(&i.author_id)?];
        r[5] += 1.0;
        r[6] += i.severity;
        if roster.team_index(&i.target_team).is_none() {
            return Err(GraphError::UnknownTeam(i.target_team.0.clone()));
        }
        *received.entry(&i.target_team).or_insert(0.0) += 1.0;
    }
    for (s, r) in rows.iter_mut().enumerate() {
        if r[5] > 0.0 {
            r[6] /= r[5];
        }
        r[7] = received.get(roster.team_of(s)).copied().unwrap_or(0.0);
    }
    z_normalize_columns(&mut rows, 0..activity);
    for (s, r) in rows.iter_mut().enumerate() {
        let t = roster.team_index(roster.team_of(s)).expect("rostered team");
        r[activity + t] = 1.0;
    }

    let mut feature_names: Vec<String> = ACTIVITY_FEATURES.iter().map(|s| s.to_string()).collect();
    feature_names.extend(roster.teams.iter().map(|t| format!("team_{}", t.0)));
    Ok(NodeFeatureTable {
        week,
        features: rows,
        feature_names,
    })
}
