//! Activity-log ingestion.
//!
//! Four canonical CSV exports feed the pipeline:
//!
//! | file          | header                                                            |
//! |---------------|-------------------------------------------------------------------|
//! | `commits.csv` | `student_id,team_id,week,timestamp,file_kind,lines_added,lines_deleted` |
//! | `issues.csv`  | `author_id,author_team,target_team,week,timestamp,severity`       |
//! | `grades.csv`  | `student_id,week,grade` (week is `1..=W` or `final`)              |
//! | `roster.csv`  | `student_id,team_id`                                              |
//!
//! Row numbers in errors are 1-based data rows (the header is row 0).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of weeks in the reference course.
pub const DEFAULT_WEEKS: u32 = 16;

pub const COMMIT_COLUMNS: [&str; 7] = [
    "student_id",
    "team_id",
    "week",
    "timestamp",
    "file_kind",
    "lines_added",
    "lines_deleted",
];
pub const ISSUE_COLUMNS: [&str; 6] = [
    "author_id",
    "author_team",
    "target_team",
    "week",
    "timestamp",
    "severity",
];
pub const GRADE_COLUMNS: [&str; 3] = ["student_id", "week", "grade"];
pub const ROSTER_COLUMNS: [&str; 2] = ["student_id", "team_id"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV at row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("missing column `{column}` in header")]
    MissingColumn { column: String },
    #[error("row {row}: bad value `{value}` for `{column}`")]
    BadEnumValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: bad number `{value}` for `{column}`")]
    BadNumber {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: line counts must be non-negative with a positive total")]
    NegativeLineCount { row: usize },
    #[error("row {row}: severity must be positive, got {value}")]
    NonPositiveSeverity { row: usize, value: f64 },
    #[error("row {row}: issue author team and target team are both `{team}`")]
    SameTeamIssue { row: usize, team: String },
    #[error("row {row}: unknown student `{student}`")]
    UnknownStudent { row: usize, student: String },
    #[error("row {row}: unknown team `{team}`")]
    UnknownTeam { row: usize, team: String },
    #[error("row {row}: student `{student}` is not in team `{team}`")]
    TeamMismatch {
        row: usize,
        student: String,
        team: String,
    },
    #[error("row {row}: week {week} outside 1..={max_week}")]
    WeekOutOfRange { row: usize, week: u32, max_week: u32 },
    #[error("row {row}: bad grade `{value}`")]
    BadGrade { row: usize, value: String },
    #[error("row {row}: duplicate grade for `{student}` in week {week}")]
    DuplicateCell {
        row: usize,
        student: String,
        week: String,
    },
    #[error("missing grade for `{student}` in week {week}")]
    MissingGrade { student: String, week: String },
    #[error("row {row}: duplicate student `{student}` in roster")]
    DuplicateStudent { row: usize, student: String },
    #[error("roster is empty")]
    EmptyRoster,
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StudentId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TeamId(pub String);

impl fmt::Display for StudentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for TeamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StudentId {
    fn from(s: &str) -> Self {
        StudentId(s.to_string())
    }
}

impl From<&str> for TeamId {
    fn from(s: &str) -> Self {
        TeamId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Doc,
    Code,
}

impl FileKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FileKind::Doc => "doc",
            FileKind::Code => "code",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    A,
    B,
    C,
}

impl Grade {
    pub const ALL: [Grade; 3] = [Grade::A, Grade::B, Grade::C];

    /// Class index used by the classifier (A→0, B→1, C→2).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Grade> {
        Grade::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::A => "A",
            Grade::B => "B",
            Grade::C => "C",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub student_id: StudentId,
    pub team_id: TeamId,
    pub week: u32,
    pub timestamp: String,
    pub file_kind: FileKind,
    pub lines_added: u64,
    pub lines_deleted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueRecord {
    pub author_id: StudentId,
    pub author_team: TeamId,
    pub target_team: TeamId,
    pub week: u32,
    pub timestamp: String,
    pub severity: f64,
}

/// Anything that belongs to one course week.
pub trait Weekly {
    fn week(&self) -> u32;
}

impl Weekly for CommitRecord {
    fn week(&self) -> u32 {
        self.week
    }
}

impl Weekly for IssueRecord {
    fn week(&self) -> u32 {
        self.week
    }
}

/// Enrolled students and their teams. Student order is the vertex order of
/// every weekly graph; team order is first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Roster {
    pub students: Vec<(StudentId, TeamId)>,
    pub teams: Vec<TeamId>,
    index: HashMap<StudentId, usize>,
}

impl Roster {
    pub fn new(students: Vec<(StudentId, TeamId)>) -> Result<Self> {
        if students.is_empty() {
            return Err(IngestError::EmptyRoster);
        }
        let mut index = HashMap::with_capacity(students.len());
        let mut teams: Vec<TeamId> = Vec::new();
        for (row, (sid, tid)) in students.iter().enumerate() {
            if index.insert(sid.clone(), row).is_some() {
                return Err(IngestError::DuplicateStudent {
                    row: row + 1,
                    student: sid.0.clone(),
                });
            }
            if !teams.contains(tid) {
                teams.push(tid.clone());
            }
        }
        Ok(Roster {
            students,
            teams,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.students.len()
    }

    pub fn is_empty(&self) -> bool {
        self.students.is_empty()
    }

    pub fn student_index(&self, id: &StudentId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn team_of(&self, student: usize) -> &TeamId {
        &self.students[student].1
    }

    pub fn team_index(&self, team: &TeamId) -> Option<usize> {
        self.teams.iter().position(|t| t == team)
    }

    pub fn members(&self, team: &TeamId) -> impl Iterator<Item = usize> + '_ {
        let team = team.clone();
        self.students
            .iter()
            .enumerate()
            .filter(move |(_, (_, t))| *t == team)
            .map(|(i, _)| i)
    }

    /// Vertex indices ordered so that teams are contiguous, teams in roster
    /// order and members in roster order within a team.
    pub fn team_ordered(&self) -> Vec<usize> {
        self.teams.iter().flat_map(|t| self.members(t)).collect()
    }
}

/// Where a grade applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GradeWeek {
    Week(u32),
    Final,
}

impl fmt::Display for GradeWeek {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradeWeek::Week(w) => write!(f, "{w}"),
            GradeWeek::Final => f.write_str("final"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradeTable {
    pub weekly: BTreeMap<(StudentId, u32), Grade>,
    pub final_grades: BTreeMap<StudentId, Grade>,
}

impl GradeTable {
    pub fn weekly_grade(&self, student: &StudentId, week: u32) -> Option<Grade> {
        self.weekly.get(&(student.clone(), week)).copied()
    }

    pub fn final_grade(&self, student: &StudentId) -> Option<Grade> {
        self.final_grades.get(student).copied()
    }

    pub fn max_week(&self) -> u32 {
        self.weekly.keys().map(|(_, w)| *w).max().unwrap_or(0)
    }

    pub fn cell_count(&self) -> usize {
        self.weekly.len() + self.final_grades.len()
    }

    /// Every rostered student must have a grade for every week up to the
    /// last graded week, and a final grade once any final grade exists.
    pub fn validate_complete(&self, roster: &Roster) -> Result<()> {
        let max_week = self.max_week();
        for (sid, _) in &roster.students {
            for week in 1..=max_week {
                if !self.weekly.contains_key(&(sid.clone(), week)) {
                    return Err(IngestError::MissingGrade {
                        student: sid.0.clone(),
                        week: week.to_string(),
                    });
                }
            }
            if !self.final_grades.is_empty() && !self.final_grades.contains_key(sid) {
                return Err(IngestError::MissingGrade {
                    student: sid.0.clone(),
                    week: "final".into(),
                });
            }
        }
        Ok(())
    }
}

/// Validation context shared by the record parsers.
#[derive(Debug, Clone, Copy)]
pub struct ParseContext<'a> {
    pub roster: Option<&'a Roster>,
    pub num_weeks: u32,
}

impl Default for ParseContext<'_> {
    fn default() -> Self {
        ParseContext {
            roster: None,
            num_weeks: DEFAULT_WEEKS,
        }
    }
}

impl<'a> ParseContext<'a> {
    pub fn with_roster(roster: &'a Roster) -> Self {
        ParseContext {
            roster: Some(roster),
            num_weeks: DEFAULT_WEEKS,
        }
    }
}

struct Table {
    columns: HashMap<String, usize>,
    records: csv::StringRecordsIntoIter<Box<dyn Read>>,
}

impl Table {
    fn open(reader: Box<dyn Read>, required: &[&str]) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| IngestError::Csv {
            row: 0,
            message: e.to_string(),
        })?;
        let columns: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim_start_matches('\u{feff}').to_string(), i))
            .collect();
        for col in required {
            if !columns.contains_key(*col) {
                return Err(IngestError::MissingColumn {
                    column: col.to_string(),
                });
            }
        }
        Ok(Table {
            columns,
            records: rdr.into_records(),
        })
    }

    fn rows(self) -> impl Iterator<Item = Result<Row>> {
        let columns = std::sync::Arc::new(self.columns);
        self.records.enumerate().map(move |(i, rec)| {
            let row = i + 1;
            rec.map(|record| Row {
                row,
                record,
                columns: columns.clone(),
            })
            .map_err(|e| IngestError::Csv {
                row,
                message: e.to_string(),
            })
        })
    }
}

struct Row {
    row: usize,
    record: csv::StringRecord,
    columns: std::sync::Arc<HashMap<String, usize>>,
}

impl Row {
    fn get(&self, column: &str) -> Result<&str> {
        let idx = self.columns[column];
        self.record.get(idx).ok_or_else(|| IngestError::Csv {
            row: self.row,
            message: format!("missing field `{column}`"),
        })
    }

    fn int(&self, column: &str) -> Result<i64> {
        let raw = self.get(column)?;
        raw.parse::<i64>().map_err(|_| IngestError::BadNumber {
            row: self.row,
            column: column.into(),
            value: raw.into(),
        })
    }

    fn real(&self, column: &str) -> Result<f64> {
        let raw = self.get(column)?;
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(IngestError::BadNumber {
                row: self.row,
                column: column.into(),
                value: raw.into(),
            }),
        }
    }

    fn week(&self, column: &str, num_weeks: u32) -> Result<u32> {
        let raw = self.int(column)?;
        if raw < 1 || raw > num_weeks as i64 {
            return Err(IngestError::WeekOutOfRange {
                row: self.row,
                week: raw.clamp(0, u32::MAX as i64) as u32,
                max_week: num_weeks,
            });
        }
        Ok(raw as u32)
    }
}

fn open_path(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Box::new(std::io::BufReader::new(file)))
}

fn check_student(ctx: &ParseContext<'_>, row: usize, sid: &StudentId, team: &TeamId) -> Result<()> {
    if let Some(roster) = ctx.roster {
        let idx = roster
            .student_index(sid)
            .ok_or_else(|| IngestError::UnknownStudent {
                row,
                student: sid.0.clone(),
            })?;
        if roster.team_of(idx) != team {
            return Err(IngestError::TeamMismatch {
                row,
                student: sid.0.clone(),
                team: team.0.clone(),
            });
        }
    }
    Ok(())
}

pub fn parse_commits(path: impl AsRef<Path>, ctx: &ParseContext<'_>) -> Result<Vec<CommitRecord>> {
    read_commits(open_path(path.as_ref())?, ctx)
}

pub fn read_commits(reader: impl Read + 'static, ctx: &ParseContext<'_>) -> Result<Vec<CommitRecord>> {
    let table = Table::open(Box::new(reader), &COMMIT_COLUMNS)?;
    let mut out = Vec::new();
    for row in table.rows() {
        let row = row?;
        let file_kind = match row.get("file_kind")?.to_ascii_lowercase().as_str() {
            "doc" => FileKind::Doc,
            "code" => FileKind::Code,
            other => {
                return Err(IngestError::BadEnumValue {
                    row: row.row,
                    column: "file_kind".into(),
                    value: other.into(),
                })
            }
        };
        let added = row.int("lines_added")?;
        let deleted = row.int("lines_deleted")?;
        if added < 0 || deleted < 0 || added + deleted == 0 {
            return Err(IngestError::NegativeLineCount { row: row.row });
        }
        let record = CommitRecord {
            student_id: StudentId(row.get("student_id")?.to_string()),
            team_id: TeamId(row.get("team_id")?.to_string()),
            week: row.week("week", ctx.num_weeks)?,
            timestamp: row.get("timestamp")?.to_string(),
            file_kind,
            lines_added: added as u64,
            lines_deleted: deleted as u64,
        };
        check_student(ctx, row.row, &record.student_id, &record.team_id)?;
        out.push(record);
    }
    Ok(out)
}

pub fn parse_issues(path: impl AsRef<Path>, ctx: &ParseContext<'_>) -> Result<Vec<IssueRecord>> {
    read_issues(open_path(path.as_ref())?, ctx)
}

pub fn read_issues(reader: impl Read + 'static, ctx: &ParseContext<'_>) -> Result<Vec<IssueRecord>> {
    let table = Table::open(Box::new(reader), &ISSUE_COLUMNS)?;
    let mut out = Vec::new();
    for row in table.rows() {
        let row = row?;
        let severity = row.real("severity")?;
        if severity <= 0.0 {
            return Err(IngestError::NonPositiveSeverity {
                row: row.row,
                value: severity,
            });
        }
        let record = IssueRecord {
            author_id: StudentId(row.get("author_id")?.to_string()),
            author_team: TeamId(row.get("author_team")?.to_string()),
            target_team: TeamId(row.get("target_team")?.to_string()),
            week: row.week("week", ctx.num_weeks)?,
            timestamp: row.get("timestamp")?.to_string(),
            severity,
        };
        if record.author_team == record.target_team {
            return Err(IngestError::SameTeamIssue {
                row: row.row,
                team: record.author_team.0,
            });
        }
        check_student(ctx, row.row, &record.author_id, &record.author_team)?;
        if let Some(roster) = ctx.roster {
            if roster.team_index(&record.target_team).is_none() {
                return Err(IngestError::UnknownTeam {
                    row: row.row,
                    team: record.target_team.0,
                });
            }
        }
        out.push(record);
    }
    Ok(out)
}

pub fn parse_grades(path: impl AsRef<Path>, ctx: &ParseContext<'_>) -> Result<GradeTable> {
    read_grades(open_path(path.as_ref())?, ctx)
}

pub fn read_grades(reader: impl Read + 'static, ctx: &ParseContext<'_>) -> Result<GradeTable> {
    let table = Table::open(Box::new(reader), &GRADE_COLUMNS)?;
    let mut grades = GradeTable::default();
    for row in table.rows() {
        let row = row?;
        let sid = StudentId(row.get("student_id")?.to_string());
        let grade = match row.get("grade")?.to_ascii_uppercase().as_str() {
            "A" => Grade::A,
            "B" => Grade::B,
            "C" => Grade::C,
            other => {
                return Err(IngestError::BadGrade {
                    row: row.row,
                    value: other.into(),
                })
            }
        };
        if let Some(roster) = ctx.roster {
            if roster.student_index(&sid).is_none() {
                return Err(IngestError::UnknownStudent {
                    row: row.row,
                    student: sid.0,
                });
            }
        }
        let week_raw = row.get("week")?;
        let duplicate = if week_raw.eq_ignore_ascii_case("final") {
            grades.final_grades.insert(sid.clone(), grade).is_some()
        } else {
            let week = row.week("week", ctx.num_weeks)?;
            grades.weekly.insert((sid.clone(), week), grade).is_some()
        };
        if duplicate {
            return Err(IngestError::DuplicateCell {
                row: row.row,
                student: sid.0,
                week: week_raw.to_string(),
            });
        }
    }
    if let Some(roster) = ctx.roster {
        grades.validate_complete(roster)?;
    }
    Ok(grades)
}

pub fn parse_roster(path: impl AsRef<Path>) -> Result<Roster> {
    read_roster(open_path(path.as_ref())?)
}

pub fn read_roster(reader: impl Read + 'static) -> Result<Roster> {
    let table = Table::open(Box::new(reader), &ROSTER_COLUMNS)?;
    let mut students = Vec::new();
    let mut seen = HashSet::new();
    for row in table.rows() {
        let row = row?;
        let sid = StudentId(row.get("student_id")?.to_string());
        if !seen.insert(sid.clone()) {
            return Err(IngestError::DuplicateStudent {
                row: row.row,
                student: sid.0,
            });
        }
        students.push((sid, TeamId(row.get("team_id")?.to_string())));
    }
    Roster::new(students)
}

/// Partition records into week buckets. Every record lands in exactly one
/// bucket; weeks outside `1..=num_weeks` are rejected.
pub fn section_by_week<T: Weekly + Clone>(records: &[T], num_weeks: u32) -> Result<BTreeMap<u32, Vec<T>>> {
    let mut buckets: BTreeMap<u32, Vec<T>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        let week = rec.week();
        if week < 1 || week > num_weeks {
            return Err(IngestError::WeekOutOfRange {
                row: i + 1,
                week,
                max_week: num_weeks,
            });
        }
        buckets.entry(week).or_default().push(rec.clone());
    }
    Ok(buckets)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn write_err(e: impl fmt::Display) -> IngestError {
    IngestError::Csv {
        row: 0,
        message: e.to_string(),
    }
}

/// Canonical CSV for commit records; reparses to equal records.
pub fn write_commits<W: Write>(records: &[CommitRecord], w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(COMMIT_COLUMNS).map_err(write_err)?;
    for r in records {
        wtr.write_record([
            r.student_id.0.as_str(),
            r.team_id.0.as_str(),
            &r.week.to_string(),
            r.timestamp.as_str(),
            r.file_kind.as_str(),
            &r.lines_added.to_string(),
            &r.lines_deleted.to_string(),
        ])
        .map_err(write_err)?;
    }
    wtr.flush().map_err(write_err)
}

pub fn write_issues<W: Write>(records: &[IssueRecord], w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(ISSUE_COLUMNS).map_err(write_err)?;
    for r in records {
        wtr.write_record([
            r.author_id.0.as_str(),
            r.author_team.0.as_str(),
            r.target_team.0.as_str(),
            &r.week.to_string(),
            r.timestamp.as_str(),
            &r.severity.to_string(),
        ])
        .map_err(write_err)?;
    }
    wtr.flush().map_err(write_err)
}

pub fn write_grades<W: Write>(grades: &GradeTable, w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(GRADE_COLUMNS).map_err(write_err)?;
    for ((sid, week), g) in &grades.weekly {
        wtr.write_record([sid.0.as_str(), &week.to_string(), g.as_str()])
            .map_err(write_err)?;
    }
    for (sid, g) in &grades.final_grades {
        wtr.write_record([sid.0.as_str(), "final", g.as_str()])
            .map_err(write_err)?;
    }
    wtr.flush().map_err(write_err)
}

pub fn write_roster<W: Write>(roster: &Roster, w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(ROSTER_COLUMNS).map_err(write_err)?;
    for (sid, tid) in &roster.students {
        wtr.write_record([sid.0.as_str(), tid.0.as_str()])
            .map_err(write_err)?;
    }
    wtr.flush().map_err(write_err)
}
