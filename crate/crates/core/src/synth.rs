//! Synthetic course exports with the shape of the reference course: 75
//! students in 11 teams over 16 weeks, 4,903 commits and 862 issues.
//!
//! Each student has a latent skill that raises both activity and grades, so
//! grades are partly predictable from the interaction data.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{
    write_commits, write_grades, write_issues, write_roster, CommitRecord, FileKind, Grade, GradeTable,
    IngestError, IssueRecord, Roster, StudentId, TeamId,
};
use crate::pipeline::{CourseData, DataPaths};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub team_sizes: Vec<usize>,
    pub weeks: u32,
    pub commits: usize,
    pub issues: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mut team_sizes = vec![7; 9];
        team_sizes.extend([6, 6]);
        SynthConfig {
            team_sizes,
            weeks: 16,
            commits: 4903,
            issues: 862,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn students(&self) -> usize {
        self.team_sizes.iter().sum()
    }
}

fn timestamp(week: u32, rng: &mut impl Rng) -> String {
    // course weeks start on Mondays from 2021-03-01
    let day = (week - 1) * 7 + rng.random_range(0..7);
    let (month, dom) = if day < 31 { (3, day + 1) } else if day < 61 { (4, day - 30) } else if day < 92 { (5, day - 60) } else { (6, day - 91) };
    format!(
        "2021-{month:02}-{dom:02}T{:02}:{:02}:{:02}Z",
        rng.random_range(8..23),
        rng.random_range(0..60),
        rng.random_range(0..60)
    )
}

pub fn generate(config: &SynthConfig) -> Result<CourseData, IngestError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut students = Vec::new();
    for (t, size) in config.team_sizes.iter().enumerate() {
        for _ in 0..*size {
            let sid = StudentId(format!("s{:02}", students.len() + 1));
            students.push((sid, TeamId(format!("t{:02}", t + 1))));
        }
    }
    let roster = Roster::new(students)?;
    let n = roster.len();
    let weeks = config.weeks as usize;

    let std_normal: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let skill: Vec<f64> = (0..n).map(|_| std_normal.sample(&mut rng)).collect();
    // per-cell activity propensity, with a mid-course ramp
    let propensity: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            (0..weeks)
                .map(|w| {
                    let phase = (w as f64 + 0.5) / weeks as f64;
                    let ramp = 0.6 + (std::f64::consts::PI * phase).sin();
                    ramp * (0.8 * skill[s] + 0.5 * std_normal.sample(&mut rng)).exp()
                })
                .collect()
        })
        .collect();

    let cells: Vec<(usize, usize)> = (0..n).flat_map(|s| (0..weeks).map(move |w| (s, w))).collect();
    let cell_index =
        WeightedIndex::new(cells.iter().map(|(s, w)| propensity[*s][*w])).expect("positive propensities");
    let lines: LogNormal<f64> = LogNormal::new(2.5, 1.1).expect("valid lognormal");
    let mut commits = Vec::with_capacity(config.commits);
    let mut activity = vec![vec![0.0; weeks]; n];
    for _ in 0..config.commits {
        let (s, w) = cells[cell_index.sample(&mut rng)];
        let file_kind = if rng.random_bool(0.3) { FileKind::Doc } else { FileKind::Code };
        let mut added = lines.sample(&mut rng).round() as u64;
        let deleted = if rng.random_bool(0.45) { (lines.sample(&mut rng) * 0.6).round() as u64 } else { 0 };
        if added + deleted == 0 {
            added = 1;
        }
        activity[s][w] += 1.0;
        commits.push(CommitRecord {
            student_id: roster.students[s].0.clone(),
            team_id: roster.students[s].1.clone(),
            week: w as u32 + 1,
            timestamp: timestamp(w as u32 + 1, &mut rng),
            file_kind,
            lines_added: added,
            lines_deleted: deleted,
        });
    }

    let teams = roster.teams.len();
    let mut issues = Vec::with_capacity(config.issues);
    if teams > 1 {
        for _ in 0..config.issues {
            let (s, w) = cells[cell_index.sample(&mut rng)];
            let own = roster.team_index(roster.team_of(s)).unwrap_or(0);
            let target = (own + rng.random_range(1..teams)) % teams;
            let severity = (1.0 + 4.0 * rng.random::<f64>() * rng.random::<f64>()).clamp(1.0, 5.0);
            activity[s][w] += 0.5;
            issues.push(IssueRecord {
                author_id: roster.students[s].0.clone(),
                author_team: roster.students[s].1.clone(),
                target_team: roster.teams[target].clone(),
                week: w as u32 + 1,
                timestamp: timestamp(w as u32 + 1, &mut rng),
                severity: (severity * 10.0).round() / 10.0,
            });
        }
    }
    commits.sort_by(|a, b| (a.week, &a.timestamp).cmp(&(b.week, &b.timestamp)));
    issues.sort_by(|a, b| (a.week, &a.timestamp).cmp(&(b.week, &b.timestamp)));

    let mean_activity: Vec<f64> = (0..weeks)
        .map(|w| (0..n).map(|s| activity[s][w]).sum::<f64>() / n as f64)
        .collect();
    let mut weekly = BTreeMap::new();
    let mut final_grades = BTreeMap::new();
    for s in 0..n {
        let sid = &roster.students[s].0;
        let mut counts = [0usize; 3];
        for w in 0..weeks {
            let rel = (activity[s][w] + 1.0).ln() - (mean_activity[w] + 1.0).ln();
            let score = skill[s] + 0.8 * rel + 0.4 * std_normal.sample(&mut rng);
            let grade = if score > 0.45 {
                Grade::A
            } else if score > -0.45 {
                Grade::B
            } else {
                Grade::C
            };
            counts[grade.index()] += 1;
            weekly.insert((sid.clone(), w as u32 + 1), grade);
        }
        let top = (0..3).max_by_key(|g| (counts[*g], std::cmp::Reverse(*g))).unwrap_or(1);
        final_grades.insert(sid.clone(), Grade::from_index(top).unwrap_or(Grade::B));
    }
    Ok(CourseData {
        roster,
        commits,
        issues,
        grades: GradeTable { weekly, final_grades },
        num_weeks: config.weeks,
    })
}

/// Write the four CSV exports into `dir`, returning their paths.
pub fn write_course(data: &CourseData, dir: impl AsRef<Path>) -> Result<DataPaths, IngestError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let paths = DataPaths::in_dir(dir);
    let open = |p: &Path| File::create(p).map_err(|e| io_err(p, e));
    write_roster(&data.roster, open(&paths.roster)?)?;
    write_commits(&data.commits, open(&paths.commits)?)?;
    write_issues(&data.issues, open(&paths.issues)?)?;
    write_grades(&data.grades, open(&paths.grades)?)?;
    Ok(paths)
}

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}
