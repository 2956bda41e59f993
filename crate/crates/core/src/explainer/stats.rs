use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{ExplainError, Result};

/// Column-major table of discrete observations. Column `k` takes values in
/// `0..cards[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteData {
    columns: Vec<Vec<u8>>,
    cards: Vec<usize>,
    rows: usize,
}

impl DiscreteData {
    pub fn new(columns: Vec<Vec<u8>>, cards: Vec<usize>) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.len() != cards.len() {
            return Err(ExplainError::Shape(format!(
                "{} columns but {} cardinalities",
                columns.len(),
                cards.len()
            )));
        }
        for (k, (col, card)) in columns.iter().zip(&cards).enumerate() {
            if col.len() != rows {
                return Err(ExplainError::Shape(format!("column {k} has {} rows, expected {rows}", col.len())));
            }
            if *card == 0 || *card > 256 {
                return Err(ExplainError::Shape(format!("column {k} cardinality {card}")));
            }
            if let Some(v) = col.iter().find(|v| **v as usize >= *card) {
                return Err(ExplainError::Shape(format!("column {k} value {v} exceeds cardinality {card}")));
            }
        }
        Ok(DiscreteData { columns, cards, rows })
    }

    /// Binary columns.
    pub fn from_bools(columns: &[Vec<bool>]) -> Result<Self> {
        let cols = columns
            .iter()
            .map(|c| c.iter().map(|b| u8::from(*b)).collect())
            .collect();
        DiscreteData::new(cols, vec![2; columns.len()])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_vars(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, k: usize) -> &[u8] {
        &self.columns[k]
    }

    pub fn card(&self, k: usize) -> usize {
        self.cards[k]
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    fn check(&self, k: usize) -> Result<()> {
        if k >= self.columns.len() {
            return Err(ExplainError::UnknownVariable(k));
        }
        Ok(())
    }

    /// A product variable over `vars`, mixed-radix encoded.
    pub fn joint_column(&self, vars: &[usize]) -> (Vec<usize>, usize) {
        let mut col = vec![0usize; self.rows];
        let mut card = 1usize;
        for &v in vars {
            for (x, y) in col.iter_mut().zip(&self.columns[v]) {
                *x = *x * self.cards[v] + *y as usize;
            }
            card *= self.cards[v];
        }
        (col, card)
    }

    /// Dense ids `0..k` for the observed joint states of `vars`, numbered in
    /// order of first appearance.
    pub fn strata(&self, vars: &[usize]) -> (Vec<usize>, usize) {
        let mut ids = vec![0usize; self.rows];
        let mut count = 1;
        for &v in vars {
            let mut map: HashMap<(usize, u8), usize> = HashMap::new();
            for (id, val) in ids.iter_mut().zip(&self.columns[v]) {
                let next = map.len();
                *id = *map.entry((*id, *val)).or_insert(next);
            }
            count = map.len();
        }
        (ids, count)
    }

    pub fn is_constant(&self, k: usize) -> bool {
        let c = &self.columns[k];
        c.iter().all(|v| *v == c[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    #[default]
    ChiSquare,
    GTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Some stratum had an expected cell count below 5.
    pub insufficient: bool,
}

/// Independence test of `a` and `b` given the conditioning set.
///
/// The contingency table is built within each observed joint state of
/// `cond`; rows and columns with zero margin inside a stratum are dropped,
/// and statistics and degrees of freedom are summed across strata. With zero
/// total degrees of freedom the p-value is 1.
pub fn dependency_test(data: &DiscreteData, a: usize, b: usize, cond: &[usize], kind: TestKind) -> Result<TestResult> {
    data.check(a)?;
    data.check(b)?;
    for c in cond {
        data.check(*c)?;
    }
    let col_a: Vec<usize> = data.column(a).iter().map(|v| *v as usize).collect();
    let col_b: Vec<usize> = data.column(b).iter().map(|v| *v as usize).collect();
    Ok(test_columns(data, &col_a, data.card(a), &col_b, data.card(b), cond, kind))
}

/// Like [`dependency_test`] for arbitrary encoded columns, e.g. a
/// [`DiscreteData::joint_column`].
pub fn test_columns(
    data: &DiscreteData,
    col_a: &[usize],
    card_a: usize,
    col_b: &[usize],
    card_b: usize,
    cond: &[usize],
    kind: TestKind,
) -> TestResult {
    let (ids, strata) = data.strata(cond);
    test_in_strata(&ids, strata, col_a, card_a, col_b, card_b, kind)
}

/// The stratified test with precomputed stratum ids (see [`DiscreteData::strata`]).
#[allow(clippy::too_many_arguments)]
pub fn test_in_strata(
    ids: &[usize],
    strata: usize,
    col_a: &[usize],
    card_a: usize,
    col_b: &[usize],
    card_b: usize,
    kind: TestKind,
) -> TestResult {
    let cells = card_a * card_b;
    let mut counts = vec![0usize; strata * cells];
    for i in 0..col_a.len() {
        counts[ids[i] * cells + col_a[i] * card_b + col_b[i]] += 1;
    }
    let mut statistic = 0.0;
    let mut dof = 0usize;
    let mut insufficient = false;
    for s in 0..strata {
        let table = &counts[s * cells..(s + 1) * cells];
        let row_sum: Vec<usize> = (0..card_a).map(|r| table[r * card_b..(r + 1) * card_b].iter().sum()).collect();
        let col_sum: Vec<usize> = (0..card_b).map(|c| (0..card_a).map(|r| table[r * card_b + c]).sum()).collect();
        let total: usize = row_sum.iter().sum();
        let rows: Vec<usize> = (0..card_a).filter(|r| row_sum[*r] > 0).collect();
        let colz: Vec<usize> = (0..card_b).filter(|c| col_sum[*c] > 0).collect();
        if rows.len() < 2 || colz.len() < 2 {
            continue;
        }
        dof += (rows.len() - 1) * (colz.len() - 1);
        for &r in &rows {
            for &c in &colz {
                let expected = (row_sum[r] * col_sum[c]) as f64 / total as f64;
                if expected < 5.0 {
                    insufficient = true;
                }
                let observed = table[r * card_b + c] as f64;
                statistic += match kind {
                    TestKind::ChiSquare => (observed - expected).powi(2) / expected,
                    TestKind::GTest if observed > 0.0 => 2.0 * observed * (observed / expected).ln(),
                    TestKind::GTest => 0.0,
                };
            }
        }
    }
    let p_value = if dof == 0 {
        1.0
    } else {
        ChiSquared::new(dof as f64).map_or(1.0, |d| d.sf(statistic.max(0.0)))
    };
    TestResult {
        statistic,
        dof,
        p_value,
        insufficient,
    }
}

pub(crate) fn entropy_of(counts: impl Iterator<Item = usize>, total: usize) -> f64 {
    let n = total as f64;
    counts
        .filter(|c| *c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Shannon entropy (nats) of one column.
pub fn entropy(data: &DiscreteData, k: usize) -> f64 {
    let mut counts = vec![0usize; data.card(k)];
    for v in data.column(k) {
        counts[*v as usize] += 1;
    }
    entropy_of(counts.into_iter(), data.rows())
}

pub fn mutual_information(data: &DiscreteData, a: usize, b: usize) -> f64 {
    let (joint, card) = data.joint_column(&[a, b]);
    let mut counts = vec![0usize; card];
    for j in joint {
        counts[j] += 1;
    }
    let h_ab = entropy_of(counts.into_iter(), data.rows());
    (entropy(data, a) + entropy(data, b) - h_ab).max(0.0)
}

/// `I(a; b) / √(H(a) · H(b))`, 0 when either variable is constant.
pub fn normalized_mutual_information(data: &DiscreteData, a: usize, b: usize) -> f64 {
    let denom = (entropy(data, a) * entropy(data, b)).sqrt();
    if denom <= 0.0 {
        return 0.0;
    }
    (mutual_information(data, a, b) / denom).min(1.0)
}
