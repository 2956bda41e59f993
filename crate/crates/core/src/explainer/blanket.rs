use serde::{Deserialize, Serialize};

use super::stats::{dependency_test, test_in_strata, DiscreteData, TestKind};
use super::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlanketOptions {
    pub alpha: f64,
    pub test: TestKind,
    /// When no single candidate is dependent, test pairs of candidates as
    /// one joint variable (Bonferroni-corrected over the number of pairs).
    pub pair_lookahead: bool,
}

impl Default for BlanketOptions {
    fn default() -> Self {
        BlanketOptions {
            alpha: 0.05,
            test: TestKind::ChiSquare,
            pair_lookahead: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlanketMember {
    pub variable: usize,
    /// p-value of the test that admitted the variable.
    pub p_value: f64,
}

/// Grow-shrink Markov blanket of `target` among `candidates`.
///
/// Grow: repeatedly add the candidate with the smallest p-value below
/// `alpha` when tested against the target given the current blanket (ties
/// go to the earlier candidate). Shrink: repeatedly drop the first member
/// that is independent of the target given the other members.
pub fn markov_blanket(
    data: &DiscreteData,
    target: usize,
    candidates: &[usize],
    opts: &BlanketOptions,
) -> Result<Vec<BlanketMember>> {
    let mut blanket: Vec<BlanketMember> = Vec::new();
    if data.is_constant(target) {
        return Ok(blanket);
    }
    let members = |b: &[BlanketMember]| b.iter().map(|m| m.variable).collect::<Vec<_>>();
    loop {
        let cond = members(&blanket);
        let mut best: Option<(f64, usize)> = None;
        for &c in candidates {
            if c == target || cond.contains(&c) {
                continue;
            }
            let r = dependency_test(data, target, c, &cond, opts.test)?;
            if best.is_none_or(|(p, _)| r.p_value < p) {
                best = Some((r.p_value, c));
            }
        }
        if let Some((p, c)) = best.filter(|(p, _)| *p < opts.alpha) {
            blanket.push(BlanketMember { variable: c, p_value: p });
            continue;
        }
        if opts.pair_lookahead {
            if let Some((p, a, b)) = best_pair(data, target, candidates, &cond, opts) {
                blanket.push(BlanketMember { variable: a, p_value: p });
                blanket.push(BlanketMember { variable: b, p_value: p });
                continue;
            }
        }
        break;
    }
    loop {
        let vars = members(&blanket);
        let mut removed = false;
        for (k, &x) in vars.iter().enumerate() {
            let rest: Vec<usize> = vars.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| *v).collect();
            let r = dependency_test(data, target, x, &rest, opts.test)?;
            if r.p_value >= opts.alpha {
                blanket.remove(k);
                removed = true;
                break;
            }
        }
        if !removed {
            break;
        }
    }
    Ok(blanket)
}

fn best_pair(
    data: &DiscreteData,
    target: usize,
    candidates: &[usize],
    cond: &[usize],
    opts: &BlanketOptions,
) -> Option<(f64, usize, usize)> {
    let free: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|c| *c != target && !cond.contains(c) && !data.is_constant(*c))
        .collect();
    let pairs = free.len() * free.len().saturating_sub(1) / 2;
    if pairs == 0 {
        return None;
    }
    let threshold = opts.alpha / pairs as f64;
    let col_t: Vec<usize> = data.column(target).iter().map(|v| *v as usize).collect();
    let (ids, strata) = data.strata(cond);
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..free.len() {
        for j in i + 1..free.len() {
            let (joint, card) = data.joint_column(&[free[i], free[j]]);
            let r = test_in_strata(&ids, strata, &col_t, data.card(target), &joint, card, opts.test);
            if best.is_none_or(|(p, _, _)| r.p_value < p) {
                best = Some((r.p_value, free[i], free[j]));
            }
        }
    }
    best.filter(|(p, _, _)| *p < threshold)
}
