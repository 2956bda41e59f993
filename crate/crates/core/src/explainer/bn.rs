use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::stats::DiscreteData;

/// Minimum score gain for hill climbing to accept a move.
pub const MIN_IMPROVEMENT: f64 = 1e-10;

/// Maximum-likelihood conditional probability table. Row `k` is the child
/// distribution under the parent configuration with mixed-radix index `k`
/// (first parent most significant). Unobserved configurations are uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cpt {
    pub parent_cards: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianNetwork {
    /// Data column of each node.
    pub variables: Vec<usize>,
    /// Parent node positions per node, ascending.
    pub parents: Vec<Vec<usize>>,
    pub cpts: Vec<Cpt>,
    pub score: f64,
    /// Score after each accepted move, starting from the empty network.
    pub trace: Vec<f64>,
}

impl BayesianNetwork {
    /// Network over `variables` with the given parent sets; CPTs and score
    /// are fitted to `data`.
    pub fn with_parents(data: &DiscreteData, variables: Vec<usize>, mut parents: Vec<Vec<usize>>) -> Self {
        for p in &mut parents {
            p.sort_unstable();
        }
        let cpts = variables
            .iter()
            .zip(&parents)
            .map(|(v, ps)| {
                let cols: Vec<usize> = ps.iter().map(|p| variables[*p]).collect();
                fit_cpt(data, *v, &cols)
            })
            .collect();
        let mut net = BayesianNetwork {
            variables,
            parents,
            cpts,
            score: 0.0,
            trace: Vec::new(),
        };
        net.score = bic_score(&net, data);
        net.trace = vec![net.score];
        net
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    /// `(parent, child)` node positions.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (child, ps) in self.parents.iter().enumerate() {
            for p in ps {
                out.push((*p, child));
            }
        }
        out.sort_unstable();
        out
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.parents[to].contains(&from)
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.has_edge(a, b) || self.has_edge(b, a)
    }

    pub fn is_acyclic(&self) -> bool {
        let n = self.len();
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: Vec<usize> = (0..n).filter(|v| indegree[*v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = ready.pop() {
            seen += 1;
            for c in 0..n {
                if self.parents[c].contains(&v) {
                    indegree[c] -= 1;
                    if indegree[c] == 0 {
                        ready.push(c);
                    }
                }
            }
        }
        seen == n
    }

    /// Node position of data column `var`.
    pub fn position(&self, var: usize) -> Option<usize> {
        self.variables.iter().position(|v| *v == var)
    }
}

fn parent_config(data: &DiscreteData, parents: &[usize]) -> (Vec<usize>, usize) {
    data.joint_column(parents)
}

fn family_counts(data: &DiscreteData, child: usize, parents: &[usize]) -> (Vec<usize>, usize, usize) {
    let (cfg, q) = parent_config(data, parents);
    let r = data.card(child);
    let mut counts = vec![0usize; q * r];
    for (k, v) in cfg.iter().zip(data.column(child)) {
        counts[k * r + *v as usize] += 1;
    }
    (counts, q, r)
}

fn fit_cpt(data: &DiscreteData, child: usize, parents: &[usize]) -> Cpt {
    let (counts, q, r) = family_counts(data, child, parents);
    let rows = (0..q)
        .map(|k| {
            let row = &counts[k * r..(k + 1) * r];
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![1.0 / r as f64; r]
            } else {
                row.iter().map(|c| *c as f64 / total as f64).collect()
            }
        })
        .collect();
    Cpt {
        parent_cards: parents.iter().map(|p| data.card(*p)).collect(),
        rows,
    }
}

/// BIC of one family: `Σ N_jk ln(N_jk / N_j) − (ln s / 2)·(r − 1)·q`, with
/// `q` the number of parent configurations.
pub fn family_score(data: &DiscreteData, child: usize, parents: &[usize]) -> f64 {
    let (counts, q, r) = family_counts(data, child, parents);
    let mut ll = 0.0;
    for k in 0..q {
        let row = &counts[k * r..(k + 1) * r];
        let total: usize = row.iter().sum();
        for c in row {
            if *c > 0 {
                ll += *c as f64 * (*c as f64 / total as f64).ln();
            }
        }
    }
    let s = data.rows().max(1) as f64;
    ll - s.ln() / 2.0 * ((r - 1) * q) as f64
}

pub fn bic_score(net: &BayesianNetwork, data: &DiscreteData) -> f64 {
    net.variables
        .iter()
        .zip(&net.parents)
        .map(|(v, ps)| {
            let cols: Vec<usize> = ps.iter().map(|p| net.variables[*p]).collect();
            family_score(data, *v, &cols)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    Add(usize, usize),
    Delete(usize, usize),
    Reverse(usize, usize),
}

struct Scorer<'a> {
    data: &'a DiscreteData,
    variables: &'a [usize],
    cache: HashMap<(usize, Vec<usize>), f64>,
}

impl Scorer<'_> {
    fn score(&mut self, child: usize, parents: &[usize]) -> f64 {
        let mut key = parents.to_vec();
        key.sort_unstable();
        if let Some(s) = self.cache.get(&(child, key.clone())) {
            return *s;
        }
        let cols: Vec<usize> = key.iter().map(|p| self.variables[*p]).collect();
        let s = family_score(self.data, self.variables[child], &cols);
        self.cache.insert((child, key), s);
        s
    }
}

fn reaches(parents: &[Vec<usize>], from: usize, to: usize, skip: Option<(usize, usize)>) -> bool {
    // walk child links from `from`
    let n = parents.len();
    let mut stack = vec![from];
    let mut seen = vec![false; n];
    while let Some(v) = stack.pop() {
        if v == to {
            return true;
        }
        if std::mem::replace(&mut seen[v], true) {
            continue;
        }
        for c in 0..n {
            if parents[c].contains(&v) && skip != Some((v, c)) {
                stack.push(c);
            }
        }
    }
    false
}

/// Greedy BIC search from the empty network over single-edge additions,
/// deletions and reversals.
///
/// Each step evaluates every legal move in lexicographic `(from, to)` order
/// and applies the best one; a later move must beat the current best
/// strictly to replace it. Search stops when no move gains more than
/// [`MIN_IMPROVEMENT`].
pub fn hill_climb(data: &DiscreteData, variables: &[usize], max_parents: usize) -> BayesianNetwork {
    let n = variables.len();
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut scorer = Scorer {
        data,
        variables,
        cache: HashMap::new(),
    };
    let mut family: Vec<f64> = (0..n).map(|v| scorer.score(v, &[])).collect();
    let mut trace = vec![family.iter().sum::<f64>()];
    loop {
        let mut best: Option<(f64, Move)> = None;
        let consider = |delta: f64, mv: Move, best: &mut Option<(f64, Move)>| {
            if best.is_none_or(|(d, _)| delta > d) {
                *best = Some((delta, mv));
            }
        };
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if parents[j].contains(&i) {
                    let without: Vec<usize> = parents[j].iter().copied().filter(|p| *p != i).collect();
                    let d_del = scorer.score(j, &without) - family[j];
                    consider(d_del, Move::Delete(i, j), &mut best);
                    if parents[i].len() < max_parents && !reaches(&parents, i, j, Some((i, j))) {
                        let mut with_j = parents[i].clone();
                        with_j.push(j);
                        let d_rev = d_del + scorer.score(i, &with_j) - family[i];
                        consider(d_rev, Move::Reverse(i, j), &mut best);
                    }
                } else if !parents[i].contains(&j) && parents[j].len() < max_parents && !reaches(&parents, j, i, None) {
                    let mut with_i = parents[j].clone();
                    with_i.push(i);
                    let d_add = scorer.score(j, &with_i) - family[j];
                    consider(d_add, Move::Add(i, j), &mut best);
                }
            }
        }
        let Some((_, mv)) = best.filter(|(d, _)| *d > MIN_IMPROVEMENT) else {
            break;
        };
        match mv {
            Move::Add(i, j) => {
                parents[j].push(i);
                parents[j].sort_unstable();
                family[j] = scorer.score(j, &parents[j]);
            }
            Move::Delete(i, j) => {
                parents[j].retain(|p| *p != i);
                family[j] = scorer.score(j, &parents[j]);
            }
            Move::Reverse(i, j) => {
                parents[j].retain(|p| *p != i);
                parents[i].push(j);
                parents[i].sort_unstable();
                family[j] = scorer.score(j, &parents[j]);
                family[i] = scorer.score(i, &parents[i]);
            }
        }
        let total: f64 = family.iter().sum();
        trace.push(total);
    }
    let mut net = BayesianNetwork::with_parents(data, variables.to_vec(), parents);
    net.trace = trace;
    net
}
