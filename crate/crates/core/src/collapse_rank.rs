//! Dependency graph and collapse ranking.
//!
//! `A_ij = w_ij` is the weight target `i` puts on contributor `j`. `P` is
//! the column-normalized `A` (dangling all-zero columns become uniform),
//! and the ranking vector solves `r = (1−c)β + cPr`. Three solvers are
//! provided (power iteration, truncated Neumann series, dense direct
//! solve) so that each can be checked against the others.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CollapseError, Result};
use crate::gaussian_field::GaussianModel;
use crate::mask_learner::SelectionMaskSet;

#[derive(Clone, Debug, PartialEq)]
pub struct DependencyGraph {
    adjacency: DMatrix<f64>,
    stochastic: DMatrix<f64>,
    damping: f64,
    teleport: DVector<f64>,
    dangling_columns: Vec<usize>,
}

/// Metadata written next to the dense adjacency CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub damping: f64,
    pub teleport: Vec<f64>,
    pub dangling_columns: Vec<usize>,
}

impl DependencyGraph {
    /// Builds the graph from a raw adjacency matrix. `teleport = None`
    /// means uniform; a given teleport vector is normalized to sum to 1.
    pub fn from_adjacency(
        mut adjacency: DMatrix<f64>,
        damping: f64,
        teleport: Option<&[f64]>,
    ) -> Result<Self> {
        let n = adjacency.nrows();
        if !adjacency.is_square() {
            return Err(CollapseError::InvalidArgument(
                "adjacency must be square".into(),
            ));
        }
        if n < 2 {
            return Err(CollapseError::InvalidArgument(format!(
                "dependency graph needs at least 2 patches, got {n}"
            )));
        }
        if !(damping > 0.0 && damping < 1.0) {
            return Err(CollapseError::InvalidArgument(format!(
                "damping must lie in (0, 1), got {damping}"
            )));
        }
        if adjacency.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CollapseError::InvalidArgument(
                "adjacency entries must be finite and non-negative".into(),
            ));
        }
        for i in 0..n {
            adjacency[(i, i)] = 0.0;
        }

        let teleport = match teleport {
            None => DVector::from_element(n, 1.0 / n as f64),
            Some(t) => {
                if t.len() != n {
                    return Err(CollapseError::DimensionMismatch {
                        expected: n,
                        got: t.len(),
                    });
                }
                if t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(CollapseError::InvalidArgument(
                        "teleport entries must be finite and non-negative".into(),
                    ));
                }
                let total: f64 = t.iter().sum();
                if total <= 0.0 {
                    return Err(CollapseError::InvalidArgument(
                        "teleport vector sums to zero".into(),
                    ));
                }
                DVector::from_iterator(n, t.iter().map(|v| v / total))
            }
        };

        let mut stochastic = DMatrix::zeros(n, n);
        let mut dangling_columns = Vec::new();
        for j in 0..n {
            let total: f64 = adjacency.column(j).iter().sum();
            if total > 0.0 {
                for i in 0..n {
                    stochastic[(i, j)] = adjacency[(i, j)] / total;
                }
            } else {
                dangling_columns.push(j);
                stochastic.column_mut(j).fill(1.0 / n as f64);
            }
        }

        Ok(DependencyGraph {
            adjacency,
            stochastic,
            damping,
            teleport,
            dangling_columns,
        })
    }

    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// Column-stochastic transition matrix `P`.
    pub fn stochastic(&self) -> &DMatrix<f64> {
        &self.stochastic
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn teleport(&self) -> &DVector<f64> {
        &self.teleport
    }

    pub fn dangling_columns(&self) -> &[usize] {
        &self.dangling_columns
    }

    pub fn meta(&self) -> GraphMeta {
        GraphMeta {
            damping: self.damping,
            teleport: self.teleport.iter().copied().collect(),
            dangling_columns: self.dangling_columns.clone(),
        }
    }

    /// `(1−c)β + cPr`
    pub fn step(&self, r: &DVector<f64>) -> DVector<f64> {
        &self.teleport * (1.0 - self.damping) + (&self.stochastic * r) * self.damping
    }

    /// `‖r − ((1−c)β + cPr)‖_∞`
    pub fn residual(&self, r: &DVector<f64>) -> f64 {
        (r - self.step(r)).amax()
    }
}

/// Uses the learned masks as adjacency, unchanged.
pub fn build_graph(
    masks: &SelectionMaskSet,
    damping: f64,
    teleport: Option<&[f64]>,
) -> Result<DependencyGraph> {
    DependencyGraph::from_adjacency(masks.weights().clone(), damping, teleport)
}

/// Ablation variant: entries below `threshold` are zeroed first.
pub fn build_graph_thresholded(
    masks: &SelectionMaskSet,
    damping: f64,
    teleport: Option<&[f64]>,
    threshold: f64,
) -> Result<DependencyGraph> {
    let a = masks.weights().map(|w| if w < threshold { 0.0 } else { w });
    DependencyGraph::from_adjacency(a, damping, teleport)
}

/// Restart distribution for the ranking walk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeleportMode {
    #[default]
    Uniform,
    /// Experimental: `β_j ∝ H_c(∅) − H_c({j})`, the drop in cumulative
    /// entropy from observing patch `j` alone.
    EntropyReduction,
}

impl fmt::Display for TeleportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeleportMode::Uniform => "uniform",
            TeleportMode::EntropyReduction => "entropy_reduction",
        })
    }
}

/// Teleport vector for `mode`; `None` means uniform.
pub fn teleport_vector(mode: TeleportMode, model: &GaussianModel) -> Result<Option<Vec<f64>>> {
    match mode {
        TeleportMode::Uniform => Ok(None),
        TeleportMode::EntropyReduction => {
            let n = model.n_patches();
            let base: f64 = model.entropy_profile(&vec![false; n])?.iter().sum();
            let mut beta = Vec::with_capacity(n);
            let mut observed = vec![false; n];
            for j in 0..n {
                observed[j] = true;
                let h: f64 = model.entropy_profile(&observed)?.iter().sum();
                observed[j] = false;
                beta.push((base - h).max(0.0));
            }
            if beta.iter().sum::<f64>() <= 0.0 {
                return Ok(None);
            }
            Ok(Some(beta))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    Power,
    Neumann,
    Direct,
}

impl fmt::Display for RankMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankMethod::Power => "power",
            RankMethod::Neumann => "neumann",
            RankMethod::Direct => "direct",
        })
    }
}

impl FromStr for RankMethod {
    type Err = CollapseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(RankMethod::Power),
            "neumann" => Ok(RankMethod::Neumann),
            "direct" => Ok(RankMethod::Direct),
            other => Err(CollapseError::Malformed(format!(
                "unknown rank method `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseRanking {
    pub scores: Vec<f64>,
    /// Patches by descending score, ties by ascending index.
    pub order: Vec<usize>,
    pub method: RankMethod,
    pub iterations: usize,
    pub residual: f64,
}

impl CollapseRanking {
    pub fn from_scores(
        scores: Vec<f64>,
        method: RankMethod,
        iterations: usize,
        residual: f64,
    ) -> Self {
        let order = descending_order(&scores);
        CollapseRanking {
            scores,
            order,
            method,
            iterations,
            residual,
        }
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }

    /// Rank position (0 = highest score) of every patch.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (pos, &p) in self.order.iter().enumerate() {
            ranks[p] = pos;
        }
        ranks
    }

    /// Low-to-high order.
    pub fn ascending(&self) -> Vec<usize> {
        self.order.iter().rev().copied().collect()
    }
}

pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn normalized(v: DVector<f64>) -> DVector<f64> {
    let total = v.sum();
    v / total
}

/// Power iteration from `r = β` until the L1 change drops below `tol`.
pub fn pagerank_power(
    graph: &DependencyGraph,
    tol: f64,
    max_iter: usize,
) -> Result<CollapseRanking> {
    let mut r = graph.teleport.clone();
    let mut delta = f64::INFINITY;
    for it in 1..=max_iter {
        let next = graph.step(&r);
        delta = (&next - &r).lp_norm(1);
        r = next;
        if delta < tol {
            let r = normalized(r);
            let residual = graph.residual(&r);
            return Ok(CollapseRanking::from_scores(
                r.iter().copied().collect(),
                RankMethod::Power,
                it,
                residual,
            ));
        }
    }
    Err(CollapseError::NotConverged {
        iterations: max_iter,
        residual: delta,
    })
}

/// Upper bound on the dropped tail `Σ_{t>T} c^t ‖P^t β‖₁ = c^{T+1}/(1−c)`
/// of the unnormalized series (β sums to one).
pub fn neumann_tail_bound(damping: f64, terms: usize) -> f64 {
    damping.powi(terms as i32 + 1) / (1.0 - damping)
}

/// Smallest `T` whose tail bound is below `tol`.
pub fn neumann_terms_for(damping: f64, tol: f64) -> usize {
    let mut t = 0;
    while neumann_tail_bound(damping, t) >= tol {
        t += 1;
    }
    t
}

/// Normalized partial sum `Σ_{t=0}^{T} c^t P^t β`. The unnormalized
/// truncation error is at most [`neumann_tail_bound`].
pub fn pagerank_neumann(graph: &DependencyGraph, terms: usize) -> CollapseRanking {
    let mut term = graph.teleport.clone();
    let mut sum = term.clone();
    for _ in 0..terms {
        term = (&graph.stochastic * term) * graph.damping;
        sum += &term;
    }
    let r = normalized(sum);
    let residual = graph.residual(&r);
    CollapseRanking::from_scores(
        r.iter().copied().collect(),
        RankMethod::Neumann,
        terms,
        residual,
    )
}

/// Solves `(I − cP) r = (1−c)β` by LU decomposition.
pub fn pagerank_direct(graph: &DependencyGraph) -> Result<CollapseRanking> {
    let n = graph.n();
    let system = DMatrix::identity(n, n) - &graph.stochastic * graph.damping;
    let rhs = &graph.teleport * (1.0 - graph.damping);
    let r = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CollapseError::Singular("I − cP is singular".into()))?;
    let r = normalized(r);
    let residual = graph.residual(&r);
    Ok(CollapseRanking::from_scores(
        r.iter().copied().collect(),
        RankMethod::Direct,
        1,
        residual,
    ))
}

/// Greedy order for cumulative conditional entropy, with the entropy of
/// the observed set after each pick.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyOrder {
    pub order: Vec<usize>,
    /// `prefix_entropies[k]` is `H_c` of the first `k + 1` picks.
    pub prefix_entropies: Vec<f64>,
}

const TIE_REL_TOL: f64 = 1e-12;

/// Repeatedly observes the patch that most reduces
/// `H_c(S) = Σ_n H(e_n | S)`. Near-ties (relative 1e-12) go to the lower
/// index.
pub fn greedy_oracle_order(model: &GaussianModel) -> Result<GreedyOrder> {
    let n = model.n_patches();
    let mut observed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut prefix_entropies = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if observed[j] {
                continue;
            }
            observed[j] = true;
            let h: f64 = model.entropy_profile(&observed)?.iter().sum();
            observed[j] = false;
            let better = match best {
                None => true,
                Some((_, b)) => h < b - TIE_REL_TOL * b.abs().max(1.0),
            };
            if better {
                best = Some((j, h));
            }
        }
        let (j, h) = best.expect("at least one unobserved patch");
        observed[j] = true;
        order.push(j);
        prefix_entropies.push(h);
    }
    Ok(GreedyOrder {
        order,
        prefix_entropies,
    })
}
