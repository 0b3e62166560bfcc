//! The modified Jacobian of the cumulant parametrization and its generic rank.
//!
//! For order `n` the column of edge `α -> β` is
//! `Σ_k A^{⊗(k-1)} ⊗ E_{βα} ⊗ A^{⊗(n-k)} vec(T_n)`, the Jacobian of `vec(T_n)`
//! premultiplied by `I - A^{⊗n}`. Noise columns are unit vectors on diagonal rows,
//! so local identifiability reduces to the rank of the off-diagonal edge block.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::graph::DirectedGraph;
use crate::linalg::{numeric_rank, RankInfo, RankPolicy};
use crate::lyapunov::{sample_noise, sample_stable_matrix, solve_cumulant_with, LyapunovError, ParameterMatrix, SolveMethod};
use crate::tensor::{multisets, DiagonalCumulant, SymmetricTensor};

/// `J_2` entry for row `(i, j)` and edge `α -> β`.
pub fn j2_entry(a: &DMatrix<f64>, s: &SymmetricTensor, [i, j]: [usize; 2], alpha: usize, beta: usize) -> f64 {
    let p = a.nrows();
    let mut v = 0.0;
    if j == beta {
        v += (0..p).map(|l| a[(i, l)] * s.get(&[l, alpha])).sum::<f64>();
    }
    if i == beta {
        v += (0..p).map(|k| a[(j, k)] * s.get(&[k, alpha])).sum::<f64>();
    }
    v
}

/// `J_3` entry for row `(i, j, k)` and edge `α -> β`.
pub fn j3_entry(a: &DMatrix<f64>, t: &SymmetricTensor, [i, j, k]: [usize; 3], alpha: usize, beta: usize) -> f64 {
    let p = a.nrows();
    let pair = |x: usize, y: usize, slot: usize| -> f64 {
        let mut sum = 0.0;
        for m in 0..p {
            for n in 0..p {
                let full = match slot {
                    0 => [alpha, m, n],
                    1 => [m, alpha, n],
                    _ => [m, n, alpha],
                };
                sum += a[(x, m)] * a[(y, n)] * t.get(&full);
            }
        }
        sum
    };
    let mut v = 0.0;
    if i == beta {
        v += pair(j, k, 0);
    }
    if j == beta {
        v += pair(i, k, 1);
    }
    if k == beta {
        v += pair(i, j, 2);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JacobianRow {
    pub order: usize,
    pub index: Vec<usize>,
    pub diagonal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JacobianColumn {
    Edge { from: usize, to: usize },
    Omega { order: usize, vertex: usize },
}

/// Rows drawn from one cumulant order; `None` takes every multiset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OrderRows {
    pub order: usize,
    pub indices: Option<Vec<Vec<usize>>>,
}

impl OrderRows {
    pub fn all(order: usize) -> Self {
        Self { order, indices: None }
    }

    fn resolve(&self, p: usize) -> Vec<Vec<usize>> {
        match &self.indices {
            None => multisets(p, self.order),
            Some(list) => list
                .iter()
                .map(|idx| {
                    let mut s = idx.clone();
                    s.sort_unstable();
                    s
                })
                .collect(),
        }
    }
}

pub fn full_orders(orders: &[usize]) -> Vec<OrderRows> {
    orders.iter().map(|&n| OrderRows::all(n)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModifiedJacobian {
    pub rows: Vec<JacobianRow>,
    pub columns: Vec<JacobianColumn>,
    #[serde(serialize_with = "serialize_rows")]
    pub matrix: DMatrix<f64>,
    pub orders: Vec<usize>,
}

fn serialize_rows<S: serde::Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    rows.serialize(ser)
}

impl ModifiedJacobian {
    pub fn edge_columns(&self) -> usize {
        self.columns.iter().filter(|c| matches!(c, JacobianColumn::Edge { .. })).count()
    }

    /// Off-diagonal rows restricted to edge columns.
    pub fn offdiag_block(&self) -> DMatrix<f64> {
        let keep: Vec<usize> = (0..self.rows.len()).filter(|&r| !self.rows[r].diagonal).collect();
        let e = self.edge_columns();
        DMatrix::from_fn(keep.len(), e, |r, c| self.matrix[(keep[r], c)])
    }
}

/// Assembles the modified Jacobian at the point `(a, noise)`. Each requested order
/// needs a noise cumulant of that order; noise columns are added for every vertex
/// whose diagonal row is present.
pub fn build_modified_jacobian(
    a: &ParameterMatrix,
    noise: &[DiagonalCumulant],
    rows: &[OrderRows],
) -> Result<ModifiedJacobian, LyapunovError> {
    let p = a.p();
    let m = a.matrix();
    let edges = a.graph().edges();
    let mut out_rows = Vec::new();
    let mut blocks: Vec<Vec<f64>> = Vec::new();
    let mut omega_cols = Vec::new();
    for spec in rows {
        let n = spec.order;
        if n < 2 {
            return Err(LyapunovError::DimensionMismatch(format!("order {n} has no Jacobian rows")));
        }
        let omega = noise
            .iter()
            .find(|w| w.order == n)
            .ok_or_else(|| LyapunovError::DimensionMismatch(format!("no noise cumulant of order {n}")))?;
        let t = solve_cumulant_with(a, omega, SolveMethod::Symmetric)?.tensor;
        // u[α] = T(α, ·, ..., ·) with A applied in the remaining modes
        let u: Vec<SymmetricTensor> = (0..p)
            .map(|alpha| {
                SymmetricTensor::from_fn(p, n - 1, |idx| {
                    let mut full = Vec::with_capacity(n);
                    full.push(alpha);
                    full.extend_from_slice(idx);
                    t.get(&full)
                })
                .transform(m)
            })
            .collect();
        for idx in spec.resolve(p) {
            let diagonal = idx.iter().all(|&v| v == idx[0]);
            let row: Vec<f64> = edges
                .iter()
                .map(|&(alpha, beta)| {
                    let count = idx.iter().filter(|&&v| v == beta).count();
                    if count == 0 {
                        return 0.0;
                    }
                    let pos = idx.iter().position(|&v| v == beta).unwrap();
                    let mut rest = idx.clone();
                    rest.remove(pos);
                    count as f64 * u[alpha].get(&rest)
                })
                .collect();
            if diagonal {
                omega_cols.push(JacobianColumn::Omega { order: n, vertex: idx[0] });
            }
            blocks.push(row);
            out_rows.push(JacobianRow { order: n, index: idx, diagonal });
        }
    }
    let mut columns: Vec<JacobianColumn> = edges.iter().map(|&(from, to)| JacobianColumn::Edge { from, to }).collect();
    let e = columns.len();
    columns.extend(omega_cols.iter().copied());
    let matrix = DMatrix::from_fn(out_rows.len(), columns.len(), |r, c| {
        if c < e {
            return blocks[r][c];
        }
        let JacobianColumn::Omega { order, vertex } = columns[c] else { unreachable!() };
        let row = &out_rows[r];
        if row.diagonal && row.order == order && row.index[0] == vertex {
            1.0
        } else {
            0.0
        }
    });
    let mut orders: Vec<usize> = rows.iter().map(|r| r.order).collect();
    orders.dedup();
    Ok(ModifiedJacobian { rows: out_rows, columns, matrix, orders })
}

pub fn offdiag_rank(mj: &ModifiedJacobian, policy: RankPolicy) -> RankInfo {
    numeric_rank(&mj.offdiag_block(), policy)
}

pub fn full_rank(mj: &ModifiedJacobian, policy: RankPolicy) -> RankInfo {
    numeric_rank(&mj.matrix, policy)
}

/// Vertex pairs forming a component made of the two-cycle with or without loops.
pub fn two_cycle_components(g: &DirectedGraph) -> Vec<(usize, usize)> {
    g.components()
        .into_iter()
        .filter_map(|c| match c[..] {
            [i, j] if g.has_edge(i, j) && g.has_edge(j, i) => Some((i, j)),
            _ => None,
        })
        .collect()
}

/// Three fourth-order rows per two-cycle component: both diagonals and `(i,i,i,j)`.
pub fn fourth_order_augmentation(g: &DirectedGraph) -> Option<OrderRows> {
    let pairs = two_cycle_components(g);
    if pairs.is_empty() {
        return None;
    }
    let indices = pairs.iter().flat_map(|&(i, j)| [vec![i; 4], vec![j; 4], vec![i, i, i, j]]).collect();
    Some(OrderRows { order: 4, indices: Some(indices) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRank {
    pub seed: u64,
    pub radius: f64,
    pub rank: usize,
    pub gap: f64,
    pub top_singular_value: f64,
    pub bottom_singular_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankSummary {
    pub edges: usize,
    pub offdiag_rows: usize,
    pub trials: Vec<TrialRank>,
    /// Maximum over trials, the estimate of the generic rank.
    pub max_rank: usize,
    pub unanimous: bool,
    pub min_gap: f64,
}

impl RankSummary {
    pub fn deficiency(&self) -> usize {
        self.edges - self.max_rank
    }

    /// Deficiency seen on every trial with a clear singular-value gap.
    pub fn structural(&self) -> bool {
        self.unanimous && self.min_gap >= STRUCTURAL_GAP
    }
}

/// Singular-value gap required before a deficiency counts as structural.
pub const STRUCTURAL_GAP: f64 = 1e6;

const TRIAL_RADII: [f64; 2] = [0.5, 0.85];

/// Off-diagonal rank at `trials` random stable points; trial `k` uses seed
/// `seed + k` and alternates between two spectral radii. Trials run on the
/// current rayon pool.
pub fn rank_trials(g: &DirectedGraph, rows: &[OrderRows], trials: usize, seed: u64, policy: RankPolicy) -> RankSummary {
    assert!(trials >= 1, "need at least one trial");
    let run = |k: usize| {
        let s = seed.wrapping_add(k as u64);
        let radius = TRIAL_RADII[k % TRIAL_RADII.len()];
        let a = sample_stable_matrix(g, s, radius);
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x9e37_79b9_7f4a_7c15);
        let noise: Vec<DiagonalCumulant> = (2..=4).map(|n| sample_noise(g.p(), n, &mut rng)).collect();
        let mj = build_modified_jacobian(&a, &noise, rows).expect("sampled matrices are stable");
        let block = mj.offdiag_block();
        let info = numeric_rank(&block, policy);
        let trial = TrialRank {
            seed: s,
            radius,
            rank: info.rank,
            gap: info.gap(),
            top_singular_value: info.singular_values.first().copied().unwrap_or(0.0),
            bottom_singular_value: info.singular_values.last().copied().unwrap_or(0.0),
        };
        (trial, block.nrows())
    };
    // trials are independently seeded, so the parallel order does not matter
    let results: Vec<(TrialRank, usize)> = (0..trials).into_par_iter().map(run).collect();
    let offdiag_rows = results[0].1;
    let out: Vec<TrialRank> = results.into_iter().map(|(t, _)| t).collect();
    let max_rank = out.iter().map(|t| t.rank).max().unwrap_or(0);
    let unanimous = out.iter().all(|t| t.rank == max_rank);
    let min_gap = out.iter().map(|t| t.gap).fold(f64::INFINITY, f64::min);
    RankSummary { edges: g.edge_count(), offdiag_rows, trials: out, max_rank, unanimous, min_gap }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalVerdict {
    LocallyIdentifiable,
    RankDeficient,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalIdReport {
    pub edges: usize,
    pub base: RankSummary,
    /// Present when the base orders fell short and the graph has a two-cycle component.
    pub augmented: Option<RankSummary>,
    pub augmentation_rows: Vec<Vec<usize>>,
    pub verdict: LocalVerdict,
    pub deficiency: usize,
    pub structural: bool,
}

/// Local identifiability from second- and third-order cumulants, escalating to
/// three fourth-order rows per two-cycle component when those fall short.
pub fn local_identifiability_verdict(g: &DirectedGraph, trials: usize, seed: u64, policy: RankPolicy) -> LocalIdReport {
    let base = rank_trials(g, &full_orders(&[2, 3]), trials, seed, policy);
    let mut augmented = None;
    let mut augmentation_rows = Vec::new();
    if base.deficiency() > 0 {
        if let Some(extra) = fourth_order_augmentation(g) {
            augmentation_rows = extra.indices.clone().unwrap_or_default();
            let mut rows = full_orders(&[2, 3]);
            rows.push(extra);
            augmented = Some(rank_trials(g, &rows, trials, seed, policy));
        }
    }
    let last = augmented.as_ref().unwrap_or(&base);
    let deficiency = last.deficiency();
    LocalIdReport {
        edges: g.edge_count(),
        verdict: if deficiency == 0 { LocalVerdict::LocallyIdentifiable } else { LocalVerdict::RankDeficient },
        deficiency,
        structural: deficiency > 0 && last.structural(),
        augmentation_rows,
        augmented,
        base,
    }
}
