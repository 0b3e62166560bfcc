//! Recovering `A` and the noise cumulants from the cumulant stack `(S, T, R)`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::graph::DirectedGraph;
use crate::linalg::{numeric_rank, RankPolicy};
use crate::lyapunov::{recover_noise_matrix, solve_unchecked, spectral_radius, ParameterMatrix, SolveMethod, STABILITY_MARGIN};
use crate::tensor::{multisets, DiagonalCumulant, SymmetricTensor, TensorDump, TensorDumpError};

/// Covariance, third and optionally fourth cumulant of one process.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CumulantStack {
    pub s: SymmetricTensor,
    pub t: SymmetricTensor,
    pub r: Option<SymmetricTensor>,
}

impl CumulantStack {
    pub fn new(s: SymmetricTensor, t: SymmetricTensor, r: Option<SymmetricTensor>) -> Result<Self, IdentifyError> {
        let p = s.p();
        let orders_ok = s.order() == 2 && t.order() == 3 && r.as_ref().is_none_or(|r| r.order() == 4);
        let dims_ok = t.p() == p && r.as_ref().is_none_or(|r| r.p() == p);
        if !orders_ok || !dims_ok {
            return Err(IdentifyError::DimensionMismatch("stack needs orders 2, 3, 4 on a common p".into()));
        }
        Ok(Self { s, t, r })
    }

    /// Solves the Lyapunov equations for each supplied noise cumulant (orders 2, 3
    /// and optionally 4).
    pub fn forward(a: &ParameterMatrix, noise: &[DiagonalCumulant]) -> Result<Self, crate::LyapunovError> {
        let solve = |order: usize| -> Result<Option<SymmetricTensor>, crate::LyapunovError> {
            noise
                .iter()
                .find(|w| w.order == order)
                .map(|w| crate::solve_cumulant(a, w).map(|s| s.tensor))
                .transpose()
        };
        let s = solve(2)?.ok_or_else(|| crate::LyapunovError::DimensionMismatch("missing order-2 noise".into()))?;
        let t = solve(3)?.ok_or_else(|| crate::LyapunovError::DimensionMismatch("missing order-3 noise".into()))?;
        Ok(Self { s, t, r: solve(4)? })
    }

    pub fn p(&self) -> usize {
        self.s.p()
    }

    fn tensor(&self, order: usize) -> Option<&SymmetricTensor> {
        match order {
            2 => Some(&self.s),
            3 => Some(&self.t),
            4 => self.r.as_ref(),
            _ => None,
        }
    }

    pub fn to_dump(&self) -> StackDump {
        StackDump { s: self.s.to_dump(), t: self.t.to_dump(), r: self.r.as_ref().map(SymmetricTensor::to_dump) }
    }

    pub fn from_dump(dump: &StackDump) -> Result<Self, IdentifyError> {
        let conv = |d: &TensorDump| SymmetricTensor::from_dump(d).map_err(IdentifyError::from);
        Self::new(conv(&dump.s)?, conv(&dump.t)?, dump.r.as_ref().map(conv).transpose()?)
    }
}

/// JSON form of a stack: `{"s": {...}, "t": {...}, "r": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackDump {
    pub s: TensorDump,
    pub t: TensorDump,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<TensorDump>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IdentifyError {
    #[error("denominator of {quantity} is {value:e}, at or below the degeneracy threshold")]
    DegenerateDenominator { quantity: &'static str, value: f64 },
    #[error("block for vertex {vertex} has numeric rank {rank} of {size} (condition {condition:e})")]
    SingularBlock { vertex: usize, condition: f64, rank: usize, size: usize },
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Dump(#[from] TensorDumpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentifyOptions {
    /// Closed-form denominator factors at or below this fraction of the terms they
    /// are built from are degenerate.
    pub degeneracy: f64,
    /// Largest accepted relative forward residual.
    pub residual_tol: f64,
    pub rank: RankPolicy,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self { degeneracy: 1e-12, residual_tol: 1e-8, rank: RankPolicy::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DagAllLoops,
    Polytree,
    TwoNode,
    Jacobian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Recovered,
    Degenerate,
    HypothesisViolated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockInfo {
    pub vertex: usize,
    pub size: usize,
    pub rank: usize,
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentifiabilityReport {
    pub method: Method,
    /// Recovered matrix, row `j` holding the weights of edges into `j`.
    pub a: Option<Vec<Vec<f64>>>,
    pub noise: Vec<DiagonalCumulant>,
    /// `(order, relative forward residual)`.
    pub residuals: Vec<(usize, f64)>,
    pub blocks: Vec<BlockInfo>,
    pub notes: Vec<String>,
    pub verdict: Verdict,
}

impl IdentifiabilityReport {
    pub fn matrix(&self) -> Option<DMatrix<f64>> {
        let rows = self.a.as_ref()?;
        let p = rows.len();
        Some(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, &(_, r)| m.max(r))
    }

    /// Report for a run that stopped with an error.
    pub fn failed(method: Method, err: &IdentifyError) -> Self {
        let verdict = match err {
            IdentifyError::HypothesisViolated(_) | IdentifyError::DimensionMismatch(_) | IdentifyError::Dump(_) => {
                Verdict::HypothesisViolated
            }
            _ => Verdict::Degenerate,
        };
        let blocks = match *err {
            IdentifyError::SingularBlock { vertex, condition, rank, size } => vec![BlockInfo { vertex, size, rank, condition }],
            _ => Vec::new(),
        };
        Self { method, a: None, noise: Vec::new(), residuals: Vec::new(), blocks, notes: vec![err.to_string()], verdict }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TwoNodeVariant {
    BothLoops,
    SourceLoopOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoNodeSolution {
    pub a00: f64,
    pub a10: f64,
    pub a11: Option<f64>,
    pub noise: Vec<DiagonalCumulant>,
}

/// Rejects `value` when it is non-finite or at most `tol` times `scale`, the
/// magnitude of the terms it is built from.
fn guard(quantity: &'static str, value: f64, scale: f64, tol: f64) -> Result<f64, IdentifyError> {
    if value.abs() <= tol * scale || !value.is_finite() {
        Err(IdentifyError::DegenerateDenominator { quantity, value })
    } else {
        Ok(value)
    }
}

struct PairMoments {
    s00: f64,
    s01: f64,
    t000: f64,
    t001: f64,
    r0000: Option<f64>,
    r0001: Option<f64>,
}

impl PairMoments {
    fn of(stack: &CumulantStack, e: usize, c: usize) -> Self {
        Self {
            s00: stack.s.get(&[e, e]),
            s01: stack.s.get(&[e, c]),
            t000: stack.t.get(&[e, e, e]),
            t001: stack.t.get(&[e, e, c]),
            r0000: stack.r.as_ref().map(|r| r.get(&[e, e, e, e])),
            r0001: stack.r.as_ref().map(|r| r.get(&[e, e, e, c])),
        }
    }
}

/// `(a00, a10, a11)` for `0 -> 1` with self-loops at both vertices.
fn both_loops(m: &PairMoments, tol: f64) -> Result<(f64, f64, f64), IdentifyError> {
    let (s00, s01, t000, t001) = (m.s00, m.s01, m.t000, m.t001);
    let (Some(r0000), Some(r0001)) = (m.r0000, m.r0001) else {
        return Err(IdentifyError::HypothesisViolated("fourth-order cumulants are required".into()));
    };
    let k = r0000 * t001 - r0001 * t000;
    let g = s00 * t001 - s01 * t000;
    guard("s01", s01, s00.abs(), tol)?;
    guard("r0001", r0001, r0000.abs().max(r0001.abs()), tol)?;
    guard("r0000 t001 - r0001 t000", k, (r0000 * t001).abs().max((r0001 * t000).abs()), tol)?;
    guard("s00 t001 - s01 t000", g, (s00 * t001).abs().max((s01 * t000).abs()), tol)?;
    let a00 = -r0001 * g / (s01 * k);
    let g3 = r0001 * r0001 * g * g * g;
    let a10 = -s01 * s01 * t001 * (r0000 * s01 * t001 + r0001 * s00 * t001 - 2.0 * r0001 * s01 * t000) * k / g3;
    let a11 = k * s01 * s01 * (r0000 * s00 * t001 * t001 - r0001 * s01 * t000 * t000) / g3;
    Ok((a00, a10, a11))
}

/// `(a00, a10)` for `0 -> 1` with a self-loop only at the source.
fn source_loop(m: &PairMoments, tol: f64) -> Result<(f64, f64), IdentifyError> {
    guard("s00", m.s00, 1.0, tol)?;
    guard("t000", m.t000, 1.0, tol)?;
    guard("s01", m.s01, m.s00.abs(), tol)?;
    guard("t001", m.t001, m.t000.abs(), tol)?;
    let a00 = m.s00 * m.t001 / (m.s01 * m.t000);
    let a10 = m.s01 * m.s01 * m.t000 / (m.s00 * m.s00 * m.t001);
    Ok((a00, a10))
}

/// Closed-form recovery on two vertices with the edge `0 -> 1`.
pub fn identify_two_node(
    stack: &CumulantStack,
    variant: TwoNodeVariant,
    opts: &IdentifyOptions,
) -> Result<TwoNodeSolution, IdentifyError> {
    if stack.p() != 2 {
        return Err(IdentifyError::DimensionMismatch(format!("two-node recovery needs p = 2, got {}", stack.p())));
    }
    let m = PairMoments::of(stack, 0, 1);
    match variant {
        TwoNodeVariant::BothLoops => {
            let (a00, a10, a11) = both_loops(&m, opts.degeneracy)?;
            let a = DMatrix::from_row_slice(2, 2, &[a00, 0.0, a10, a11]);
            Ok(TwoNodeSolution { a00, a10, a11: Some(a11), noise: recover_all(stack, &a) })
        }
        TwoNodeVariant::SourceLoopOnly => {
            let (a00, a10) = source_loop(&m, opts.degeneracy)?;
            let s11 = stack.s.get(&[1, 1]);
            let t111 = stack.t.get(&[1, 1, 1]);
            let mut noise = vec![
                DiagonalCumulant::new(2, vec![m.s00 * (1.0 - a00 * a00), s11 - a10 * a10 * m.s00]),
                DiagonalCumulant::new(3, vec![m.t000 * (1.0 - a00.powi(3)), t111 - a10.powi(3) * m.t000]),
            ];
            if let Some(r) = &stack.r {
                let a = DMatrix::from_row_slice(2, 2, &[a00, 0.0, a10, 0.0]);
                noise.push(recover_noise_matrix(r, &a).omega);
            }
            Ok(TwoNodeSolution { a00, a10, a11: None, noise })
        }
    }
}

/// One root of the `(S, T)` equations for `0 -> 1` with both self-loops.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoNodeCandidate {
    pub a00: f64,
    pub a10: f64,
    pub a11: f64,
    pub spectral_radius: f64,
    pub stable: bool,
}

/// Experimental: every real solution of the second- and third-order equations
/// for the two-vertex graph with both self-loops, each tagged with its stability.
/// Nothing else in the crate relies on the stable root being unique.
pub fn two_node_candidates(stack: &CumulantStack) -> Vec<TwoNodeCandidate> {
    let (s00, s01) = (stack.s.get(&[0, 0]), stack.s.get(&[0, 1]));
    let (t000, t001, t011) = (stack.t.get(&[0, 0, 0]), stack.t.get(&[0, 0, 1]), stack.t.get(&[0, 1, 1]));
    if s00 == 0.0 || t000 == 0.0 {
        return Vec::new();
    }
    let (rho, tau, theta) = (s01 / s00, t001 / t000, t011 / t000);
    let d = tau - rho;
    // θ(D²u³ - ρ²u² + 2τρu - τ²) - ρτ(u - 1)((2τ² - ρτ) - ρτu), coefficients low to high
    let k0 = 2.0 * tau * tau - rho * tau;
    let k1 = -rho * tau;
    let cubic = [
        -theta * tau * tau + rho * tau * k0,
        2.0 * theta * tau * rho - rho * tau * (k0 - k1),
        -theta * rho * rho - rho * tau * k1,
        theta * d * d,
    ];
    // u = 1 is always a root; divide it out
    let q2 = cubic[3];
    let q1 = cubic[2] + q2;
    let q0 = cubic[1] + q1;
    let roots: Vec<f64> = if q2.abs() > 1e-300 {
        let disc = q1 * q1 - 4.0 * q2 * q0;
        if disc < 0.0 {
            Vec::new()
        } else {
            let sq = disc.sqrt();
            vec![(-q1 + sq) / (2.0 * q2), (-q1 - sq) / (2.0 * q2)]
        }
    } else if q1.abs() > 1e-300 {
        vec![-q0 / q1]
    } else {
        Vec::new()
    };
    roots
        .into_iter()
        .filter(|&u| u != 0.0 && d != 0.0 && (u - 1.0).abs() > 1e-12)
        .map(|u| {
            let a11 = (tau - u * rho) / (u * u * d);
            let a10 = rho * tau * (u - 1.0) / (u * u * d);
            let radius = u.abs().max(a11.abs());
            TwoNodeCandidate { a00: u, a10, a11, spectral_radius: radius, stable: radius < 1.0 - STABILITY_MARGIN }
        })
        .collect()
}

fn recover_all(stack: &CumulantStack, a: &DMatrix<f64>) -> Vec<DiagonalCumulant> {
    (2..=4).filter_map(|n| stack.tensor(n)).map(|t| recover_noise_matrix(t, a).omega).collect()
}

fn ancestors(g: &DirectedGraph, v: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([v]);
    let mut stack = vec![v];
    while let Some(u) = stack.pop() {
        for &q in g.parents(u) {
            if seen.insert(q) {
                stack.push(q);
            }
        }
    }
    seen
}

fn min_source_ancestor(g: &DirectedGraph, v: usize) -> usize {
    ancestors(g, v)
        .into_iter()
        .find(|&u| g.parents(u).is_empty())
        .expect("every vertex of a DAG has a source ancestor")
}

struct Solver<'a> {
    g: &'a DirectedGraph,
    stack: &'a CumulantStack,
    opts: &'a IdentifyOptions,
    order: Vec<usize>,
    a: DMatrix<f64>,
    blocks: Vec<BlockInfo>,
    notes: Vec<String>,
}

impl<'a> Solver<'a> {
    fn new(g: &'a DirectedGraph, stack: &'a CumulantStack, opts: &'a IdentifyOptions) -> Result<Self, IdentifyError> {
        if stack.p() != g.p() {
            return Err(IdentifyError::DimensionMismatch(format!("graph has p = {}, stack has p = {}", g.p(), stack.p())));
        }
        let order = g.topological_order().map_err(|_| IdentifyError::HypothesisViolated("graph has a directed cycle".into()))?;
        if g.p() < 2 {
            return Err(IdentifyError::HypothesisViolated("need at least two vertices".into()));
        }
        let isolated = g.isolated_vertices();
        if !isolated.is_empty() {
            return Err(IdentifyError::HypothesisViolated(format!(
                "isolated vertices {isolated:?} leave one more parameter than equations"
            )));
        }
        let p = g.p();
        Ok(Self { g, stack, opts, order, a: DMatrix::zeros(p, p), blocks: Vec::new(), notes: Vec::new() })
    }

    fn solve_source(&mut self, e: usize) -> Result<(), IdentifyError> {
        if !self.g.has_self_loop(e) {
            return Err(IdentifyError::HypothesisViolated(format!("source {e} has no self-loop")));
        }
        let pos = |v: usize| self.order.iter().position(|&x| x == v).unwrap();
        let c = *self.g.children(e).iter().min_by_key(|&&c| pos(c)).expect("sources of non-isolated vertices have children");
        let reach = |from: usize| {
            let mut seen = BTreeSet::from([from]);
            let mut st = vec![from];
            while let Some(u) = st.pop() {
                for &w in self.g.children(u) {
                    if seen.insert(w) {
                        st.push(w);
                    }
                }
            }
            seen
        };
        let from_e = reach(e);
        let via: Vec<usize> = self.g.parents(c).iter().copied().filter(|q| from_e.contains(q)).collect();
        if via != [e] {
            return Err(IdentifyError::HypothesisViolated(format!(
                "child {c} of source {e} is also reached through {via:?}"
            )));
        }
        let m = PairMoments::of(self.stack, e, c);
        let a_ee = if self.g.has_self_loop(c) {
            if m.r0000.is_none() {
                return Err(IdentifyError::HypothesisViolated(format!(
                    "fourth-order cumulants are required at source {e} (child {c} has a self-loop)"
                )));
            }
            both_loops(&m, self.opts.degeneracy)?.0
        } else {
            source_loop(&m, self.opts.degeneracy)?.0
        };
        self.a[(e, e)] = a_ee;
        Ok(())
    }

    fn solve_block(&mut self, j: usize, rows: DMatrix<f64>, rhs: DVector<f64>, unknowns: &[usize]) -> Result<(), IdentifyError> {
        let size = unknowns.len();
        let info = numeric_rank(&rows, self.opts.rank);
        let smallest = info.singular_values.last().copied().unwrap_or(0.0);
        let condition = info.singular_values.first().copied().unwrap_or(0.0) / smallest;
        if info.rank < size {
            return Err(IdentifyError::SingularBlock { vertex: j, condition, rank: info.rank, size });
        }
        let x = rows.lu().solve(&rhs).ok_or(IdentifyError::SingularBlock { vertex: j, condition, rank: info.rank, size })?;
        for (&l, &v) in unknowns.iter().zip(x.iter()) {
            self.a[(j, l)] = v;
        }
        self.blocks.push(BlockInfo { vertex: j, size, rank: info.rank, condition });
        Ok(())
    }

    fn unknowns(&self, j: usize) -> Vec<usize> {
        let mut u = self.g.parents(j).to_vec();
        if self.g.has_self_loop(j) {
            u.push(j);
        }
        u
    }

    fn t_row(&self, e: usize, j: usize, unknowns: &[usize]) -> (Vec<f64>, f64) {
        let a2 = self.a[(e, e)].powi(2);
        (unknowns.iter().map(|&l| a2 * self.stack.t.get(&[e, e, l])).collect(), self.stack.t.get(&[e, e, j]))
    }

    fn finish(self, method: Method) -> IdentifiabilityReport {
        let noise = recover_all(self.stack, &self.a);
        let mut notes = self.notes;
        let mut residuals = Vec::new();
        let radius = spectral_radius(&self.a);
        let mut ok = true;
        if radius >= 1.0 - STABILITY_MARGIN {
            notes.push(format!("recovered matrix has spectral radius {radius}"));
            ok = false;
        } else {
            for omega in &noise {
                let target = self.stack.tensor(omega.order).expect("noise recovered from this order");
                match solve_unchecked(&self.a, omega, SolveMethod::Auto) {
                    Ok(sol) => residuals.push((omega.order, sol.tensor.rel_diff(target))),
                    Err(_) => {
                        ok = false;
                        residuals.push((omega.order, f64::INFINITY));
                    }
                }
            }
        }
        let worst = residuals.iter().fold(0.0f64, |m, &(_, r)| m.max(r));
        if worst > self.opts.residual_tol {
            notes.push(format!("forward residual {worst:e} exceeds {:e}", self.opts.residual_tol));
            ok = false;
        }
        let p = self.a.nrows();
        IdentifiabilityReport {
            method,
            a: Some((0..p).map(|i| self.a.row(i).iter().copied().collect()).collect()),
            noise,
            residuals,
            blocks: self.blocks,
            notes,
            verdict: if ok { Verdict::Recovered } else { Verdict::Degenerate },
        }
    }
}

/// Recovery for DAGs with a self-loop at every vertex.
///
/// Sources use the two-vertex closed form with their first child; every other
/// vertex `j` solves one linear block built from `s_{ij}` for its parents `i` and
/// `t_{eej}` for its smallest source ancestor `e`. Vertices without a self-loop are
/// processed the same way with the self-loop unknown dropped, which is outside the
/// guarantee and may end in a singular block.
pub fn identify_dag_all_loops(
    g: &DirectedGraph,
    stack: &CumulantStack,
    opts: &IdentifyOptions,
) -> Result<IdentifiabilityReport, IdentifyError> {
    let mut sv = Solver::new(g, stack, opts)?;
    if stack.r.is_none() {
        return Err(IdentifyError::HypothesisViolated("fourth-order cumulants are required".into()));
    }
    let missing: Vec<usize> = (0..g.p()).filter(|&v| !g.has_self_loop(v)).collect();
    if !missing.is_empty() {
        sv.notes.push(format!("vertices {missing:?} have no self-loop; recovery is not guaranteed"));
    }
    for j in sv.order.clone() {
        if g.parents(j).is_empty() {
            sv.solve_source(j)?;
            continue;
        }
        let unknowns = sv.unknowns(j);
        let parents = g.parents(j).to_vec();
        let a_s = &sv.a * DMatrix::from_fn(g.p(), g.p(), |k, l| stack.s.get(&[k, l]));
        let mut rows: Vec<Vec<f64>> = parents.iter().map(|&i| unknowns.iter().map(|&l| a_s[(i, l)]).collect()).collect();
        let mut rhs: Vec<f64> = parents.iter().map(|&i| stack.s.get(&[i, j])).collect();
        if g.has_self_loop(j) {
            let (row, r) = sv.t_row(min_source_ancestor(g, j), j, &unknowns);
            rows.push(row);
            rhs.push(r);
        }
        let n = unknowns.len();
        let m = DMatrix::from_fn(n, n, |r, c| rows[r][c]);
        sv.solve_block(j, m, DVector::from_vec(rhs), &unknowns)?;
    }
    Ok(sv.finish(Method::DagAllLoops))
}

/// Recovery for polytrees (forests of them) with self-loops at all sources.
pub fn identify_polytree(
    g: &DirectedGraph,
    stack: &CumulantStack,
    opts: &IdentifyOptions,
) -> Result<IdentifiabilityReport, IdentifyError> {
    if !g.is_polyforest() {
        return Err(IdentifyError::HypothesisViolated("skeleton is not a forest".into()));
    }
    let mut sv = Solver::new(g, stack, opts)?;
    let unlooped: Vec<usize> = g.sources().into_iter().filter(|&v| !g.has_self_loop(v)).collect();
    if !unlooped.is_empty() {
        return Err(IdentifyError::HypothesisViolated(format!(
            "sources {unlooped:?} have no self-loop, so their mixed cumulants vanish"
        )));
    }
    for j in sv.order.clone() {
        if g.parents(j).is_empty() {
            sv.solve_source(j)?;
            continue;
        }
        let unknowns = sv.unknowns(j);
        let tops: Vec<usize> = g.parents(j).iter().map(|&i| min_source_ancestor(g, i)).collect();
        let mut rows: Vec<Vec<f64>> = tops
            .iter()
            .map(|&e| unknowns.iter().map(|&l| sv.a[(e, e)] * stack.s.get(&[e, l])).collect())
            .collect();
        let mut rhs: Vec<f64> = tops.iter().map(|&e| stack.s.get(&[e, j])).collect();
        if g.has_self_loop(j) {
            let (row, r) = sv.t_row(tops[0], j, &unknowns);
            rows.push(row);
            rhs.push(r);
        }
        let n = unknowns.len();
        let m = DMatrix::from_fn(n, n, |r, c| rows[r][c]);
        sv.solve_block(j, m, DVector::from_vec(rhs), &unknowns)?;
    }
    Ok(sv.finish(Method::Polytree))
}

/// Constructive method whose hypotheses the graph satisfies, if any.
pub fn select_method(g: &DirectedGraph) -> Option<Method> {
    let base = g.p() >= 2 && g.is_dag() && g.isolated_vertices().is_empty();
    if !base {
        return None;
    }
    if g.has_all_self_loops() {
        Some(Method::DagAllLoops)
    } else if g.is_polyforest() && g.sources().iter().all(|&v| g.has_self_loop(v)) {
        Some(Method::Polytree)
    } else {
        None
    }
}

/// Runs [`select_method`]'s choice and folds errors into the report's verdict.
pub fn identify_auto(g: &DirectedGraph, stack: &CumulantStack, opts: &IdentifyOptions) -> Option<IdentifiabilityReport> {
    let method = select_method(g)?;
    let result = match method {
        Method::DagAllLoops => identify_dag_all_loops(g, stack, opts),
        _ => identify_polytree(g, stack, opts),
    };
    Some(result.unwrap_or_else(|e| IdentifiabilityReport::failed(method, &e)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquationCount {
    pub params: usize,
    pub equations: usize,
    /// `(order, entries, entries without an equitrek)`.
    pub per_order: Vec<(usize, usize, usize)>,
    /// `params <= equations`; a violation rules out generic identifiability.
    pub bound_satisfied: bool,
}

/// Parameters `|E| + p (n_max - 1)` against cumulant entries of orders
/// `2..=n_max` that are not forced to zero by a missing equitrek.
pub fn count_equations_vs_parameters(g: &DirectedGraph, n_max: usize) -> EquationCount {
    assert!(n_max >= 2, "need at least order 2");
    let p = g.p();
    let params = g.edge_count() + p * (n_max - 1);
    let per_order: Vec<(usize, usize, usize)> = (2..=n_max)
        .map(|n| {
            let all = multisets(p, n);
            let zero = all.iter().filter(|idx| !g.equitrek_exists_among(idx)).count();
            (n, all.len(), zero)
        })
        .collect();
    let equations = per_order.iter().map(|&(_, total, zero)| total - zero).sum();
    EquationCount { params, equations, per_order, bound_satisfied: params <= equations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::{sample_noise, sample_stable_matrix};
    use rand::SeedableRng;

    fn model(p: usize, edges: &[(usize, usize, f64)]) -> ParameterMatrix {
        let g = DirectedGraph::new(p, edges.iter().map(|&(i, j, _)| (i, j))).unwrap();
        ParameterMatrix::from_weights(g, edges).unwrap()
    }

    fn ones(p: usize) -> Vec<DiagonalCumulant> {
        (2..=4).map(|n| DiagonalCumulant::new(n, vec![1.0; p])).collect()
    }

    #[test]
    fn both_loops_closed_form() {
        let a = model(2, &[(0, 0, 0.4), (0, 1, 0.7), (1, 1, 0.3)]);
        let stack = CumulantStack::forward(&a, &ones(2)).unwrap();
        let sol = identify_two_node(&stack, TwoNodeVariant::BothLoops, &IdentifyOptions::default()).unwrap();
        assert!((sol.a00 - 0.4).abs() < 1e-9);
        assert!((sol.a10 - 0.7).abs() < 1e-9);
        assert!((sol.a11.unwrap() - 0.3).abs() < 1e-9);
        for w in &sol.noise {
            assert!(w.w.iter().all(|x| (x - 1.0).abs() < 1e-9));
        }
    }

    #[test]
    fn source_loop_closed_form() {
        let a = model(2, &[(0, 0, 0.5), (0, 1, 1.0)]);
        let noise = vec![DiagonalCumulant::new(2, vec![1.0, 0.5]), DiagonalCumulant::new(3, vec![-0.8, 1.2])];
        let stack = CumulantStack::forward(&a, &noise).unwrap();
        let sol = identify_two_node(&stack, TwoNodeVariant::SourceLoopOnly, &IdentifyOptions::default()).unwrap();
        let (s00, s01) = (stack.s.get(&[0, 0]), stack.s.get(&[0, 1]));
        let (t000, t001) = (stack.t.get(&[0, 0, 0]), stack.t.get(&[0, 0, 1]));
        assert_eq!(sol.a00, s00 * t001 / (s01 * t000));
        assert!((sol.a00 - 0.5).abs() < 1e-12 && (sol.a10 - 1.0).abs() < 1e-12);
        assert!((sol.noise[0].w[1] - 0.5).abs() < 1e-12);
        assert!((sol.noise[1].w[0] + 0.8).abs() < 1e-12);
        assert!(identify_two_node(&stack, TwoNodeVariant::BothLoops, &IdentifyOptions::default()).is_err());
    }

    #[test]
    fn missing_edge_is_degenerate() {
        let a = model(2, &[(0, 0, 0.5), (0, 1, 0.0)]);
        let stack = CumulantStack::forward(&a, &ones(2)).unwrap();
        assert!(matches!(
            identify_two_node(&stack, TwoNodeVariant::SourceLoopOnly, &IdentifyOptions::default()),
            Err(IdentifyError::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn candidates_contain_truth() {
        for (a00, a10, a11) in [(0.4, 0.7, 0.3), (-0.6, 0.5, 0.8), (0.9, -1.2, -0.2)] {
            let a = model(2, &[(0, 0, a00), (0, 1, a10), (1, 1, a11)]);
            let stack = CumulantStack::forward(&a, &ones(2)[..2]).unwrap();
            let cands = two_node_candidates(&stack);
            assert!(
                cands.iter().any(|c| (c.a00 - a00).abs() < 1e-8 && (c.a10 - a10).abs() < 1e-8 && (c.a11 - a11).abs() < 1e-8),
                "{cands:?}"
            );
            assert!(cands.iter().any(|c| c.stable));
        }
    }

    #[test]
    fn dag_round_trip_small() {
        let g = DirectedGraph::new(3, [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]).unwrap();
        let a = sample_stable_matrix(&g, 21, 0.6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let noise: Vec<_> = (2..=4).map(|n| sample_noise(3, n, &mut rng)).collect();
        let stack = CumulantStack::forward(&a, &noise).unwrap();
        let rep = identify_dag_all_loops(&g, &stack, &IdentifyOptions::default()).unwrap();
        assert_eq!(rep.verdict, Verdict::Recovered);
        assert!((rep.matrix().unwrap() - a.matrix()).amax() < 1e-8);
        assert!(rep.max_residual() < 1e-8);
        assert_eq!(rep.blocks.len(), 2);
    }

    #[test]
    fn dag_preconditions() {
        let opts = IdentifyOptions::default();
        let iso = DirectedGraph::new(3, [(0, 0), (1, 1), (2, 2), (0, 1)]).unwrap();
        let a = sample_stable_matrix(&iso, 1, 0.6);
        let stack = CumulantStack::forward(&a, &ones(3)).unwrap();
        assert!(matches!(identify_dag_all_loops(&iso, &stack, &opts), Err(IdentifyError::HypothesisViolated(_))));
        let g = DirectedGraph::new(2, [(0, 0), (1, 1), (0, 1)]).unwrap();
        let a = sample_stable_matrix(&g, 1, 0.6);
        let no_r = CumulantStack::forward(&a, &ones(2)[..2]).unwrap();
        assert!(matches!(identify_dag_all_loops(&g, &no_r, &opts), Err(IdentifyError::HypothesisViolated(_))));
    }

    #[test]
    fn chain_with_end_loops() {
        let g = DirectedGraph::new(3, [(0, 0), (0, 1), (1, 2), (2, 2)]).unwrap();
        let a = sample_stable_matrix(&g, 4, 0.6);
        let stack = CumulantStack::forward(&a, &ones(3)).unwrap();
        let rep = identify_polytree(&g, &stack, &IdentifyOptions::default()).unwrap();
        assert!((rep.matrix().unwrap() - a.matrix()).amax() < 1e-6);
        assert_eq!(select_method(&g), Some(Method::Polytree));
    }

    #[test]
    fn polytree_rejects_unlooped_source() {
        let g = DirectedGraph::new(2, [(0, 1), (1, 1)]).unwrap();
        let a = sample_stable_matrix(&g, 2, 0.6);
        let stack = CumulantStack::forward(&a, &ones(2)).unwrap();
        assert!(matches!(
            identify_polytree(&g, &stack, &IdentifyOptions::default()),
            Err(IdentifyError::HypothesisViolated(_))
        ));
        assert_eq!(select_method(&g), None);
    }

    #[test]
    fn equation_counts() {
        let sink_loop = DirectedGraph::new(2, [(0, 1), (1, 1)]).unwrap();
        let c = count_equations_vs_parameters(&sink_loop, 3);
        assert_eq!((c.params, c.equations, c.bound_satisfied), (6, 4, false));
        let cycle = DirectedGraph::new(2, [(0, 1), (1, 0)]).unwrap();
        for n in 2..=5 {
            let c = count_equations_vs_parameters(&cycle, n);
            assert_eq!((c.params, c.equations), (2 + 2 * (n - 1), 2 * (n - 1)));
        }
        let complete = DirectedGraph::new(2, [(0, 0), (0, 1), (1, 0), (1, 1)]).unwrap();
        let c = count_equations_vs_parameters(&complete, 3);
        assert_eq!((c.params, c.equations, c.bound_satisfied), (8, 7, false));
    }

    #[test]
    fn stack_dump_round_trip() {
        let a = model(2, &[(0, 0, 0.4), (0, 1, 0.7)]);
        let stack = CumulantStack::forward(&a, &ones(2)).unwrap();
        assert_eq!(CumulantStack::from_dump(&stack.to_dump()).unwrap(), stack);
    }
}
