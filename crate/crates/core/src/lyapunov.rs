//! Steady-state cumulants of `X_t = A X_{t-1} + ε_t`.
//!
//! The order-`n` cumulant `T` solves `T = T ×_1 A ... ×_n A + Ω`, where `Ω` is the
//! diagonal noise cumulant.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::DirectedGraph;
use crate::tensor::{multiset_count, multiset_rank, multisets, DiagonalCumulant, SymmetricTensor};

/// A matrix counts as stable when its spectral radius is below `1 - STABILITY_MARGIN`.
pub const STABILITY_MARGIN: f64 = 1e-9;

/// Largest `p^n` solved with the dense Kronecker system under [`SolveMethod::Auto`].
pub const DENSE_SOLVE_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LyapunovError {
    #[error("spectral radius {radius} is not below 1")]
    Unstable { radius: f64 },
    #[error("the linear system is singular")]
    SingularSystem,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("edge {0} -> {1} is not in the graph but carries a nonzero weight")]
    OffPattern(usize, usize),
}

/// Edge weights on a graph, stored as `a[(target, source)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMatrix {
    graph: DirectedGraph,
    a: DMatrix<f64>,
    stable: Option<f64>,
}

impl ParameterMatrix {
    pub fn new(graph: DirectedGraph, a: DMatrix<f64>) -> Result<Self, LyapunovError> {
        let p = graph.p();
        if a.shape() != (p, p) {
            return Err(LyapunovError::DimensionMismatch(format!(
                "graph has {p} vertices but the matrix is {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        for j in 0..p {
            for i in 0..p {
                if a[(j, i)] != 0.0 && !graph.has_edge(i, j) {
                    return Err(LyapunovError::OffPattern(i, j));
                }
            }
        }
        Ok(Self { graph, a, stable: None })
    }

    /// Builds from `(source, target, weight)` triples; unlisted edges get weight zero.
    pub fn from_weights(
        graph: DirectedGraph,
        weights: &[(usize, usize, f64)],
    ) -> Result<Self, LyapunovError> {
        let p = graph.p();
        let mut a = DMatrix::zeros(p, p);
        for &(i, j, w) in weights {
            if i >= p || j >= p {
                return Err(LyapunovError::DimensionMismatch(format!("edge {i} -> {j} with p = {p}")));
            }
            a[(j, i)] = w;
        }
        Self::new(graph, a)
    }

    /// Records the spectral radius, failing unless the matrix is stable.
    pub fn certify(mut self) -> Result<Self, LyapunovError> {
        let radius = spectral_radius(&self.a);
        if radius >= 1.0 - STABILITY_MARGIN {
            return Err(LyapunovError::Unstable { radius });
        }
        self.stable = Some(radius);
        Ok(self)
    }

    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn p(&self) -> usize {
        self.graph.p()
    }

    /// Certified spectral radius, if any.
    pub fn certified_radius(&self) -> Option<f64> {
        self.stable
    }

    /// Weight of the edge `from -> to`.
    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.a[(to, from)]
    }

    /// Edge weights in the graph's edge order.
    pub fn edge_weights(&self) -> Vec<f64> {
        self.graph.edges().iter().map(|&(i, j)| self.a[(j, i)]).collect()
    }

    fn radius(&self) -> f64 {
        self.stable.unwrap_or_else(|| spectral_radius(&self.a))
    }
}

/// Largest eigenvalue modulus; exactly zero for nilpotent patterns.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() || is_nilpotent(a) {
        return 0.0;
    }
    a.complex_eigenvalues().iter().fold(0.0, |m, z| m.max(z.norm()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    /// Dense when `p^n` is at most [`DENSE_SOLVE_LIMIT`], symmetric otherwise.
    #[default]
    Auto,
    /// LU on the full `p^n` Kronecker system, then symmetrised.
    Dense,
    /// LU on the system restricted to symmetric tensors, one unknown per multiset.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CumulantSolution {
    pub tensor: SymmetricTensor,
    /// Largest deviation from permutation symmetry before folding; dense solves only.
    pub symmetry_defect: Option<f64>,
    pub method: SolveMethod,
}

/// Solves the order-`n` Lyapunov equation with [`SolveMethod::Auto`].
pub fn solve_cumulant(
    a: &ParameterMatrix,
    omega: &DiagonalCumulant,
) -> Result<CumulantSolution, LyapunovError> {
    solve_cumulant_with(a, omega, SolveMethod::Auto)
}

pub fn solve_cumulant_with(
    a: &ParameterMatrix,
    omega: &DiagonalCumulant,
    method: SolveMethod,
) -> Result<CumulantSolution, LyapunovError> {
    check_dims(a.p(), omega)?;
    let radius = a.radius();
    if radius >= 1.0 - STABILITY_MARGIN {
        return Err(LyapunovError::Unstable { radius });
    }
    solve_unchecked(a.matrix(), omega, method)
}

fn check_dims(p: usize, omega: &DiagonalCumulant) -> Result<(), LyapunovError> {
    if omega.p() != p {
        return Err(LyapunovError::DimensionMismatch(format!(
            "noise has {} entries but p = {p}",
            omega.p()
        )));
    }
    if omega.order == 0 {
        return Err(LyapunovError::DimensionMismatch("order must be positive".into()));
    }
    Ok(())
}

/// Solve without the stability check; callers guarantee a stable `a`.
pub(crate) fn solve_unchecked(
    a: &DMatrix<f64>,
    omega: &DiagonalCumulant,
    method: SolveMethod,
) -> Result<CumulantSolution, LyapunovError> {
    let p = a.nrows();
    let n = omega.order;
    let method = match method {
        SolveMethod::Auto if p.pow(n as u32) <= DENSE_SOLVE_LIMIT => SolveMethod::Dense,
        SolveMethod::Auto => SolveMethod::Symmetric,
        m => m,
    };
    match method {
        SolveMethod::Dense => {
            let (tensor, defect) = solve_dense(a, omega)?;
            Ok(CumulantSolution { tensor, symmetry_defect: Some(defect), method })
        }
        _ => Ok(CumulantSolution {
            tensor: solve_symmetric(a, omega)?,
            symmetry_defect: None,
            method: SolveMethod::Symmetric,
        }),
    }
}

fn kron_power(a: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut k = a.clone();
    for _ in 1..n {
        k = k.kronecker(a);
    }
    k
}

fn solve_dense(a: &DMatrix<f64>, omega: &DiagonalCumulant) -> Result<(SymmetricTensor, f64), LyapunovError> {
    let p = a.nrows();
    let n = omega.order;
    let size = p.pow(n as u32);
    let m = DMatrix::identity(size, size) - kron_power(a, n);
    let mut rhs = DVector::zeros(size);
    let diag_step: usize = (0..n).map(|k| p.pow(k as u32)).sum();
    for (i, &w) in omega.w.iter().enumerate() {
        rhs[i * diag_step] = w;
    }
    let x = m.lu().solve(&rhs).ok_or(LyapunovError::SingularSystem)?;
    let dense = crate::tensor::DenseTensor { p, order: n, data: x.iter().copied().collect() };
    Ok(SymmetricTensor::from_dense(&dense))
}

/// Rows of `I - A^{⊗n}` restricted to symmetric tensors.
///
/// Row `r` (a multiset) reads `x_r - Σ_c Π_k a[r_k, c_k] x_{sort(c)} = ω_r`; the
/// inner sum runs over the nonzero entries of each row of `a`.
pub(crate) fn symmetric_system(a: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let p = a.nrows();
    let rows = multisets(p, n);
    let m = rows.len();
    let nz: Vec<Vec<(usize, f64)>> = (0..p)
        .map(|r| (0..p).filter(|&c| a[(r, c)] != 0.0).map(|c| (c, a[(r, c)])).collect())
        .collect();
    let mut sys = DMatrix::identity(m, m);
    let mut cols = vec![0usize; n];
    for (ri, row) in rows.iter().enumerate() {
        accumulate_row(&nz, row, 0, 1.0, &mut cols, &mut |c, w| {
            let mut sorted = c.to_vec();
            sorted.sort_unstable();
            sys[(ri, multiset_rank(p, &sorted))] -= w;
        });
    }
    sys
}

fn accumulate_row(
    nz: &[Vec<(usize, f64)>],
    row: &[usize],
    k: usize,
    weight: f64,
    cols: &mut [usize],
    f: &mut impl FnMut(&[usize], f64),
) {
    if k == row.len() {
        f(cols, weight);
        return;
    }
    for &(c, w) in &nz[row[k]] {
        cols[k] = c;
        accumulate_row(nz, row, k + 1, weight * w, cols, f);
    }
}

fn solve_symmetric(a: &DMatrix<f64>, omega: &DiagonalCumulant) -> Result<SymmetricTensor, LyapunovError> {
    let p = a.nrows();
    let n = omega.order;
    let sys = symmetric_system(a, n);
    let rhs = DVector::from_vec(omega.to_tensor().values().to_vec());
    let x = sys.lu().solve(&rhs).ok_or(LyapunovError::SingularSystem)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LyapunovError::SingularSystem);
    }
    Ok(SymmetricTensor::from_values(p, n, x.iter().copied().collect()))
}

/// Partial sum `Σ_{i < terms} Ω ×_1 A^i ... ×_n A^i`.
pub fn series_cumulant(a: &ParameterMatrix, omega: &DiagonalCumulant, terms: usize) -> SymmetricTensor {
    series_matrix(a.matrix(), omega, terms)
}

fn series_matrix(a: &DMatrix<f64>, omega: &DiagonalCumulant, terms: usize) -> SymmetricTensor {
    let p = a.nrows();
    let n = omega.order;
    let idx = multisets(p, n);
    let mut acc = vec![0.0; idx.len()];
    let mut power = DMatrix::identity(p, p);
    for _ in 0..terms {
        for (slot, m) in acc.iter_mut().zip(&idx) {
            *slot += (0..p)
                .map(|v| omega.w[v] * m.iter().map(|&i| power[(i, v)]).product::<f64>())
                .sum::<f64>();
        }
        power = a * power;
    }
    SymmetricTensor::from_values(p, n, acc)
}

/// Number of series terms after which `ρ^(n L) ‖Ω‖` drops below `1e-14`, capped at 500.
pub fn default_series_terms(a: &ParameterMatrix, omega: &DiagonalCumulant) -> usize {
    let rho = a.radius();
    let norm = omega.w.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if norm == 0.0 || rho == 0.0 {
        return a.p().max(1);
    }
    if rho >= 1.0 {
        return 500;
    }
    let needed = ((1e-14 / norm).ln() / (omega.order as f64 * rho.ln())).ceil();
    (needed.max(1.0) as usize).min(500)
}

/// `max |T - (T ×_1 A ... ×_n A + Ω)|`.
pub fn recursive_residual(t: &SymmetricTensor, a: &ParameterMatrix, omega: &DiagonalCumulant) -> f64 {
    let image = t.transform(a.matrix());
    let omega = omega.to_tensor();
    t.values()
        .iter()
        .zip(image.values())
        .zip(omega.values())
        .fold(0.0, |m, ((t, ta), w)| m.max((t - ta - w).abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseRecovery {
    pub omega: DiagonalCumulant,
    /// Largest off-diagonal entry of `T - T ×_1 A ... ×_n A`.
    pub offdiag_defect: f64,
}

pub fn recover_noise(t: &SymmetricTensor, a: &ParameterMatrix) -> NoiseRecovery {
    recover_noise_matrix(t, a.matrix())
}

pub(crate) fn recover_noise_matrix(t: &SymmetricTensor, a: &DMatrix<f64>) -> NoiseRecovery {
    let image = t.transform(a);
    let mut w = vec![0.0; t.p()];
    let mut defect = 0.0f64;
    for ((idx, tv), iv) in t.entries().zip(image.values()) {
        let d = tv - iv;
        if idx.iter().all(|&i| i == idx[0]) {
            w[idx[0]] = d;
        } else {
            defect = defect.max(d.abs());
        }
    }
    NoiseRecovery { omega: DiagonalCumulant::new(t.order(), w), offdiag_defect: defect }
}

/// Draws edge weights `±U[0.05, 1]` on the graph's pattern and rescales to
/// `target_radius` unless the drawn matrix is nilpotent.
///
/// Deterministic per seed.
pub fn sample_stable_matrix(g: &DirectedGraph, seed: u64, target_radius: f64) -> ParameterMatrix {
    assert!(target_radius > 0.0 && target_radius < 1.0, "target radius must lie in (0, 1)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = g.p();
    let mut a = DMatrix::zeros(p, p);
    for &(i, j) in g.edges() {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        a[(j, i)] = sign * rng.random_range(0.05..=1.0);
    }
    if !is_nilpotent(&a) {
        a *= target_radius / spectral_radius(&a);
    }
    ParameterMatrix::new(g.clone(), a)
        .and_then(ParameterMatrix::certify)
        .expect("rescaled matrix is stable on its own pattern")
}

// Structural zeros survive floating-point products exactly, so A^p = 0 is a
// reliable test for patterns without cycles.
fn is_nilpotent(a: &DMatrix<f64>) -> bool {
    let mut power = a.clone();
    for _ in 1..a.nrows() {
        power = &power * a;
    }
    power.iter().all(|&v| v == 0.0)
}

/// Model-valid diagonal cumulants: orders 2 and 4 in `U[0.5, 2]`, other orders
/// `±U[0.5, 2]`.
pub fn sample_noise(p: usize, order: usize, rng: &mut impl Rng) -> DiagonalCumulant {
    let w = (0..p)
        .map(|_| {
            let mag = rng.random_range(0.5..=2.0);
            if order % 2 == 0 || rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    DiagonalCumulant::new(order, w)
}

/// Independent noise coordinates for simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSpec {
    Zero { p: usize },
    /// `N(0, scale_i^2)`.
    Gaussian { scale: Vec<f64> },
    /// `scale_i (E - 1)` with `E` standard exponential.
    CenteredExponential { scale: Vec<f64> },
}

impl NoiseSpec {
    pub fn p(&self) -> usize {
        match self {
            NoiseSpec::Zero { p } => *p,
            NoiseSpec::Gaussian { scale } | NoiseSpec::CenteredExponential { scale } => scale.len(),
        }
    }

    /// Exact diagonal cumulant of the given order.
    pub fn cumulant(&self, order: usize) -> DiagonalCumulant {
        let w = match self {
            NoiseSpec::Zero { p } => vec![0.0; *p],
            NoiseSpec::Gaussian { scale } => scale
                .iter()
                .map(|s| if order == 2 { s * s } else { 0.0 })
                .collect(),
            // κ_n of a standard exponential is (n - 1)!
            NoiseSpec::CenteredExponential { scale } => {
                let fact: f64 = (1..order).map(|k| k as f64).product();
                scale
                    .iter()
                    .map(|s| if order == 1 { 0.0 } else { fact * s.powi(order as i32) })
                    .collect()
            }
        };
        DiagonalCumulant::new(order, w)
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            NoiseSpec::Zero { .. } => out.fill(0.0),
            NoiseSpec::Gaussian { scale } => {
                for (o, s) in out.iter_mut().zip(scale) {
                    let z: f64 = StandardNormal.sample(rng);
                    *o = s * z;
                }
            }
            NoiseSpec::CenteredExponential { scale } => {
                for (o, s) in out.iter_mut().zip(scale) {
                    let e: f64 = Exp1.sample(rng);
                    *o = s * (e - 1.0);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationEstimate {
    /// k-statistics over the retained window.
    pub tensor: SymmetricTensor,
    /// Batch-means standard error of each entry.
    pub std_error: SymmetricTensor,
    pub samples: usize,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimulationError {
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error("order {0} is not supported; use 2 or 3")]
    UnsupportedOrder(usize),
    #[error("need at least {needed} retained samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

const SIMULATION_BATCHES: usize = 100;

/// Simulates `t_max` steps, drops the first `burn_in`, and returns order-2 or
/// order-3 k-statistics with batch-means standard errors.
pub fn simulate_and_estimate(
    a: &ParameterMatrix,
    noise: &NoiseSpec,
    t_max: usize,
    burn_in: usize,
    order: usize,
    seed: u64,
) -> Result<SimulationEstimate, SimulationError> {
    if !(2..=3).contains(&order) {
        return Err(SimulationError::UnsupportedOrder(order));
    }
    let p = a.p();
    if noise.p() != p {
        return Err(LyapunovError::DimensionMismatch(format!("noise has {} coordinates, p = {p}", noise.p())).into());
    }
    let radius = a.radius();
    if radius >= 1.0 - STABILITY_MARGIN {
        return Err(LyapunovError::Unstable { radius }.into());
    }
    let kept = t_max.saturating_sub(burn_in);
    let needed = SIMULATION_BATCHES * 4;
    if kept < needed {
        return Err(SimulationError::TooFewSamples { needed, got: kept });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let am = a.matrix();
    let mut x = vec![0.0; p];
    let mut next = vec![0.0; p];
    let mut eps = vec![0.0; p];
    let mut data = Vec::with_capacity(kept * p);
    for t in 0..t_max {
        noise.draw(&mut rng, &mut eps);
        for j in 0..p {
            next[j] = eps[j] + (0..p).map(|i| am[(j, i)] * x[i]).sum::<f64>();
        }
        std::mem::swap(&mut x, &mut next);
        if t >= burn_in {
            data.extend_from_slice(&x);
        }
    }

    let tensor = k_statistic(&data, p, order);
    let batch_len = kept / SIMULATION_BATCHES;
    let batch_stats: Vec<SymmetricTensor> = (0..SIMULATION_BATCHES)
        .map(|b| k_statistic(&data[b * batch_len * p..(b + 1) * batch_len * p], p, order))
        .collect();
    let bf = SIMULATION_BATCHES as f64;
    let se = (0..multiset_count(p, order))
        .map(|e| {
            let mean = batch_stats.iter().map(|s| s.values()[e]).sum::<f64>() / bf;
            let var = batch_stats.iter().map(|s| (s.values()[e] - mean).powi(2)).sum::<f64>() / (bf - 1.0);
            (var / bf).sqrt()
        })
        .collect();
    Ok(SimulationEstimate {
        tensor,
        std_error: SymmetricTensor::from_values(p, order, se),
        samples: kept,
        batches: SIMULATION_BATCHES,
    })
}

/// Unbiased covariance (order 2) or third k-statistic (order 3) of row-major samples.
fn k_statistic(data: &[f64], p: usize, order: usize) -> SymmetricTensor {
    let n = data.len() / p;
    let nf = n as f64;
    let mut mean = vec![0.0; p];
    for row in data.chunks_exact(p) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let idx = multisets(p, order);
    let mut sums = vec![0.0; idx.len()];
    let mut centred = vec![0.0; p];
    for row in data.chunks_exact(p) {
        for k in 0..p {
            centred[k] = row[k] - mean[k];
        }
        for (s, m) in sums.iter_mut().zip(&idx) {
            *s += m.iter().map(|&i| centred[i]).product::<f64>();
        }
    }
    let scale = match order {
        2 => 1.0 / (nf - 1.0),
        _ => nf / ((nf - 1.0) * (nf - 2.0)),
    };
    SymmetricTensor::from_values(p, order, sums.into_iter().map(|s| s * scale).collect())
}
