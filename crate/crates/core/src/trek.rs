//! Trek rules for cumulant entries.
//!
//! The full rule sums over equitreks. On a DAG where every vertex carries the same
//! self-loop weight `t`, equitreks are base treks with self-loops inserted, and the
//! insertions sum to the rational coefficient `C(x, y; t)`.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;

use crate::graph::{DirectedGraph, Trek};
use crate::lyapunov::{solve_unchecked, ParameterMatrix, SolveMethod};
use crate::tensor::{multisets, DiagonalCumulant, SymmetricTensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrekError {
    #[error("self-loop weight {t} puts the coefficient on its pole; need |t| < 1")]
    PoleAtUnit { t: f64 },
    #[error("the graph has a directed cycle")]
    NotADag,
    #[error("effective matrix has spectral radius {radius}")]
    UnstableEffective { radius: f64 },
    #[error("{0} -> {1} is not an edge between distinct vertices of the graph")]
    NotAnEdge(usize, usize),
    #[error("noise has {found} entries, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// One equitrek together with its contribution `w_top · Π a^{leg}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrekMonomialTerm {
    pub trek: Trek,
    pub coefficient: f64,
    pub noise_index: usize,
}

/// Every equitrek up to `max_len` with its weighted monomial.
pub fn trek_terms(
    a: &ParameterMatrix,
    omega: &DiagonalCumulant,
    indices: &[usize],
    max_len: usize,
) -> Vec<TrekMonomialTerm> {
    a.graph()
        .enumerate_equitreks(indices, max_len)
        .into_iter()
        .map(|trek| {
            let coefficient = omega.w[trek.top] * trek.monomial(a.matrix());
            TrekMonomialTerm { noise_index: trek.top, trek, coefficient }
        })
        .collect()
}

/// Truncated trek rule `Σ_{ℓ ≤ max_len} Σ_v w_v Π_k (A^ℓ)[i_k, v]`, which is the sum
/// over equitreks of length at most `max_len`.
pub fn trek_rule_entry(
    a: &ParameterMatrix,
    omega: &DiagonalCumulant,
    indices: &[usize],
    max_len: usize,
) -> f64 {
    assert_eq!(indices.len(), omega.order, "one index per cumulant order");
    let p = a.p();
    let mut power = nalgebra::DMatrix::<f64>::identity(p, p);
    let mut total = 0.0;
    for _ in 0..=max_len {
        total += (0..p)
            .map(|v| omega.w[v] * indices.iter().map(|&i| power[(i, v)]).product::<f64>())
            .sum::<f64>();
        power = a.matrix() * power;
    }
    total
}

fn big(n: usize) -> BigInt {
    BigInt::from(n)
}

fn binom(n: usize, k: usize) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    (0..k).fold(BigInt::one(), |acc, i| acc * big(n - i) / big(i + 1))
}

fn trim(mut v: Vec<BigInt>) -> Vec<BigInt> {
    while v.len() > 1 && v.last().is_some_and(Zero::is_zero) {
        v.pop();
    }
    v
}

/// Coefficients of `p_{x,y}` in powers of `t²`:
/// `Σ_l C(max, min - l) C(min, l) t^{2l}`.
pub fn p_polynomial(x: usize, y: usize) -> Vec<BigInt> {
    let (lo, hi) = (x.min(y), x.max(y));
    (0..=lo).map(|l| binom(hi, lo - l) * binom(lo, l)).collect()
}

/// `p_{x,y}` for `x, y` in `0..=max`, indexed `[x][y]`.
pub fn p_table(max: usize) -> Vec<Vec<Vec<BigInt>>> {
    (0..=max).map(|x| (0..=max).map(|y| p_polynomial(x, y)).collect()).collect()
}

fn eval_in_square(coeffs: &[BigInt], t2: &BigRational) -> BigRational {
    coeffs
        .iter()
        .rev()
        .fold(BigRational::zero(), |acc, c| acc * t2 + BigRational::from_integer(c.clone()))
}

/// `C(x, y; t) = t^{|x-y|} p_{x,y}(t) / (1 - t²)^{x+y+1}`, exactly.
pub fn restricted_coefficient_exact(x: usize, y: usize, t: &BigRational) -> Result<BigRational, TrekError> {
    if t.abs() >= BigRational::one() {
        return Err(TrekError::PoleAtUnit { t: t.to_f64().unwrap_or(f64::NAN) });
    }
    let t2 = t * t;
    let num = eval_in_square(&p_polynomial(x, y), &t2) * pow(t, x.abs_diff(y));
    let den = pow(&(BigRational::one() - t2), x + y + 1);
    Ok(num / den)
}

fn pow(base: &BigRational, e: usize) -> BigRational {
    (0..e).fold(BigRational::one(), |acc, _| acc * base)
}

pub fn restricted_coefficient(x: usize, y: usize, t: f64) -> Result<f64, TrekError> {
    if !(t.abs() < 1.0) {
        return Err(TrekError::PoleAtUnit { t });
    }
    let t2 = t * t;
    let p = p_polynomial(x, y)
        .iter()
        .rev()
        .fold(0.0, |acc, c| acc * t2 + c.to_f64().expect("coefficient fits in f64"));
    Ok(t.powi(x.abs_diff(y) as i32) * p / (1.0 - t2).powi((x + y + 1) as i32))
}

/// Sum over self-loop insertions into a base trek with leg distances `xs`:
/// `Σ_{L = max}^{max + insertions} t^{nL - Σx} Π_k C(L, x_k)`.
pub fn loop_insertion_sum(xs: &[usize], t: f64, insertions: usize) -> f64 {
    let n = xs.len() as i32;
    let m = *xs.iter().max().expect("at least one leg");
    let sx: usize = xs.iter().sum();
    (m..=m + insertions)
        .map(|len| {
            let count: f64 = xs.iter().map(|&x| binom(len, x).to_f64().unwrap()).product();
            count * t.powi(n * len as i32 - sx as i32)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecursionReport {
    pub checked: usize,
    /// `(x, y, which)` with `which` 1 for the polynomial identity and 2 for the
    /// coefficient identity.
    pub failures: Vec<(usize, usize, u8)>,
}

impl RecursionReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn poly_add(a: &[BigInt], b: &[BigInt]) -> Vec<BigInt> {
    let n = a.len().max(b.len());
    let zero = BigInt::zero();
    trim((0..n).map(|i| a.get(i).unwrap_or(&zero) + b.get(i).unwrap_or(&zero)).collect())
}

fn poly_mul(a: &[BigInt], b: &[BigInt]) -> Vec<BigInt> {
    let mut out = vec![BigInt::zero(); a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    trim(out)
}

/// Checks, for all `0 <= x <= y` within the bounds,
/// `p_{x+1,y+1} = t² p_{x,y+1} + (1 + (t² - 1)[x = y]) p_{x+1,y} + (1 - t²) p_{x,y}`
/// as an identity of integer polynomials, and
/// `C(x+1,y+1) = (t (C(x,y+1) + C(x+1,y)) + C(x,y)) / (1 - t²)` exactly at several
/// rational `t`.
pub fn check_p_recursions(x_max: usize, y_max: usize) -> RecursionReport {
    let one = || BigInt::one();
    let t2 = vec![BigInt::zero(), one()];
    let one_minus_t2 = vec![one(), -one()];
    let samples: Vec<BigRational> = [(0, 1), (1, 2), (-1, 3), (2, 5), (3, 4)]
        .iter()
        .map(|&(n, d)| BigRational::new(BigInt::from(n), BigInt::from(d)))
        .collect();
    let mut report = RecursionReport { checked: 0, failures: Vec::new() };
    for y in 0..=y_max {
        for x in 0..=x_max.min(y) {
            report.checked += 1;
            let middle = if x == y { t2.clone() } else { vec![one()] };
            let rhs = poly_add(
                &poly_add(&poly_mul(&t2, &p_polynomial(x, y + 1)), &poly_mul(&middle, &p_polynomial(x + 1, y))),
                &poly_mul(&one_minus_t2, &p_polynomial(x, y)),
            );
            if trim(p_polynomial(x + 1, y + 1)) != rhs {
                report.failures.push((x, y, 1));
            }
            let c = |a, b, t: &BigRational| restricted_coefficient_exact(a, b, t).expect("|t| < 1");
            let ok = samples.iter().all(|t| {
                let rhs = (t * (c(x, y + 1, t) + c(x + 1, y, t)) + c(x, y, t))
                    / (BigRational::one() - t * t);
                c(x + 1, y + 1, t) == rhs
            });
            if !ok {
                report.failures.push((x, y, 2));
            }
        }
    }
    report
}

/// Conjectured numerator for `n = xs.len()` legs, as coefficients in powers of `t^n`.
///
/// Coefficient of `(t^n)^{Σx - max - l}` is
/// `Σ_k (-1)^{l-k} C(Σx + 1, l - k) Π_i C(x_i + k, k)`. For two legs it equals
/// [`p_polynomial`].
pub fn conjectured_higher_p(xs: &[usize]) -> Vec<BigInt> {
    assert!(!xs.is_empty(), "at least one leg");
    let sx: usize = xs.iter().sum();
    let deg = sx - xs.iter().max().unwrap();
    let mut out = vec![BigInt::zero(); deg + 1];
    for l in 0..=deg {
        let c: BigInt = (0..=l)
            .map(|k| {
                let term = binom(sx + 1, l - k) * xs.iter().map(|&x| binom(x + k, k)).product::<BigInt>();
                if (l - k) % 2 == 0 { term } else { -term }
            })
            .sum();
        out[deg - l] = c;
    }
    out
}

/// Numerator obtained from the loop-insertion series: the first `Σx - max + 1`
/// coefficients of `(1 - s)^{Σx+1} Σ_m s^m Π_k C(max + m, x_k)`, plus the largest
/// magnitude among the next `Σx + 1` coefficients, which vanish when the series is
/// a rational function of the expected shape.
pub fn loop_insertion_p(xs: &[usize]) -> (Vec<BigInt>, BigInt) {
    let sx: usize = xs.iter().sum();
    let m = *xs.iter().max().expect("at least one leg");
    let deg = sx - m;
    let len = deg + sx + 2;
    let series: Vec<BigInt> = (0..len).map(|k| xs.iter().map(|&x| binom(m + k, x)).product()).collect();
    let coeff = |j: usize| -> BigInt {
        (0..=j)
            .map(|k| {
                let term = binom(sx + 1, j - k) * &series[k];
                if (j - k) % 2 == 0 { term } else { -term }
            })
            .sum()
    };
    let head = (0..=deg).map(coeff).collect();
    let tail = (deg + 1..len).map(|j| coeff(j).abs()).max().unwrap_or_default();
    (head, tail)
}

/// Rational coefficient of the conjectured rule:
/// `t^{n max - Σx} p(t) / (1 - t^n)^{Σx + 1}`.
pub fn conjectured_coefficient(xs: &[usize], t: f64) -> f64 {
    let n = xs.len() as i32;
    let sx: usize = xs.iter().sum();
    let m = *xs.iter().max().unwrap();
    let tn = t.powi(n);
    let p = conjectured_higher_p(xs).iter().rev().fold(0.0, |acc, c| acc * tn + c.to_f64().unwrap());
    t.powi(n * m as i32 - sx as i32) * p / (1.0 - tn).powi(sx as i32 + 1)
}

// paths[v][i]: (length, weight product) for every directed path v -> i, loops excluded.
fn base_paths(g: &DirectedGraph, a: &nalgebra::DMatrix<f64>) -> Vec<Vec<Vec<(usize, f64)>>> {
    let p = g.p();
    let mut paths = vec![vec![Vec::new(); p]; p];
    for (v, row) in paths.iter_mut().enumerate() {
        let mut stack = vec![(v, 0usize, 1.0)];
        while let Some((u, len, w)) = stack.pop() {
            row[u].push((len, w));
            for &c in g.children(u) {
                stack.push((c, len + 1, w * a[(c, u)]));
            }
        }
    }
    paths
}

fn effective_matrix(
    g: &DirectedGraph,
    t: f64,
    offdiag: &[(usize, usize, f64)],
) -> Result<nalgebra::DMatrix<f64>, TrekError> {
    if !g.is_dag() {
        return Err(TrekError::NotADag);
    }
    if !(t.abs() < 1.0) {
        return Err(TrekError::UnstableEffective { radius: t.abs() });
    }
    let p = g.p();
    let mut a = nalgebra::DMatrix::from_diagonal_element(p, p, t);
    for &(i, j, w) in offdiag {
        if i == j || i >= p || j >= p || !g.has_edge(i, j) {
            return Err(TrekError::NotAnEdge(i, j));
        }
        a[(j, i)] = w;
    }
    Ok(a)
}

fn restricted_tensor(
    g: &DirectedGraph,
    a: &nalgebra::DMatrix<f64>,
    omega: &DiagonalCumulant,
    coefficient: impl Fn(&[usize]) -> f64,
) -> SymmetricTensor {
    let paths = base_paths(g, a);
    let p = g.p();
    let n = omega.order;
    let values = multisets(p, n)
        .iter()
        .map(|idx| {
            let mut total = 0.0;
            let mut lens = vec![0; n];
            for v in 0..p {
                let legs: Vec<&Vec<(usize, f64)>> = idx.iter().map(|&i| &paths[v][i]).collect();
                if legs.iter().any(|l| l.is_empty()) {
                    continue;
                }
                total += omega.w[v] * leg_sum(&legs, 0, 1.0, &mut lens, &coefficient);
            }
            total
        })
        .collect();
    SymmetricTensor::from_values(p, n, values)
}

fn leg_sum(
    legs: &[&Vec<(usize, f64)>],
    k: usize,
    weight: f64,
    lens: &mut [usize],
    coefficient: &impl Fn(&[usize]) -> f64,
) -> f64 {
    if k == legs.len() {
        return weight * coefficient(lens);
    }
    legs[k]
        .iter()
        .map(|&(len, w)| {
            lens[k] = len;
            leg_sum(legs, k + 1, weight * w, lens, coefficient)
        })
        .sum()
}

/// Covariance of a DAG whose vertices all carry self-loop weight `t`, from the
/// finite base-trek sum weighted by [`restricted_coefficient`].
///
/// `offdiag` lists `(source, target, weight)` for edges between distinct vertices.
pub fn restricted_covariance(
    g: &DirectedGraph,
    t: f64,
    offdiag: &[(usize, usize, f64)],
    omega2: &DiagonalCumulant,
) -> Result<SymmetricTensor, TrekError> {
    if omega2.p() != g.p() {
        return Err(TrekError::DimensionMismatch { expected: g.p(), found: omega2.p() });
    }
    let a = effective_matrix(g, t, offdiag)?;
    let cov = DiagonalCumulant::new(2, omega2.w.clone());
    Ok(restricted_tensor(g, &a, &cov, |l| {
        restricted_coefficient(l[0], l[1], t).expect("|t| < 1 checked")
    }))
}

/// Outcome of comparing the conjectured higher-order rule against the Lyapunov solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConjectureReport {
    /// Always `"CONJECTURE"`: the rule is unproven and the result is evidence only.
    pub tag: &'static str,
    pub order: usize,
    pub max_rel_deviation: f64,
    pub entries_checked: usize,
    /// Entry with the largest deviation when it exceeds `1e-9`.
    pub counterexample: Option<Vec<usize>>,
}

/// Evaluates the conjectured restricted trek rule at `omega.order` and compares
/// it entrywise with the solved cumulant of the assembled matrix.
pub fn conjecture_validator(
    g: &DirectedGraph,
    t: f64,
    offdiag: &[(usize, usize, f64)],
    omega: &DiagonalCumulant,
) -> Result<ConjectureReport, TrekError> {
    if omega.p() != g.p() {
        return Err(TrekError::DimensionMismatch { expected: g.p(), found: omega.p() });
    }
    let a = effective_matrix(g, t, offdiag)?;
    let conj = restricted_tensor(g, &a, omega, |l| conjectured_coefficient(l, t));
    let exact = solve_unchecked(&a, omega, SolveMethod::Auto)
        .map_err(|_| TrekError::UnstableEffective { radius: t.abs() })?
        .tensor;
    let scale = exact.max_abs().max(f64::MIN_POSITIVE);
    let mut worst = (0.0, None);
    for ((idx, c), e) in conj.entries().zip(exact.values()) {
        let dev = (c - e).abs() / scale;
        if dev > worst.0 {
            worst = (dev, Some(idx));
        }
    }
    Ok(ConjectureReport {
        tag: "CONJECTURE",
        order: omega.order,
        max_rel_deviation: worst.0,
        entries_checked: conj.values().len(),
        counterexample: if worst.0 > 1e-9 { worst.1 } else { None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::{sample_noise, sample_stable_matrix, solve_cumulant};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn ints(v: &[i64]) -> Vec<BigInt> {
        v.iter().map(|&x| BigInt::from(x)).collect()
    }

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn p_polynomial_small_cases() {
        for y in 0..8 {
            assert_eq!(p_polynomial(0, y), ints(&[1]));
        }
        assert_eq!(p_polynomial(1, 1), ints(&[1, 1]));
        assert_eq!(p_polynomial(2, 3), ints(&[3, 6, 1]));
        assert_eq!(p_polynomial(3, 3), ints(&[1, 9, 9, 1]));
        assert_eq!(p_polynomial(3, 2), p_polynomial(2, 3));
    }

    #[test]
    fn p_at_one_counts_placements() {
        for x in 0..=10 {
            for y in 0..=10 {
                let total: BigInt = p_polynomial(x, y).iter().sum();
                assert_eq!(total, binom(x + y, x), "({x}, {y})");
            }
        }
    }

    #[test]
    fn coefficient_values() {
        let t = rat(1, 2);
        assert_eq!(restricted_coefficient_exact(0, 0, &t).unwrap(), rat(4, 3));
        assert_eq!(restricted_coefficient_exact(2, 3, &t).unwrap(), rat(9344, 729));
        assert!((restricted_coefficient(2, 3, 0.5).unwrap() - 9344.0 / 729.0).abs() < 1e-12);
        assert!(matches!(restricted_coefficient(1, 1, 1.0), Err(TrekError::PoleAtUnit { .. })));
        assert!(restricted_coefficient_exact(0, 1, &rat(-1, 1)).is_err());
    }

    #[test]
    fn coefficient_matches_loop_insertions() {
        for t in [-0.7, 0.3, 0.5, 0.8] {
            for x in 0..5 {
                for y in 0..5 {
                    let closed = restricted_coefficient(x, y, t).unwrap();
                    let sum = loop_insertion_sum(&[x, y], t, 300);
                    assert!((closed - sum).abs() <= 1e-10 * closed.abs().max(1.0), "{x} {y} {t}");
                }
            }
        }
    }

    #[test]
    fn smallest_recursion_case_and_zero_t() {
        let rhs = poly_add(
            &poly_add(&poly_mul(&ints(&[0, 1]), &p_polynomial(0, 1)), &poly_mul(&ints(&[0, 1]), &p_polynomial(1, 0))),
            &poly_mul(&ints(&[1, -1]), &p_polynomial(0, 0)),
        );
        assert_eq!(rhs, p_polynomial(1, 1));
        let zero = BigRational::zero();
        for x in 0..4 {
            for y in x..4 {
                let lhs = restricted_coefficient_exact(x + 1, y + 1, &zero).unwrap();
                let expect = if x == y { restricted_coefficient_exact(x, y, &zero).unwrap() } else { zero.clone() };
                assert_eq!(lhs, expect);
            }
        }
    }

    #[test]
    fn recursions_hold() {
        let report = check_p_recursions(6, 6);
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.checked, 28);
    }

    #[test]
    fn conjecture_reduces_to_two_legs() {
        for x in 0..=6 {
            for y in 0..=6 {
                assert_eq!(trim(conjectured_higher_p(&[x, y])), trim(p_polynomial(x, y)));
            }
        }
    }

    #[test]
    fn conjecture_matches_diagonal_generating_function() {
        // b_l = Σ_k (-1)^k C(3x+1, k) C(x+l-k, l-k)^3 sits at (t^3)^{2x-l}
        for x in 0..=3usize {
            let conj = conjectured_higher_p(&[x, x, x]);
            for l in 0..=2 * x {
                let b: BigInt = (0..=l)
                    .map(|k| {
                        let c = binom(x + l - k, l - k);
                        let term = binom(3 * x + 1, k) * &c * &c * &c;
                        if k % 2 == 0 { term } else { -term }
                    })
                    .sum();
                assert_eq!(conj[2 * x - l], b, "x = {x}, l = {l}");
            }
        }
    }

    #[test]
    fn conjecture_agrees_with_insertion_series() {
        for xs in [[0, 0, 0], [1, 2, 0], [2, 2, 3], [3, 1, 1], [0, 4, 2]] {
            let (head, tail) = loop_insertion_p(&xs);
            assert_eq!(head, conjectured_higher_p(&xs), "{xs:?}");
            assert!(tail.is_zero());
        }
    }

    fn path4() -> DirectedGraph {
        DirectedGraph::new(4, [(0, 1), (1, 2), (2, 3)]).unwrap()
    }

    #[test]
    fn four_path_entry_has_three_terms() {
        let t: f64 = 0.5;
        let w = [1.0, 0.7, 1.9, 1.2];
        let cov = restricted_covariance(
            &path4(),
            t,
            &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)],
            &DiagonalCumulant::new(2, w.to_vec()),
        )
        .unwrap();
        let d = 1.0 - t * t;
        let expect = t * (3.0 + 6.0 * t * t + t.powi(4)) / d.powi(6) * w[0]
            + t * (2.0 + t * t) / d.powi(4) * w[1]
            + t / d.powi(2) * w[2];
        assert!((cov.get(&[2, 3]) - expect).abs() < 1e-12);
    }

    #[test]
    fn restricted_covariance_errors() {
        let omega = DiagonalCumulant::new(2, vec![1.0; 4]);
        assert!(matches!(
            restricted_covariance(&path4(), 1.0, &[], &omega),
            Err(TrekError::UnstableEffective { .. })
        ));
        assert_eq!(
            restricted_covariance(&path4(), 0.5, &[(0, 2, 1.0)], &omega).unwrap_err(),
            TrekError::NotAnEdge(0, 2)
        );
        let cyc = DirectedGraph::new(2, [(0, 1), (1, 0)]).unwrap();
        assert_eq!(
            restricted_covariance(&cyc, 0.5, &[], &DiagonalCumulant::new(2, vec![1.0; 2])).unwrap_err(),
            TrekError::NotADag
        );
    }

    #[test]
    fn no_base_trek_gives_exact_zero() {
        let g = DirectedGraph::new(3, [(0, 1), (2, 1)]).unwrap();
        let cov = restricted_covariance(&g, 0.4, &[(0, 1, 0.9), (2, 1, -0.5)], &DiagonalCumulant::new(2, vec![1.0; 3])).unwrap();
        assert_eq!(cov.get(&[0, 2]), 0.0);
    }

    #[test]
    fn truncated_rule_on_source_loop() {
        let g = DirectedGraph::new(2, [(0, 0), (0, 1)]).unwrap();
        let a = ParameterMatrix::from_weights(g, &[(0, 0, 0.5), (0, 1, 1.0)]).unwrap();
        let omega = DiagonalCumulant::new(2, vec![1.0, 1.0]);
        assert!((trek_rule_entry(&a, &omega, &[0, 1], 200) - 2.0 / 3.0).abs() < 1e-12);
        let g2 = DirectedGraph::new(2, [(0, 1), (1, 1)]).unwrap();
        let a2 = ParameterMatrix::from_weights(g2, &[(0, 1, 0.8), (1, 1, 0.6)]).unwrap();
        assert_eq!(trek_rule_entry(&a2, &omega, &[0, 1], 200), 0.0);
    }

    #[test]
    fn enumerated_terms_sum_to_truncated_rule() {
        let g = DirectedGraph::new(3, [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0)]).unwrap();
        let a = sample_stable_matrix(&g, 5, 0.6);
        let omega = DiagonalCumulant::new(3, vec![1.0, -0.8, 1.4]);
        for idx in [[0, 1, 2], [1, 1, 2], [2, 2, 2]] {
            let terms = trek_terms(&a, &omega, &idx, 6);
            let total: f64 = terms.iter().map(|t| t.coefficient).sum();
            assert!((total - trek_rule_entry(&a, &omega, &idx, 6)).abs() < 1e-12);
            assert!(terms.iter().all(|t| t.trek.is_equitrek()));
        }
    }

    // Single-top closed form for polytrees: every common ancestor k contributes
    // C(d(k, i), d(k, j); t) times the path weights.
    fn polytree_entry(g: &DirectedGraph, a: &nalgebra::DMatrix<f64>, t: f64, w: &[f64], i: usize, j: usize) -> f64 {
        let p = g.p();
        let mut total = 0.0;
        for k in 0..p {
            let (Some((di, wi)), Some((dj, wj))) = (unique_path(g, a, k, i), unique_path(g, a, k, j)) else {
                continue;
            };
            total += restricted_coefficient(di, dj, t).unwrap() * wi * wj * w[k];
        }
        total
    }

    fn unique_path(g: &DirectedGraph, a: &nalgebra::DMatrix<f64>, from: usize, to: usize) -> Option<(usize, f64)> {
        if from == to {
            return Some((0, 1.0));
        }
        g.children(from)
            .iter()
            .find_map(|&c| unique_path(g, a, c, to).map(|(d, w)| (d + 1, w * a[(c, from)])))
    }

    #[test]
    fn polytree_closed_form() {
        let g = DirectedGraph::new(6, [(0, 1), (0, 2), (3, 2), (2, 4), (2, 5)]).unwrap();
        let offdiag = [(0, 1, 0.9), (0, 2, -0.6), (3, 2, 0.8), (2, 4, 1.1), (2, 5, 0.4)];
        let w = [1.0, 0.6, 1.5, 0.9, 1.2, 0.8];
        let t = 0.45;
        let cov = restricted_covariance(&g, t, &offdiag, &DiagonalCumulant::new(2, w.to_vec())).unwrap();
        let mut a = nalgebra::DMatrix::from_diagonal_element(6, 6, t);
        for &(i, j, x) in &offdiag {
            a[(j, i)] = x;
        }
        for i in 0..6 {
            for j in 0..6 {
                assert!((cov.get(&[i, j]) - polytree_entry(&g, &a, t, &w, i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conjecture_on_three_path() {
        let g = DirectedGraph::new(3, [(0, 1), (1, 2)]).unwrap();
        let report =
            conjecture_validator(&g, 0.5, &[(0, 1, 1.0), (1, 2, 1.0)], &DiagonalCumulant::new(3, vec![1.0; 3])).unwrap();
        assert_eq!(report.tag, "CONJECTURE");
        assert!(report.max_rel_deviation <= 1e-9, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn restricted_matches_solver(p in 2usize..=5, seed in any::<u64>(), mask in prop::collection::vec(any::<bool>(), 10), t in -0.8f64..0.8) {
            let pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (0..j).map(move |i| (i, j))).collect();
            let edges: Vec<(usize, usize)> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
            let g = DirectedGraph::new(p, edges.iter().copied()).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let weights: Vec<(usize, usize, f64)> = edges.iter().map(|&(i, j)| (i, j, rand::Rng::random_range(&mut rng, -1.0..1.0))).collect();
            let omega = sample_noise(p, 2, &mut rng);
            let cov = restricted_covariance(&g, t, &weights, &omega).unwrap();
            let mut all = weights.clone();
            all.extend((0..p).map(|v| (v, v, t)));
            let full = DirectedGraph::new(p, all.iter().map(|&(i, j, _)| (i, j))).unwrap();
            let a = ParameterMatrix::from_weights(full, &all).unwrap();
            let exact = solve_cumulant(&a, &omega).unwrap().tensor;
            prop_assert!(cov.rel_diff(&exact) <= 1e-10);
        }

        #[test]
        fn truncation_converges(seed in any::<u64>()) {
            let g = DirectedGraph::new(3, [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 0)]).unwrap();
            let a = sample_stable_matrix(&g, seed, 0.6);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for n in 2..=3 {
                let omega = sample_noise(3, n, &mut rng);
                let exact = solve_cumulant(&a, &omega).unwrap().tensor;
                for idx in multisets(3, n) {
                    let v100 = trek_rule_entry(&a, &omega, &idx, 100);
                    let v200 = trek_rule_entry(&a, &omega, &idx, 200);
                    prop_assert!((v200 - v100).abs() <= 1e-10);
                    prop_assert!((v200 - exact.get(&idx)).abs() <= 1e-10 * exact.max_abs());
                }
            }
        }
    }
}
