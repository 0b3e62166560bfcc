//! Numerical rank and exact rational row reduction.

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::Serialize;

/// Singular values at or below `max_sv * max(rows, cols) * rel_tol` count as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankPolicy {
    pub rel_tol: f64,
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self { rel_tol: 1e-12 }
    }
}

impl RankPolicy {
    pub fn threshold(&self, m: &DMatrix<f64>, max_sv: f64) -> f64 {
        max_sv * m.nrows().max(m.ncols()) as f64 * self.rel_tol
    }
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankInfo {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub threshold: f64,
}

impl RankInfo {
    /// Ratio of the last retained singular value to the first dropped one.
    pub fn gap(&self) -> f64 {
        match (self.rank, self.singular_values.get(self.rank)) {
            (0, _) | (_, None) => f64::INFINITY,
            (r, Some(&next)) => self.singular_values[r - 1] / next.max(f64::MIN_POSITIVE),
        }
    }
}

pub fn numeric_rank(m: &DMatrix<f64>, policy: RankPolicy) -> RankInfo {
    let sv = singular_values(m);
    let top = sv.first().copied().unwrap_or(0.0);
    let threshold = policy.threshold(m, top);
    let rank = if top == 0.0 { 0 } else { sv.iter().filter(|&&s| s > threshold).count() };
    RankInfo { rank, singular_values: sv, threshold }
}

/// Reduced row echelon form over the rationals; zero rows dropped.
pub fn rref(rows: &[Vec<BigRational>]) -> Vec<Vec<BigRational>> {
    let mut m: Vec<Vec<BigRational>> = rows.to_vec();
    let ncols = m.first().map_or(0, Vec::len);
    let mut pivot_row = 0;
    for col in 0..ncols {
        let Some(found) = (pivot_row..m.len()).find(|&r| !m[r][col].is_zero()) else {
            continue;
        };
        m.swap(pivot_row, found);
        let inv = m[pivot_row][col].recip();
        for v in m[pivot_row].iter_mut() {
            *v *= &inv;
        }
        let pivot = m[pivot_row].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != pivot_row && !row[col].is_zero() {
                let factor = row[col].clone();
                for (v, pv) in row.iter_mut().zip(&pivot) {
                    *v -= &factor * pv;
                }
            }
        }
        pivot_row += 1;
        if pivot_row == m.len() {
            break;
        }
    }
    m.truncate(pivot_row);
    m
}

pub fn to_rational(rows: &[Vec<i64>]) -> Vec<Vec<BigRational>> {
    rows.iter()
        .map(|r| r.iter().map(|&x| BigRational::from_integer(BigInt::from(x))).collect())
        .collect()
}

/// Exact rank of an integer matrix.
pub fn integer_rank(rows: &[Vec<i64>]) -> usize {
    rref(&to_rational(rows)).len()
}

/// Whether two integer matrices have the same row space.
pub fn same_row_space(a: &[Vec<i64>], b: &[Vec<i64>]) -> bool {
    rref(&to_rational(a)) == rref(&to_rational(b))
}

/// Basis of the rational kernel, each vector scaled to coprime integers.
pub fn integer_kernel(rows: &[Vec<i64>], ncols: usize) -> Vec<Vec<BigInt>> {
    let r = rref(&to_rational(rows));
    let pivots: Vec<usize> = r
        .iter()
        .map(|row| row.iter().position(|v| !v.is_zero()).expect("rref rows are nonzero"))
        .collect();
    let free: Vec<usize> = (0..ncols).filter(|c| !pivots.contains(c)).collect();
    free.iter()
        .map(|&f| {
            let mut v = vec![BigRational::zero(); ncols];
            v[f] = BigRational::one();
            for (row, &pc) in r.iter().zip(&pivots) {
                v[pc] = -row[f].clone();
            }
            primitive(&v)
        })
        .collect()
}

fn primitive(v: &[BigRational]) -> Vec<BigInt> {
    use num_integer::Integer;
    let lcm = v.iter().fold(BigInt::one(), |acc, x| acc.lcm(x.denom()));
    let ints: Vec<BigInt> = v.iter().map(|x| (x * &lcm).to_integer()).collect();
    let gcd = ints.iter().fold(BigInt::zero(), |acc, x| acc.gcd(x));
    if gcd.is_zero() {
        return ints;
    }
    let sign = if ints.iter().find(|x| !x.is_zero()).is_some_and(|x| x.is_negative()) {
        -BigInt::one()
    } else {
        BigInt::one()
    };
    ints.into_iter().map(|x| x / &gcd * &sign).collect()
}
