//! Symmetric and dense tensors over `0..p`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Number of multisets of size `n` drawn from `p` symbols.
pub fn multiset_count(p: usize, n: usize) -> usize {
    binomial(p + n - 1, n)
}

pub(crate) fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Sorted index tuples of length `n` over `0..p`, in lexicographic order.
pub fn multisets(p: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(multiset_count(p, n));
    let mut cur = Vec::with_capacity(n);
    fn rec(p: usize, n: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for v in start..p {
            cur.push(v);
            rec(p, n, v, cur, out);
            cur.pop();
        }
    }
    rec(p, n, 0, &mut cur, &mut out);
    out
}

/// Position of a sorted tuple in [`multisets`] order.
pub(crate) fn multiset_rank(p: usize, sorted: &[usize]) -> usize {
    let n = sorted.len();
    let mut rank = 0;
    let mut lo = 0;
    for (k, &v) in sorted.iter().enumerate() {
        let slots = n - k - 1;
        for u in lo..v {
            rank += multiset_count(p - u, slots);
        }
        lo = v;
    }
    rank
}

/// Order-`n` symmetric tensor storing one value per multiset of indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetricTensor {
    order: usize,
    p: usize,
    values: Vec<f64>,
}

impl SymmetricTensor {
    pub fn zeros(p: usize, order: usize) -> Self {
        assert!(p > 0 && order > 0, "tensor needs p >= 1 and order >= 1");
        Self { order, p, values: vec![0.0; multiset_count(p, order)] }
    }

    pub fn from_fn(p: usize, order: usize, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let values = multisets(p, order).iter().map(|m| f(m)).collect();
        Self { order, p, values }
    }

    /// Values in [`multisets`] order.
    pub fn from_values(p: usize, order: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), multiset_count(p, order), "wrong number of values");
        Self { order, p, values }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn index_of(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.order, "index length must equal the order");
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        assert!(sorted.last().is_some_and(|&v| v < self.p), "index out of range");
        multiset_rank(self.p, &sorted)
    }

    /// Entry at any permutation of `idx`.
    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.index_of(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let i = self.index_of(idx);
        self.values[i] = value;
    }

    /// `(sorted index, value)` pairs in canonical order.
    pub fn entries(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        multisets(self.p, self.order).into_iter().zip(self.values.iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.p).map(|i| self.get(&vec![i; self.order])).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise difference.
    pub fn max_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.p, self.order), (other.p, other.order));
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest entrywise difference scaled by the largest entry of `other`.
    pub fn rel_diff(&self, other: &Self) -> f64 {
        self.max_diff(other) / other.max_abs().max(f64::MIN_POSITIVE)
    }

    pub fn to_dense(&self) -> DenseTensor {
        let mut dense = DenseTensor::zeros(self.p, self.order);
        for (pos, idx) in dense.indices().enumerate() {
            dense.data[pos] = self.get(&idx);
        }
        dense
    }

    /// Symmetrises by averaging each orbit and returns the largest deviation
    /// of a dense entry from its orbit mean.
    pub fn from_dense(dense: &DenseTensor) -> (Self, f64) {
        let (p, order) = (dense.p, dense.order);
        let m = multiset_count(p, order);
        let mut sum = vec![0.0; m];
        let mut count = vec![0usize; m];
        let ranks: Vec<usize> = dense
            .indices()
            .map(|mut idx| {
                idx.sort_unstable();
                multiset_rank(p, &idx)
            })
            .collect();
        for (pos, &r) in ranks.iter().enumerate() {
            sum[r] += dense.data[pos];
            count[r] += 1;
        }
        let values: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        let defect = ranks
            .iter()
            .enumerate()
            .fold(0.0f64, |d, (pos, &r)| d.max((dense.data[pos] - values[r]).abs()));
        (Self { order, p, values }, defect)
    }

    /// Multilinear product with the same matrix in every mode:
    /// `T ×_1 M ×_2 M ... ×_n M`.
    pub fn transform(&self, m: &DMatrix<f64>) -> Self {
        let mut dense = self.to_dense();
        for k in 0..self.order {
            dense = dense.k_mode_product(m, k).expect("square matrix of matching size");
        }
        Self::from_dense(&dense).0
    }

    pub fn to_dump(&self) -> TensorDump {
        let entries = self
            .entries()
            .map(|(idx, v)| {
                let key = idx.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
                (key, v)
            })
            .collect();
        TensorDump { order: self.order, p: self.p, entries }
    }

    pub fn from_dump(dump: &TensorDump) -> Result<Self, TensorDumpError> {
        let mut t = Self::zeros(dump.p, dump.order);
        let mut seen = vec![false; t.values.len()];
        for (key, &v) in &dump.entries {
            let idx = key
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| TensorDumpError::BadKey(key.clone()))?;
            if idx.len() != dump.order || idx.iter().any(|&i| i >= dump.p) {
                return Err(TensorDumpError::BadKey(key.clone()));
            }
            let pos = t.index_of(&idx);
            if seen[pos] && t.values[pos] != v {
                return Err(TensorDumpError::Conflict(key.clone()));
            }
            seen[pos] = true;
            t.values[pos] = v;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let idx = &multisets(dump.p, dump.order)[missing];
            return Err(TensorDumpError::Missing(format!("{idx:?}")));
        }
        Ok(t)
    }
}

/// JSON form: `{"order": 3, "p": 2, "entries": {"0,0,1": 0.5, ...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDump {
    pub order: usize,
    pub p: usize,
    pub entries: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("dimension mismatch: expected {expected}, found {found}")]
pub struct DimensionMismatch {
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorDumpError {
    #[error("malformed index key {0:?}")]
    BadKey(String),
    #[error("conflicting values for index {0}")]
    Conflict(String),
    #[error("no value for index {0}")]
    Missing(String),
}

/// Dense `p × ... × p` tensor, row-major with the last index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub p: usize,
    pub order: usize,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(p: usize, order: usize) -> Self {
        Self { p, order, data: vec![0.0; p.pow(order as u32)] }
    }

    /// All index tuples in storage order.
    pub fn indices(&self) -> impl Iterator<Item = Vec<usize>> {
        let (p, order) = (self.p, self.order);
        (0..self.data.len()).map(move |mut pos| {
            let mut idx = vec![0; order];
            for k in (0..order).rev() {
                idx[k] = pos % p;
                pos /= p;
            }
            idx
        })
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.p + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    /// `(T ×_k M)[.., j, ..] = Σ_i T[.., i, ..] M[j, i]` with `k` zero-based.
    pub fn k_mode_product(&self, m: &DMatrix<f64>, k: usize) -> Result<Self, DimensionMismatch> {
        if k >= self.order || m.ncols() != self.p || m.nrows() != self.p {
            return Err(DimensionMismatch {
                expected: format!("{p}x{p} matrix and mode < {}", self.order, p = self.p),
                found: format!("{}x{} matrix and mode {k}", m.nrows(), m.ncols()),
            });
        }
        let p = self.p;
        let stride = p.pow((self.order - 1 - k) as u32);
        let block = stride * p;
        let mut out = Self::zeros(p, self.order);
        for base in (0..self.data.len()).step_by(block) {
            for inner in 0..stride {
                for j in 0..p {
                    let mut acc = 0.0;
                    for i in 0..p {
                        let mji = m[(j, i)];
                        if mji != 0.0 {
                            acc += self.data[base + i * stride + inner] * mji;
                        }
                    }
                    out.data[base + j * stride + inner] = acc;
                }
            }
        }
        Ok(out)
    }
}

/// Diagonal cumulant tensor with diagonal `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalCumulant {
    pub order: usize,
    pub w: Vec<f64>,
}

impl DiagonalCumulant {
    pub fn new(order: usize, w: Vec<f64>) -> Self {
        Self { order, w }
    }

    pub fn p(&self) -> usize {
        self.w.len()
    }

    pub fn to_tensor(&self) -> SymmetricTensor {
        let mut t = SymmetricTensor::zeros(self.p(), self.order);
        for (i, &w) in self.w.iter().enumerate() {
            t.set(&vec![i; self.order], w);
        }
        t
    }
}
