//! Polynomial constraints on cumulants: toric parametrizations of directed trees,
//! level and top-trek polynomials, tree model equivalence, and determinantal
//! rank bounds.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive};
use serde::Serialize;

use crate::graph::DirectedGraph;
use crate::identify::CumulantStack;
use crate::linalg::{integer_kernel, numeric_rank, same_row_space, RankPolicy};
use crate::tensor::{binomial, multisets, SymmetricTensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConstraintError {
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("{kind:?} constraint on {u:?}: rank {rank} exceeds bound {bound}")]
    ModelInconsistency { kind: ConstraintKind, u: Vec<usize>, bound: usize, rank: usize },
}

/// Relative threshold below which a polynomial counts as vanishing.
pub const VANISHING_TOL: f64 = 1e-9;

/// A directed tree whose only self-loop sits at the source.
#[derive(Debug, Clone)]
pub struct RootedTree {
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    pub depth: Vec<usize>,
}

impl RootedTree {
    pub fn new(g: &DirectedGraph) -> Result<Self, ConstraintError> {
        if !g.is_directed_tree() {
            return Err(ConstraintError::HypothesisViolated("graph is not a directed tree".into()));
        }
        let root = g.sources()[0];
        if !g.has_self_loop(root) {
            return Err(ConstraintError::HypothesisViolated(format!("source {root} has no self-loop")));
        }
        if let Some(v) = (0..g.p()).find(|&v| v != root && g.has_self_loop(v)) {
            return Err(ConstraintError::HypothesisViolated(format!("vertex {v} has a self-loop")));
        }
        let order = g.topological_order().expect("trees are acyclic");
        let mut parent = vec![None; g.p()];
        let mut depth = vec![0; g.p()];
        for v in order {
            if let Some(&q) = g.parents(v).first() {
                parent[v] = Some(q);
                depth[v] = depth[q] + 1;
            }
        }
        Ok(Self { root, parent, depth })
    }

    pub fn levels(&self) -> Vec<BTreeSet<usize>> {
        let max = self.depth.iter().copied().max().unwrap_or(0);
        let mut out = vec![BTreeSet::new(); max + 1];
        for (v, &d) in self.depth.iter().enumerate() {
            out[d].insert(v);
        }
        out
    }

    fn lca(&self, mut x: usize, mut y: usize) -> usize {
        while self.depth[x] > self.depth[y] {
            x = self.parent[x].unwrap();
        }
        while self.depth[y] > self.depth[x] {
            y = self.parent[y].unwrap();
        }
        while x != y {
            x = self.parent[x].unwrap();
            y = self.parent[y].unwrap();
        }
        x
    }

    /// Top of the unique shortest equitrek between the leaves.
    pub fn shortest_top(&self, leaves: &[usize]) -> usize {
        let d0 = self.depth[leaves[0]];
        if leaves.iter().all(|&v| self.depth[v] == d0) {
            leaves[1..].iter().fold(leaves[0], |acc, &v| self.lca(acc, v))
        } else {
            self.root
        }
    }

    /// Top, number of source-loop traversals, and the `(source, target)` edges
    /// used by the shortest equitrek, with multiplicity.
    fn shortest_trek(&self, leaves: &[usize]) -> (usize, usize, Vec<(usize, usize)>) {
        let top = self.shortest_top(leaves);
        let len = leaves.iter().map(|&v| self.depth[v]).max().unwrap();
        let loops = if top == self.root { leaves.iter().map(|&v| len - self.depth[v]).sum() } else { 0 };
        let mut edges = Vec::new();
        for &leaf in leaves {
            let mut v = leaf;
            while v != top {
                let q = self.parent[v].unwrap();
                edges.push((q, v));
                v = q;
            }
        }
        (top, loops, edges)
    }
}

pub fn level_partition(g: &DirectedGraph) -> Result<Vec<BTreeSet<usize>>, ConstraintError> {
    Ok(RootedTree::new(g)?.levels())
}

/// Exponent matrix of the monomial parametrization of a tree model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToricMatrix {
    pub order: usize,
    /// `v(m)_i` for each order `m` and vertex `i`, then `a_ji` for each edge `i -> j`.
    pub row_labels: Vec<String>,
    /// `(source, target)` for each edge row, in row order.
    pub edges: Vec<(usize, usize)>,
    /// Cumulant multisets, orders `2..=order`.
    pub columns: Vec<Vec<usize>>,
    pub entries: Vec<Vec<i64>>,
}

impl ToricMatrix {
    pub fn column_labels(&self) -> Vec<String> {
        self.columns
            .iter()
            .map(|idx| {
                let name = match idx.len() {
                    2 => "s".to_string(),
                    3 => "t".to_string(),
                    4 => "r".to_string(),
                    n => format!("k{n}_"),
                };
                name + &idx.iter().map(usize::to_string).collect::<String>()
            })
            .collect()
    }

    /// Integer kernel basis; each vector is a binomial relation among the columns.
    pub fn kernel(&self) -> Vec<Vec<BigInt>> {
        integer_kernel(&self.entries, self.columns.len())
    }

    /// Evaluates `monomial(u+) - monomial(u-)`, returning `(value, scale)` with
    /// `scale` the larger monomial magnitude.
    pub fn evaluate_binomial(&self, u: &[BigInt], stack: &CumulantStack) -> (f64, f64) {
        let mut plus = 1.0;
        let mut minus = 1.0;
        for (idx, e) in self.columns.iter().zip(u) {
            let x = cumulant(stack, idx);
            let k = e.abs().to_i32().expect("kernel exponents are small");
            if e.is_positive() {
                plus *= x.powi(k);
            } else if e.is_negative() {
                minus *= x.powi(k);
            }
        }
        (plus - minus, plus.abs().max(minus.abs()))
    }
}

fn cumulant(stack: &CumulantStack, idx: &[usize]) -> f64 {
    match idx.len() {
        2 => stack.s.get(idx),
        3 => stack.t.get(idx),
        4 => stack.r.as_ref().expect("fourth-order cumulants present").get(idx),
        n => panic!("no cumulant of order {n} in a stack"),
    }
}

/// Toric matrix of a directed tree with a self-loop at the source only, for
/// cumulants of orders `2..=order`.
pub fn toric_matrix(g: &DirectedGraph, order: usize) -> Result<ToricMatrix, ConstraintError> {
    assert!(order >= 2, "need order at least 2");
    let tree = RootedTree::new(g)?;
    let p = g.p();
    let mut edges: Vec<(usize, usize)> = g.edges().to_vec();
    edges.sort_by_key(|&(from, to)| (to, from));
    let mut row_labels: Vec<String> =
        (2..=order).flat_map(|m| (0..p).map(move |i| format!("v({m})_{i}"))).collect();
    row_labels.extend(edges.iter().map(|&(from, to)| format!("a_{to}{from}")));
    let v_rows = (order - 1) * p;
    let columns: Vec<Vec<usize>> = (2..=order).flat_map(|m| multisets(p, m)).collect();
    let mut entries = vec![vec![0i64; columns.len()]; row_labels.len()];
    let edge_row = |e: (usize, usize)| v_rows + edges.iter().position(|&x| x == e).unwrap();
    for (c, idx) in columns.iter().enumerate() {
        let (top, loops, used) = tree.shortest_trek(idx);
        entries[(idx.len() - 2) * p + top][c] = 1;
        entries[edge_row((tree.root, tree.root))][c] += loops as i64;
        for e in used {
            entries[edge_row(e)][c] += 1;
        }
    }
    Ok(ToricMatrix { order, row_labels, edges, columns, entries })
}

/// One polynomial evaluated on a stack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolynomialCheck {
    pub id: String,
    pub value: f64,
    /// Largest monomial magnitude in the polynomial.
    pub scale: f64,
    pub expected_zero: bool,
}

impl PolynomialCheck {
    fn new(id: String, terms: [f64; 2], expected_zero: bool) -> Self {
        let scale = terms[0].abs().max(terms[1].abs());
        Self { id, value: terms[0] - terms[1], scale, expected_zero }
    }

    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            0.0
        } else {
            self.value.abs() / self.scale
        }
    }

    pub fn vanishes(&self) -> bool {
        self.relative() <= VANISHING_TOL
    }

    pub fn consistent(&self) -> bool {
        self.vanishes() == self.expected_zero
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceCheck {
    pub vertex: usize,
    /// Over all `j`, the largest relative value of `s_ij^3 t_iii^2 - s_ii^3 t_iij t_ijj`.
    pub max_relative: f64,
    pub expected_zero: bool,
}

impl SourceCheck {
    pub fn consistent(&self) -> bool {
        (self.max_relative <= VANISHING_TOL) == self.expected_zero
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelReport {
    pub source: Vec<SourceCheck>,
    /// `s_0i t_00j - s_0j t_00i` for `i < j`; zero iff same level.
    pub same_level: Vec<PolynomialCheck>,
    /// `s_ij t_00j - s_0j t_0ij` for `i, j` on different levels; zero iff `j` is deeper.
    pub cross_level: Vec<PolynomialCheck>,
}

impl LevelReport {
    pub fn consistent(&self) -> bool {
        self.source.iter().all(SourceCheck::consistent)
            && self.same_level.iter().chain(&self.cross_level).all(PolynomialCheck::consistent)
    }
}

pub fn level_polynomial_checks(g: &DirectedGraph, stack: &CumulantStack) -> Result<LevelReport, ConstraintError> {
    let tree = RootedTree::new(g)?;
    let (s, t) = (&stack.s, &stack.t);
    let o = tree.root;
    let p = g.p();
    let source = (0..p)
        .map(|i| {
            let max_relative = (0..p)
                .map(|j| {
                    let terms = [
                        s.get(&[i, j]).powi(3) * t.get(&[i, i, i]).powi(2),
                        s.get(&[i, i]).powi(3) * t.get(&[i, i, j]) * t.get(&[i, j, j]),
                    ];
                    PolynomialCheck::new(String::new(), terms, false).relative()
                })
                .fold(0.0, f64::max);
            SourceCheck { vertex: i, max_relative, expected_zero: i == o }
        })
        .collect();
    let mut same_level = Vec::new();
    let mut cross_level = Vec::new();
    for i in 0..p {
        for j in 0..p {
            if i < j {
                same_level.push(PolynomialCheck::new(
                    format!("s{o}{i}*t{o}{o}{j} - s{o}{j}*t{o}{o}{i}"),
                    [s.get(&[o, i]) * t.get(&[o, o, j]), s.get(&[o, j]) * t.get(&[o, o, i])],
                    tree.depth[i] == tree.depth[j],
                ));
            }
            if tree.depth[i] != tree.depth[j] {
                cross_level.push(PolynomialCheck::new(
                    format!("s{i}{j}*t{o}{o}{j} - s{o}{j}*t{o}{i}{j}"),
                    [s.get(&[i, j]) * t.get(&[o, o, j]), s.get(&[o, j]) * t.get(&[o, i, j])],
                    tree.depth[j] > tree.depth[i],
                ));
            }
        }
    }
    Ok(LevelReport { source, same_level, cross_level })
}

/// `s_0l s_ij t_llj - s_0i s_ll t_ljj`, expected zero iff `l` tops the shortest
/// equitrek between `i` and `j` and `i` is at least as deep as `j`. Pairs on
/// different levels meet at the source through its loop, and the loop powers of
/// the two monomials agree only when `j` is the shallower leaf.
pub fn top_trek_polynomial_check(
    g: &DirectedGraph,
    stack: &CumulantStack,
    i: usize,
    j: usize,
    l: usize,
) -> Result<PolynomialCheck, ConstraintError> {
    let tree = RootedTree::new(g)?;
    let (s, t) = (&stack.s, &stack.t);
    let o = tree.root;
    Ok(PolynomialCheck::new(
        format!("s{o}{l}*s{i}{j}*t{l}{l}{j} - s{o}{i}*s{l}{l}*t{l}{j}{j}"),
        [
            s.get(&[o, l]) * s.get(&[i, j]) * t.get(&[l, l, j]),
            s.get(&[o, i]) * s.get(&[l, l]) * t.get(&[l, j, j]),
        ],
        tree.depth[i] >= tree.depth[j] && tree.shortest_top(&[i, j]) == l,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EquivalenceWitness {
    Level { level: usize, g: BTreeSet<usize>, h: BTreeSet<usize> },
    Top { i: usize, j: usize, g: usize, h: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeEquivalence {
    pub equivalent: bool,
    pub witness: Option<EquivalenceWitness>,
    /// Exact comparison of the order-3 toric row spaces.
    pub row_equivalent: bool,
}

/// Whether two trees on the same vertices define the same model: equal level sets
/// and equal shortest-equitrek tops for every pair.
pub fn tree_equivalence(g: &DirectedGraph, h: &DirectedGraph) -> Result<TreeEquivalence, ConstraintError> {
    if g.p() != h.p() {
        return Err(ConstraintError::HypothesisViolated("trees have different vertex counts".into()));
    }
    let (tg, th) = (RootedTree::new(g)?, RootedTree::new(h)?);
    let (lg, lh) = (tg.levels(), th.levels());
    let mut witness = (0..lg.len().max(lh.len())).find_map(|level| {
        let a = lg.get(level).cloned().unwrap_or_default();
        let b = lh.get(level).cloned().unwrap_or_default();
        (a != b).then_some(EquivalenceWitness::Level { level, g: a, h: b })
    });
    if witness.is_none() {
        'pairs: for i in 0..g.p() {
            for j in i + 1..g.p() {
                let (a, b) = (tg.shortest_top(&[i, j]), th.shortest_top(&[i, j]));
                if a != b {
                    witness = Some(EquivalenceWitness::Top { i, j, g: a, h: b });
                    break 'pairs;
                }
            }
        }
    }
    let row_equivalent = same_row_space(&toric_matrix(g, 3)?.entries, &toric_matrix(h, 3)?.entries);
    Ok(TreeEquivalence { equivalent: witness.is_none(), witness, row_equivalent })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    /// Columns `U` of `S` without diagonal entries; bound `|pa(U)|`.
    ParentsS,
    /// `S` stacked over every slice `T_i`, columns `U`, diagonal entries removed.
    ParentsStackedQ,
    /// The stacked matrix with rows touched by shared-parent noise removed;
    /// bound `|pa(pa(U))|`.
    Grandparents,
}

/// Parents including the vertex itself when it carries a self-loop.
fn loop_parents(g: &DirectedGraph, v: usize) -> BTreeSet<usize> {
    g.parents_with_loop(v).into_iter().collect()
}

fn parent_set(g: &DirectedGraph, u: &[usize]) -> BTreeSet<usize> {
    u.iter().flat_map(|&v| loop_parents(g, v)).collect()
}

/// Bound for the constraint of `kind` on `u`.
pub fn rank_bound(g: &DirectedGraph, u: &[usize], kind: ConstraintKind) -> usize {
    let pa = parent_set(g, u);
    match kind {
        ConstraintKind::ParentsS | ConstraintKind::ParentsStackedQ => pa.len(),
        ConstraintKind::Grandparents => pa.iter().flat_map(|&w| loop_parents(g, w)).collect::<BTreeSet<_>>().len(),
    }
}

/// Row recipe of a constraint matrix: `(slice, row)` with `slice = None` for `S`
/// and `Some(i)` for `T_i`. Columns are always `u`.
pub fn constraint_rows(g: &DirectedGraph, u: &[usize], kind: ConstraintKind) -> Vec<(Option<usize>, usize)> {
    let p = g.p();
    let in_u = |v: usize| u.contains(&v);
    let slices = std::iter::once(None).chain((0..p).map(Some));
    let mut rows = Vec::new();
    for slice in slices {
        if kind == ConstraintKind::ParentsS && slice.is_some() {
            break;
        }
        for r in 0..p {
            let keep = match (kind, slice) {
                (ConstraintKind::Grandparents, None) => {
                    // s_rv picks up a_vk a_rk w_k whenever r and v share a parent k
                    !in_u(r) && u.iter().all(|&v| loop_parents(g, v).is_disjoint(&loop_parents(g, r)))
                }
                (ConstraintKind::Grandparents, Some(i)) => u.iter().all(|&v| {
                    let common: BTreeSet<usize> = loop_parents(g, v).intersection(&loop_parents(g, r)).copied().collect();
                    common.is_disjoint(&loop_parents(g, i)) && !(i == r && r == v)
                }),
                (_, None) => !in_u(r),
                (_, Some(i)) => !(i == r && in_u(r)),
            };
            if keep {
                rows.push((slice, r));
            }
        }
    }
    rows
}

pub fn constraint_matrix(stack: &CumulantStack, rows: &[(Option<usize>, usize)], u: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), u.len(), |r, c| match rows[r] {
        (None, row) => stack.s.get(&[row, u[c]]),
        (Some(i), row) => stack.t.get(&[i, row, u[c]]),
    })
}

/// `T_i` restricted to columns `u`, without rows whose entries share a parent
/// across all three indices.
pub fn grandparent_slice(g: &DirectedGraph, t: &SymmetricTensor, u: &[usize], i: usize) -> DMatrix<f64> {
    let rows: Vec<usize> = constraint_rows(g, u, ConstraintKind::Grandparents)
        .into_iter()
        .filter_map(|(slice, r)| (slice == Some(i)).then_some(r))
        .collect();
    DMatrix::from_fn(rows.len(), u.len(), |r, c| t.get(&[i, rows[r], u[c]]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankConstraint {
    pub kind: ConstraintKind,
    pub u: Vec<usize>,
    pub bound: usize,
    pub rows: usize,
    pub rank: usize,
    /// True when the bound is at least the smaller matrix dimension.
    pub vacuous: bool,
    pub minors_checked: usize,
    /// Largest `|det|` over checked minors of size `bound + 1`, relative to the
    /// product of the minor's row norms.
    pub max_violation: f64,
}

/// Minors are evaluated exactly when there are at most this many.
pub const MINOR_LIMIT: usize = 2000;

fn check_minors(m: &DMatrix<f64>, size: usize) -> (usize, f64) {
    let (nr, nc) = (m.nrows(), m.ncols());
    let count = binomial(nr, size).saturating_mul(binomial(nc, size));
    if size == 0 || size > nr.min(nc) || count > MINOR_LIMIT {
        return (0, 0.0);
    }
    let mut worst: f64 = 0.0;
    for rs in combinations(nr, size) {
        for cs in combinations(nc, size) {
            let sub = DMatrix::from_fn(size, size, |r, c| m[(rs[r], cs[c])]);
            let norms: f64 = (0..size).map(|r| sub.row(r).norm()).product();
            if norms > 0.0 {
                worst = worst.max(sub.determinant().abs() / norms);
            }
        }
    }
    (count, worst)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

pub fn check_constraint(
    g: &DirectedGraph,
    stack: &CumulantStack,
    u: &[usize],
    kind: ConstraintKind,
    policy: RankPolicy,
) -> RankConstraint {
    let rows = constraint_rows(g, u, kind);
    let m = constraint_matrix(stack, &rows, u);
    let bound = rank_bound(g, u, kind);
    let rank = numeric_rank(&m, policy).rank;
    let vacuous = bound >= m.nrows().min(m.ncols());
    let (minors_checked, max_violation) = if vacuous { (0, 0.0) } else { check_minors(&m, bound + 1) };
    RankConstraint { kind, u: u.to_vec(), bound, rows: rows.len(), rank, vacuous, minors_checked, max_violation }
}

/// Every constraint kind on every nonempty `U` with `|U| <= max_subset`.
pub fn rank_constraints_scan(
    g: &DirectedGraph,
    stack: &CumulantStack,
    max_subset: usize,
    policy: RankPolicy,
) -> Result<Vec<RankConstraint>, ConstraintError> {
    let mut out = Vec::new();
    for k in 1..=max_subset.min(g.p()) {
        for u in combinations(g.p(), k) {
            for kind in [ConstraintKind::ParentsS, ConstraintKind::ParentsStackedQ, ConstraintKind::Grandparents] {
                let c = check_constraint(g, stack, &u, kind, policy);
                if c.rank > c.bound {
                    return Err(ConstraintError::ModelInconsistency { kind, u, bound: c.bound, rank: c.rank });
                }
                out.push(c);
            }
        }
    }
    Ok(out)
}
