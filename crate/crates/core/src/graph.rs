//! Directed graphs with self-loops and the equitrek combinatorics built on them.
//!
//! Vertices are `0..p`. An edge `(i, j)` means `i -> j`; `(i, i)` is a self-loop.
//! In the parameter matrix the edge `i -> j` carries the weight `a[(j, i)]`.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashSet, VecDeque};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("a graph needs at least one vertex")]
    Empty,
    #[error("vertex {vertex} is out of range for p = {p}")]
    VertexOutOfRange { vertex: usize, p: usize },
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(usize, usize),
    #[error("directed cycle through vertex {0}")]
    CyclicGraph(usize),
    #[error("the undirected skeleton is disconnected")]
    DisconnectedGraph,
}

/// JSON form of a graph: `{"p": 2, "edges": [[0,0],[0,1]]}` with `[source, target]` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub p: usize,
    pub edges: Vec<[usize; 2]>,
}

/// Immutable directed graph on `0..p`, self-loops allowed.
#[derive(Debug, Clone)]
pub struct DirectedGraph {
    p: usize,
    edges: Vec<(usize, usize)>,
    loops: Vec<bool>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    equitrek_graph: OnceLock<EquitrekGraph>,
}

impl PartialEq for DirectedGraph {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p && self.edges == other.edges
    }
}

impl Eq for DirectedGraph {}

/// A tuple of directed walks sharing their first vertex.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Trek {
    pub top: usize,
    pub legs: Vec<Vec<usize>>,
}

impl Trek {
    /// Edge length of each leg.
    pub fn leg_lengths(&self) -> Vec<usize> {
        self.legs.iter().map(|l| l.len() - 1).collect()
    }

    pub fn is_equitrek(&self) -> bool {
        let lens = self.leg_lengths();
        lens.windows(2).all(|w| w[0] == w[1])
    }

    /// No vertex repeats within any leg.
    pub fn is_base(&self) -> bool {
        self.legs.iter().all(|leg| {
            let set: HashSet<_> = leg.iter().collect();
            set.len() == leg.len()
        })
    }

    /// Product of edge weights over all legs, with `a[(target, source)]`.
    pub fn monomial(&self, a: &nalgebra::DMatrix<f64>) -> f64 {
        self.legs
            .iter()
            .flat_map(|leg| leg.windows(2))
            .map(|w| a[(w[1], w[0])])
            .product()
    }
}

/// Bidirected graph recording which vertex pairs are joined by an equitrek.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EquitrekGraph {
    pub p: usize,
    /// Unordered pairs stored as `(min, max)`; loops `(i, i)` included.
    pub biedges: BTreeSet<(usize, usize)>,
}

impl EquitrekGraph {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.biedges.contains(&(i.min(j), i.max(j)))
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.p).filter(|&j| j != i && self.contains(i, j)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StarClass {
    Star,
    GeneralizedTwoStar { center: usize },
    Neither,
}

impl DirectedGraph {
    pub fn new(
        p: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if p == 0 {
            return Err(GraphError::Empty);
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            for v in [i, j] {
                if v >= p {
                    return Err(GraphError::VertexOutOfRange { vertex: v, p });
                }
            }
            if !set.insert((i, j)) {
                return Err(GraphError::DuplicateEdge(i, j));
            }
        }
        let mut loops = vec![false; p];
        let mut parents = vec![Vec::new(); p];
        let mut children = vec![Vec::new(); p];
        for &(i, j) in &set {
            if i == j {
                loops[i] = true;
            } else {
                children[i].push(j);
                parents[j].push(i);
            }
        }
        for list in parents.iter_mut() {
            list.sort_unstable();
        }
        Ok(Self {
            p,
            edges: set.into_iter().collect(),
            loops,
            parents,
            children,
            equitrek_graph: OnceLock::new(),
        })
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<Self, GraphError> {
        Self::new(spec.p, spec.edges.iter().map(|e| (e[0], e[1])))
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            p: self.p,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Edges sorted by `(source, target)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.binary_search(&(from, to)).is_ok()
    }

    pub fn has_self_loop(&self, v: usize) -> bool {
        self.loops[v]
    }

    /// Parents other than `v` itself, ascending.
    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    /// Children other than `v` itself, ascending.
    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    /// Parents including `v` when it carries a self-loop.
    pub fn parents_with_loop(&self, v: usize) -> Vec<usize> {
        let mut out = self.parents[v].clone();
        if self.loops[v] {
            out.push(v);
            out.sort_unstable();
        }
        out
    }

    fn successors_with_loop(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        let own = self.loops[v].then_some(v);
        own.into_iter().chain(self.children[v].iter().copied())
    }

    pub fn has_all_self_loops(&self) -> bool {
        self.loops.iter().all(|&l| l)
    }

    /// Vertices without parents other than themselves.
    pub fn sources(&self) -> Vec<usize> {
        (0..self.p).filter(|&v| self.parents[v].is_empty()).collect()
    }

    /// Vertices with no edges other than a possible self-loop.
    pub fn isolated_vertices(&self) -> Vec<usize> {
        (0..self.p)
            .filter(|&v| self.parents[v].is_empty() && self.children[v].is_empty())
            .collect()
    }

    /// Order in which every non-loop edge points forward, smallest index first on ties.
    pub fn topological_order(&self) -> Result<Vec<usize>, GraphError> {
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut heap: BinaryHeap<Reverse<usize>> =
            (0..self.p).filter(|&v| indeg[v] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(self.p);
        while let Some(Reverse(v)) = heap.pop() {
            order.push(v);
            for &c in &self.children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    heap.push(Reverse(c));
                }
            }
        }
        if order.len() < self.p {
            let stuck = (0..self.p).find(|&v| indeg[v] > 0).unwrap_or(0);
            return Err(GraphError::CyclicGraph(stuck));
        }
        Ok(order)
    }

    pub fn is_dag(&self) -> bool {
        self.topological_order().is_ok()
    }

    /// Undirected neighbours ignoring self-loops.
    pub fn skeleton_neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.parents[v]
            .iter()
            .chain(self.children[v].iter())
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Undirected skeleton edges `(min, max)`, self-loops dropped, 2-cycles merged.
    pub fn skeleton_edges(&self) -> BTreeSet<(usize, usize)> {
        self.edges
            .iter()
            .filter(|(i, j)| i != j)
            .map(|&(i, j)| (i.min(j), i.max(j)))
            .collect()
    }

    /// Weakly connected components, each sorted, ordered by smallest vertex.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.p];
        let mut out = Vec::new();
        for s in 0..self.p {
            if seen[s] {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut queue = VecDeque::from([s]);
            while let Some(v) = queue.pop_front() {
                for u in self.skeleton_neighbors(v) {
                    if !seen[u] {
                        seen[u] = true;
                        comp.push(u);
                        queue.push_back(u);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_weakly_connected(&self) -> bool {
        self.components().len() == 1
    }

    /// Skeleton has no cycles; a pair of opposite edges counts as a cycle.
    pub fn is_polyforest(&self) -> bool {
        let non_loop = self.edges.iter().filter(|(i, j)| i != j).count();
        let skeleton = self.skeleton_edges().len();
        non_loop == skeleton && skeleton + self.components().len() == self.p
    }

    pub fn is_polytree(&self) -> bool {
        self.is_polyforest() && self.is_weakly_connected()
    }

    /// Connected polytree in which every vertex but the root has exactly one parent.
    pub fn is_directed_tree(&self) -> bool {
        self.is_polytree() && self.sources().len() == 1
    }

    /// All equitreks with the given leaves and common leg length at most `max_len`,
    /// ordered by length and then lexicographically by legs.
    pub fn enumerate_equitreks(&self, leaves: &[usize], max_len: usize) -> Vec<Trek> {
        assert!(!leaves.is_empty(), "equitreks need at least one leaf");
        let reach = self.exact_reachability(max_len);
        (0..=max_len)
            .flat_map(|len| self.treks_from_reach(leaves, &vec![len; leaves.len()], &reach))
            .collect()
    }

    /// All treks whose leg to `leaves[k]` has exactly `lengths[k]` edges, ordered
    /// lexicographically by legs.
    pub fn treks_with_leg_lengths(&self, leaves: &[usize], lengths: &[usize]) -> Vec<Trek> {
        assert_eq!(leaves.len(), lengths.len(), "one length per leaf");
        let reach = self.exact_reachability(lengths.iter().copied().max().unwrap_or(0));
        self.treks_from_reach(leaves, lengths, &reach)
    }

    fn treks_from_reach(&self, leaves: &[usize], lengths: &[usize], reach: &[Vec<bool>]) -> Vec<Trek> {
        let mut level = Vec::new();
        for top in 0..self.p {
            let walks: Vec<Vec<Vec<usize>>> = leaves
                .iter()
                .zip(lengths)
                .map(|(&leaf, &len)| self.walks(top, leaf, len, reach))
                .collect();
            if walks.iter().any(Vec::is_empty) {
                continue;
            }
            cartesian(&walks, &mut Vec::new(), &mut |legs| {
                level.push(Trek { top, legs: legs.to_vec() });
            });
        }
        level.sort_by(|a, b| a.legs.cmp(&b.legs));
        level
    }

    // reach[k][v * p + w]: a walk of exactly k edges leads from v to w.
    fn exact_reachability(&self, max_len: usize) -> Vec<Vec<bool>> {
        let p = self.p;
        let mut reach = Vec::with_capacity(max_len + 1);
        let mut cur = vec![false; p * p];
        for v in 0..p {
            cur[v * p + v] = true;
        }
        reach.push(cur.clone());
        for _ in 0..max_len {
            let mut next = vec![false; p * p];
            for v in 0..p {
                for u in self.successors_with_loop(v) {
                    for w in 0..p {
                        if cur[u * p + w] {
                            next[v * p + w] = true;
                        }
                    }
                }
            }
            reach.push(next.clone());
            cur = next;
        }
        reach
    }

    fn walks(&self, from: usize, to: usize, len: usize, reach: &[Vec<bool>]) -> Vec<Vec<usize>> {
        let p = self.p;
        let mut out = Vec::new();
        if !reach[len][from * p + to] {
            return out;
        }
        let mut stack = vec![from];
        self.extend_walks(&mut stack, to, len, reach, &mut out);
        out
    }

    fn extend_walks(
        &self,
        walk: &mut Vec<usize>,
        to: usize,
        remaining: usize,
        reach: &[Vec<bool>],
        out: &mut Vec<Vec<usize>>,
    ) {
        if remaining == 0 {
            out.push(walk.clone());
            return;
        }
        let v = *walk.last().unwrap();
        let mut next: Vec<usize> = self.successors_with_loop(v).collect();
        next.sort_unstable();
        for u in next {
            if reach[remaining - 1][u * self.p + to] {
                walk.push(u);
                self.extend_walks(walk, to, remaining - 1, reach, out);
                walk.pop();
            }
        }
    }

    /// Whether an equitrek joins `i` and `j`.
    pub fn equitrek_exists(&self, i: usize, j: usize) -> bool {
        self.equitrek_exists_among(&[i, j])
    }

    /// Whether a single equitrek reaches every listed leaf.
    ///
    /// Backward search on the synchronised product graph: a tuple state steps to any
    /// tuple of parents (self-loops included), and success means reaching a state
    /// whose coordinates all coincide.
    pub fn equitrek_exists_among(&self, leaves: &[usize]) -> bool {
        let n = leaves.len();
        if n == 0 {
            return false;
        }
        let pa: Vec<Vec<usize>> = (0..self.p).map(|v| self.parents_with_loop(v)).collect();
        let encode = |s: &[usize]| s.iter().fold(0usize, |acc, &x| acc * self.p + x);
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        seen.insert(encode(leaves));
        queue.push_back(leaves.to_vec());
        while let Some(state) = queue.pop_front() {
            if state.iter().all(|&x| x == state[0]) {
                return true;
            }
            let lists: Vec<Vec<usize>> = state.iter().map(|&x| pa[x].clone()).collect();
            if lists.iter().any(Vec::is_empty) {
                continue;
            }
            cartesian_flat(&lists, &mut Vec::new(), &mut |prev| {
                if seen.insert(encode(prev)) {
                    queue.push_back(prev.to_vec());
                }
            });
        }
        false
    }

    /// Memoised bidirected equitrek graph.
    pub fn equitrek_graph(&self) -> &EquitrekGraph {
        self.equitrek_graph.get_or_init(|| {
            let mut biedges = BTreeSet::new();
            for i in 0..self.p {
                for j in i..self.p {
                    if self.equitrek_exists(i, j) {
                        biedges.insert((i, j));
                    }
                }
            }
            EquitrekGraph { p: self.p, biedges }
        })
    }

    /// No biedge of the equitrek graph joins `set_i` and `set_j`.
    pub fn implied_marginal_independence(&self, set_i: &[usize], set_j: &[usize]) -> bool {
        let eg = self.equitrek_graph();
        !set_i
            .iter()
            .any(|&i| set_j.iter().any(|&j| eg.contains(i, j)))
    }

    /// `set_i` and `set_j` are separated by the complement of `set_i ∪ set_j ∪ set_k`
    /// in the equitrek graph, i.e. no path between them stays inside the union.
    pub fn implied_conditional_independence(
        &self,
        set_i: &[usize],
        set_j: &[usize],
        set_k: &[usize],
    ) -> bool {
        let eg = self.equitrek_graph();
        let mut allowed = vec![false; self.p];
        for &v in set_i.iter().chain(set_j).chain(set_k) {
            allowed[v] = true;
        }
        let target: HashSet<usize> = set_j.iter().copied().collect();
        let mut seen = vec![false; self.p];
        let mut queue: VecDeque<usize> = set_i.iter().copied().collect();
        for &v in set_i {
            seen[v] = true;
        }
        while let Some(v) = queue.pop_front() {
            if target.contains(&v) {
                return false;
            }
            for u in eg.neighbors(v) {
                if allowed[u] && !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        true
    }

    /// Classifies the undirected skeleton.
    pub fn classify_star(&self) -> Result<StarClass, GraphError> {
        if !self.is_weakly_connected() {
            return Err(GraphError::DisconnectedGraph);
        }
        let edges = self.skeleton_edges();
        let covers_all = |v: usize| edges.iter().all(|&(a, b)| a == v || b == v);
        if (0..self.p).any(covers_all) {
            return Ok(StarClass::Star);
        }
        if self.p < 6 {
            return Ok(StarClass::Neither);
        }
        let mut common: Option<BTreeSet<usize>> = None;
        for b in 0..self.p {
            let nb = self.skeleton_neighbors(b);
            for (x, &a) in nb.iter().enumerate() {
                for &c in &nb[x + 1..] {
                    let path: BTreeSet<usize> = [a, b, c].into();
                    common = Some(match common {
                        None => path,
                        Some(prev) => prev.intersection(&path).copied().collect(),
                    });
                }
            }
        }
        Ok(match common.and_then(|s| s.first().copied()) {
            Some(center) => StarClass::GeneralizedTwoStar { center },
            None => StarClass::Neither,
        })
    }
}

fn cartesian(lists: &[Vec<Vec<usize>>], acc: &mut Vec<Vec<usize>>, f: &mut impl FnMut(&[Vec<usize>])) {
    if acc.len() == lists.len() {
        f(acc);
        return;
    }
    for item in &lists[acc.len()] {
        acc.push(item.clone());
        cartesian(lists, acc, f);
        acc.pop();
    }
}

fn cartesian_flat(lists: &[Vec<usize>], acc: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if acc.len() == lists.len() {
        f(acc);
        return;
    }
    for &item in &lists[acc.len()] {
        acc.push(item);
        cartesian_flat(lists, acc, f);
        acc.pop();
    }
}
