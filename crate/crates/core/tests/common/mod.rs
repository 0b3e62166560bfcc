//! Graphs, model points and reference data shared by the integration tests.
#![allow(dead_code)]

use dlyap::constraints::RootedTree;
use dlyap::identify::CumulantStack;
use dlyap::{sample_noise, sample_stable_matrix, DiagonalCumulant, DirectedGraph, ParameterMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn graph(p: usize, edges: &[(usize, usize)]) -> DirectedGraph {
    DirectedGraph::new(p, edges.iter().copied()).unwrap()
}

fn with_loops(p: usize, edges: &[(usize, usize)]) -> DirectedGraph {
    let mut all: Vec<(usize, usize)> = (0..p).map(|v| (v, v)).collect();
    all.extend_from_slice(edges);
    graph(p, &all)
}

/// `0 -> 1` with a self-loop at 0.
pub fn source_loop_pair() -> DirectedGraph {
    graph(2, &[(0, 0), (0, 1)])
}

/// `a00 = 1/2`, `a10 = 1` on [`source_loop_pair`].
pub fn source_loop_pair_model() -> ParameterMatrix {
    ParameterMatrix::from_weights(source_loop_pair(), &[(0, 0, 0.5), (0, 1, 1.0)]).unwrap()
}

/// `0 -> 1` with a self-loop at 1 only.
pub fn sink_loop_pair() -> DirectedGraph {
    graph(2, &[(0, 1), (1, 1)])
}

pub fn two_cycle() -> DirectedGraph {
    graph(2, &[(0, 1), (1, 0)])
}

pub fn two_cycle_with_loops() -> DirectedGraph {
    with_loops(2, &[(0, 1), (1, 0)])
}

/// Both self-loops and `0 -> 1`.
pub fn both_loops_pair() -> DirectedGraph {
    with_loops(2, &[(0, 1)])
}

/// `0 -> 1`, `0 -> 3`, `2 -> 3`, all self-loops.
pub fn four_vertex_ci() -> DirectedGraph {
    with_loops(4, &[(0, 1), (0, 3), (2, 3)])
}

/// `0 -> 1 -> {2, 3}`, loop at the source.
pub fn four_vertex_tree() -> DirectedGraph {
    graph(4, &[(0, 0), (0, 1), (1, 2), (1, 3)])
}

/// `0 -> {1, 2}`, `2 -> {3, 4}`, loop at the source.
pub fn five_vertex_tree() -> DirectedGraph {
    graph(5, &[(0, 0), (0, 1), (0, 2), (2, 3), (2, 4)])
}

/// Identifiable outside the all-loops and polytree hypotheses.
pub fn five_vertex_dag() -> DirectedGraph {
    graph(5, &[(0, 0), (0, 1), (0, 2), (1, 4), (1, 3), (2, 3), (3, 4)])
}

/// `0 -> {1, 2} -> 3`, loop at 0 only.
pub fn diamond() -> DirectedGraph {
    graph(4, &[(0, 0), (0, 1), (0, 2), (1, 3), (2, 3)])
}

/// `0 -> {1, 2}`, loop at 0.
pub fn two_children() -> DirectedGraph {
    graph(3, &[(0, 0), (0, 1), (0, 2)])
}

/// Path `0 -> 1 -> 2 -> 3` with loops at both ends.
pub fn path_end_loops() -> DirectedGraph {
    graph(4, &[(0, 0), (0, 1), (1, 2), (2, 3), (3, 3)])
}

pub fn directed_path(p: usize, loops: bool) -> DirectedGraph {
    let edges: Vec<(usize, usize)> = (1..p).map(|v| (v - 1, v)).collect();
    if loops {
        with_loops(p, &edges)
    } else {
        graph(p, &edges)
    }
}

pub fn noise(p: usize, orders: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<DiagonalCumulant> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    orders.map(|n| sample_noise(p, n, &mut rng)).collect()
}

pub fn model_stack(g: &DirectedGraph, seed: u64, radius: f64, fourth: bool) -> (ParameterMatrix, Vec<DiagonalCumulant>, CumulantStack) {
    let a = sample_stable_matrix(g, seed, radius);
    let w = noise(g.p(), 2..=if fourth { 4 } else { 3 }, seed.wrapping_mul(31).wrapping_add(7));
    let stack = CumulantStack::forward(&a, &w).unwrap();
    (a, w, stack)
}

/// Random DAG with every self-loop and no isolated vertex.
pub fn random_dag_all_loops(p: usize, seed: u64) -> DirectedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let perm = shuffled(p, &mut rng);
        let mut edges = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                if rng.random::<f64>() < 0.45 {
                    edges.push((perm[i], perm[j]));
                }
            }
        }
        let g = with_loops(p, &edges);
        if g.isolated_vertices().is_empty() {
            return g;
        }
    }
}

/// Random polytree with a loop at every source and random loops elsewhere.
pub fn random_polytree(p: usize, seed: u64) -> DirectedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = shuffled(p, &mut rng);
    let mut edges = Vec::new();
    for k in 1..p {
        let other = perm[rng.random_range(0..k)];
        if rng.random::<bool>() {
            edges.push((other, perm[k]));
        } else {
            edges.push((perm[k], other));
        }
    }
    let bare = graph(p, &edges);
    for v in 0..p {
        if bare.parents(v).is_empty() || rng.random::<f64>() < 0.5 {
            edges.push((v, v));
        }
    }
    graph(p, &edges)
}

fn shuffled(p: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..p).collect();
    for i in (1..p).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

/// One representative per isomorphism class of weakly connected digraphs on
/// `p` vertices (no loops): the masks that are minimal over all relabelings.
pub fn connected_digraph_classes(p: usize) -> Vec<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (0..p).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let bit = |i: usize, j: usize| pairs.iter().position(|&x| x == (i, j)).unwrap();
    let chunks = pairs.len().div_ceil(8);
    // tables[perm][chunk][byte]: image of those eight bits under the relabeling
    let tables: Vec<Vec<[u32; 256]>> = permutations(p)
        .iter()
        .map(|perm| {
            (0..chunks)
                .map(|c| {
                    let mut t = [0u32; 256];
                    for (byte, slot) in t.iter_mut().enumerate() {
                        for k in 0..8 {
                            let b = 8 * c + k;
                            if byte >> k & 1 == 1 && b < pairs.len() {
                                let (i, j) = pairs[b];
                                *slot |= 1 << bit(perm[i], perm[j]);
                            }
                        }
                    }
                    t
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    'masks: for mask in 0u32..(1u32 << pairs.len()) {
        for t in &tables {
            let image = (0..chunks).fold(0u32, |acc, c| acc | t[c][(mask >> (8 * c) & 0xff) as usize]);
            if image < mask {
                continue 'masks;
            }
        }
        let edges: Vec<(usize, usize)> = (0..pairs.len()).filter(|&b| mask >> b & 1 == 1).map(|b| pairs[b]).collect();
        if graph(p, &edges).is_weakly_connected() {
            out.push(edges);
        }
    }
    out
}

fn permutations(p: usize) -> Vec<Vec<usize>> {
    if p == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(p - 1) {
        for pos in 0..=rest.len() {
            let mut v = rest.clone();
            v.insert(pos, p - 1);
            out.push(v);
        }
    }
    out
}

/// Every labeled directed tree on `p` vertices with a loop at its root only.
pub fn rooted_trees(p: usize) -> Vec<DirectedGraph> {
    let mut out = Vec::new();
    let total = p.pow(p as u32);
    for code in 0..total {
        // parent[v] for every vertex; the root points to itself
        let parent: Vec<usize> = (0..p).map(|v| code / p.pow(v as u32) % p).collect();
        let roots: Vec<usize> = (0..p).filter(|&v| parent[v] == v).collect();
        if roots.len() != 1 {
            continue;
        }
        let edges: Vec<(usize, usize)> = (0..p).map(|v| (parent[v], v)).collect();
        let g = graph(p, &edges);
        if g.is_weakly_connected() && RootedTree::new(&g).is_ok() {
            out.push(g);
        }
    }
    out
}

pub fn with_all_loops(p: usize, edges: &[(usize, usize)]) -> DirectedGraph {
    with_loops(p, edges)
}

/// Reference parametrization matrix of [`four_vertex_tree`] at order 3: rows
/// `v(2)_0..3`, `v(3)_0..3`, `a_00, a_10, a_21, a_31`; columns `s` then `t` in
/// lexicographic multiset order.
pub const FOUR_VERTEX_TREE_TORIC: [[i64; 30]; 12] = [
    [1, 1, 1, 1, 0, 1, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 1, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1],
    [0, 1, 2, 2, 0, 1, 1, 0, 0, 0, 0, 2, 4, 4, 1, 3, 3, 2, 2, 2, 0, 2, 2, 1, 1, 1, 0, 0, 0, 0],
    [0, 1, 1, 1, 0, 2, 2, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2, 2, 0, 3, 3, 3, 3, 3, 0, 0, 0, 0],
    [0, 0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1, 0, 2, 1, 0, 0, 1, 0, 2, 1, 0, 0, 2, 1, 0],
    [0, 0, 0, 1, 0, 0, 1, 0, 1, 0, 0, 0, 0, 1, 0, 0, 1, 0, 1, 2, 0, 0, 1, 0, 1, 2, 0, 1, 2, 0],
];

/// Reference `p_{x,y}` table for `x, y <= 3`, coefficients in `t^2`.
pub const P_TABLE: [[&[i64]; 4]; 4] = [
    [&[1], &[1], &[1], &[1]],
    [&[1], &[1, 1], &[2, 1], &[3, 1]],
    [&[1], &[2, 1], &[1, 4, 1], &[3, 6, 1]],
    [&[1], &[3, 1], &[3, 6, 1], &[1, 9, 9, 1]],
];
