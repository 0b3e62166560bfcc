mod common;

use common::*;
use dlyap::identify::{
    identify_auto, identify_dag_all_loops, identify_polytree, identify_two_node, select_method, two_node_candidates,
    CumulantStack, IdentifyError, IdentifyOptions, Method, TwoNodeVariant, Verdict,
};
use dlyap::{solve_cumulant, DiagonalCumulant, DirectedGraph, ParameterMatrix, SymmetricTensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

fn permute_graph(g: &DirectedGraph, perm: &[usize]) -> DirectedGraph {
    graph(g.p(), &g.edges().iter().map(|&(i, j)| (perm[i], perm[j])).collect::<Vec<_>>())
}

fn permute_tensor(t: &SymmetricTensor, perm: &[usize]) -> SymmetricTensor {
    let mut inv = vec![0; perm.len()];
    for (v, &w) in perm.iter().enumerate() {
        inv[w] = v;
    }
    SymmetricTensor::from_fn(t.p(), t.order(), |idx| t.get(&idx.iter().map(|&v| inv[v]).collect::<Vec<_>>()))
}

fn permutation(p: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..p).collect();
    let mut s = seed;
    for i in (1..p).rev() {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        v.swap(i, (s >> 33) as usize % (i + 1));
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dag_all_loops_round_trip(p in 2usize..=6, seed in 0u64..10_000) {
        let g = random_dag_all_loops(p, seed);
        let (a, w, st) = model_stack(&g, seed, 0.6, true);
        let rep = identify_dag_all_loops(&g, &st, &IdentifyOptions::default()).unwrap();
        prop_assert_eq!(rep.verdict, Verdict::Recovered);
        prop_assert!(max_abs(&rep.matrix().unwrap(), a.matrix()) <= 1e-6);
        prop_assert!(rep.max_residual() <= 1e-8);
        for (got, want) in rep.noise.iter().zip(&w) {
            prop_assert_eq!(got.order, want.order);
            for (x, y) in got.w.iter().zip(&want.w) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn polytree_round_trip(p in 2usize..=6, seed in 0u64..10_000) {
        let g = random_polytree(p, seed);
        let (a, _, st) = model_stack(&g, seed, 0.6, true);
        let rep = identify_polytree(&g, &st, &IdentifyOptions::default()).unwrap();
        prop_assert_eq!(rep.verdict, Verdict::Recovered);
        prop_assert!(max_abs(&rep.matrix().unwrap(), a.matrix()) <= 1e-6);
        prop_assert!(rep.max_residual() <= 1e-8);
    }

    #[test]
    fn relabeling_permutes_the_estimate(p in 2usize..=5, seed in 0u64..10_000) {
        let g = random_dag_all_loops(p, seed);
        let (_, _, st) = model_stack(&g, seed, 0.6, true);
        let perm = permutation(p, seed);
        let gp = permute_graph(&g, &perm);
        let stp = CumulantStack::new(
            permute_tensor(&st.s, &perm),
            permute_tensor(&st.t, &perm),
            st.r.as_ref().map(|r| permute_tensor(r, &perm)),
        )
        .unwrap();
        let opts = IdentifyOptions::default();
        let a = identify_dag_all_loops(&g, &st, &opts).unwrap().matrix().unwrap();
        let ap = identify_dag_all_loops(&gp, &stp, &opts).unwrap().matrix().unwrap();
        for i in 0..p {
            for j in 0..p {
                prop_assert!((ap[(perm[j], perm[i])] - a[(j, i)]).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn source_loop_pair_closed_form() {
    let a = source_loop_pair_model();
    let w = vec![DiagonalCumulant::new(2, vec![1.0, 1.0]), DiagonalCumulant::new(3, vec![1.0, 1.0])];
    let st = CumulantStack::forward(&a, &w).unwrap();
    let sol = identify_two_node(&st, TwoNodeVariant::SourceLoopOnly, &IdentifyOptions::default()).unwrap();
    assert!((sol.a00 - 0.5).abs() < 1e-12);
    assert!((sol.a10 - 1.0).abs() < 1e-12);
    assert!(sol.noise.iter().flat_map(|n| &n.w).all(|&x| (x - 1.0).abs() < 1e-12));
}

#[test]
fn both_loops_closed_form_and_candidates() {
    let g = both_loops_pair();
    let a = ParameterMatrix::from_weights(g, &[(0, 0, 0.6), (0, 1, 0.8), (1, 1, -0.3)]).unwrap();
    let st = CumulantStack::forward(&a, &noise(2, 2..=4, 9)).unwrap();
    let sol = identify_two_node(&st, TwoNodeVariant::BothLoops, &IdentifyOptions::default()).unwrap();
    assert!((sol.a00 - 0.6).abs() < 1e-9 && (sol.a10 - 0.8).abs() < 1e-9);
    assert!((sol.a11.unwrap() + 0.3).abs() < 1e-9);
    let cands = two_node_candidates(&st);
    assert!(cands.iter().any(|c| (c.a00 - 0.6).abs() < 1e-7 && (c.a10 - 0.8).abs() < 1e-7 && (c.a11 + 0.3).abs() < 1e-7));
}

#[test]
fn isolated_vertex_is_refused() {
    let g = graph(3, &[(0, 0), (1, 1), (2, 2), (0, 1)]);
    let (_, _, st) = model_stack(&g, 1, 0.6, true);
    let err = identify_dag_all_loops(&g, &st, &IdentifyOptions::default()).unwrap_err();
    assert!(matches!(err, IdentifyError::HypothesisViolated(_)));
    assert_eq!(select_method(&g), None);
}

#[test]
fn missing_fourth_order_is_a_hypothesis_failure() {
    let g = both_loops_pair();
    let (_, _, st) = model_stack(&g, 2, 0.6, false);
    let err = identify_dag_all_loops(&g, &st, &IdentifyOptions::default()).unwrap_err();
    assert!(matches!(err, IdentifyError::HypothesisViolated(_)));
}

#[test]
fn method_selection_on_fixtures() {
    assert_eq!(select_method(&four_vertex_ci()), Some(Method::DagAllLoops));
    assert_eq!(select_method(&four_vertex_tree()), Some(Method::Polytree));
    assert_eq!(select_method(&path_end_loops()), Some(Method::Polytree));
    assert_eq!(select_method(&diamond()), None);
    assert_eq!(select_method(&two_cycle_with_loops()), None);
    let g = five_vertex_tree();
    let (a, _, st) = model_stack(&g, 3, 0.6, false);
    let rep = identify_auto(&g, &st, &IdentifyOptions::default()).unwrap();
    assert_eq!(rep.verdict, Verdict::Recovered);
    assert!(max_abs(&rep.matrix().unwrap(), a.matrix()) < 1e-8);
}

/// `â31 = a31 + δ a20`, `â32 = a32 - δ a10` keeps `a10 a31 + a20 a32`; the sink
/// noise absorbs the change in its own diagonal cumulants.
#[test]
fn diamond_family_gives_identical_stacks() {
    let g = diamond();
    let (a, w, _) = model_stack(&g, 21, 0.6, true);
    let m = a.matrix();
    for delta in [0.1, -0.25, 0.4] {
        let (a31, a32) = (m[(3, 1)], m[(3, 2)]);
        let (b31, b32) = (a31 + delta * m[(2, 0)], a32 - delta * m[(1, 0)]);
        let weights: Vec<(usize, usize, f64)> = g
            .edges()
            .iter()
            .map(|&(i, j)| (i, j, match (i, j) { (1, 3) => b31, (2, 3) => b32, _ => m[(j, i)] }))
            .collect();
        let b = ParameterMatrix::from_weights(g.clone(), &weights).unwrap();
        let wb: Vec<DiagonalCumulant> = w
            .iter()
            .map(|wn| {
                let n = wn.order as i32;
                let mut v = wn.w.clone();
                v[3] += (a31.powi(n) - b31.powi(n)) * wn.w[1] + (a32.powi(n) - b32.powi(n)) * wn.w[2];
                DiagonalCumulant::new(wn.order, v)
            })
            .collect();
        assert!(wb[0].w[3] > 0.0, "variance stays valid");
        for (wa, wbn) in w.iter().zip(&wb) {
            let x = solve_cumulant(&a, wa).unwrap().tensor;
            let y = solve_cumulant(&b, wbn).unwrap().tensor;
            assert!(x.rel_diff(&y) <= 1e-12, "order {} differs by {:.1e}", wa.order, x.rel_diff(&y));
        }
    }
}

#[test]
fn report_serializes_verdict_kebab_case() {
    let g = four_vertex_ci();
    let (_, _, st) = model_stack(&g, 4, 0.6, true);
    let rep = identify_dag_all_loops(&g, &st, &IdentifyOptions::default()).unwrap();
    let json = serde_json::to_value(&rep).unwrap();
    assert_eq!(json["verdict"], "recovered");
    assert_eq!(json["method"], "dag-all-loops");
}
