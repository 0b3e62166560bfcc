use std::io::Write;

use dlyap::constraints::{rank_constraints_scan, toric_matrix, RankConstraint};
use dlyap::identify::{
    count_equations_vs_parameters, identify_auto, select_method, CumulantStack, IdentifyOptions, Verdict,
};
use dlyap::jacobian::{local_identifiability_verdict, LocalVerdict};
use dlyap::linalg::RankPolicy;
use dlyap::trek::p_table;
use dlyap::{recursive_residual, solve_cumulant, DirectedGraph, StarClass, VERSION};
use num_traits::ToPrimitive;
use serde::Serialize;
use serde_json::{json, Value};

use crate::input::{load_stack, GraphFile};
use crate::{Command, Failure, Format, RunConfig};

#[derive(Serialize)]
struct Envelope<'a> {
    command: Command,
    version: &'static str,
    seed: u64,
    config: &'a RunConfig,
    result: Value,
}

/// A report and its CSV table.
struct Output {
    result: Value,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

pub fn run(command: Command, config: &RunConfig) -> Result<(), Failure> {
    let (out, failure) = match command {
        Command::Cumulants => (cumulants(config)?, None),
        Command::Identify => identify(config)?,
        Command::Analyze => (analyze(config)?, None),
        Command::Toric => (toric(config)?, None),
        Command::Ptable { max } => (ptable(max), None),
    };
    emit(command, config, out)?;
    failure.map_or(Ok(()), Err)
}

fn emit(command: Command, config: &RunConfig, out: Output) -> Result<(), Failure> {
    let text = match config.format {
        Format::Json => {
            let env = Envelope { command, version: VERSION, seed: config.seed, config, result: out.result };
            serde_json::to_string_pretty(&env).expect("reports serialize") + "\n"
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&out.header).and_then(|_| out.rows.iter().try_for_each(|r| w.write_record(r))).map_err(
                |e| Failure::input(e.to_string()),
            )?;
            String::from_utf8(w.into_inner().map_err(|e| Failure::input(e.to_string()))?).expect("csv is utf-8")
        }
    };
    match &config.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::input(format!("{}: {e}", path.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Failure::input(e.to_string())),
    }
}

fn graph_file(config: &RunConfig) -> Result<(GraphFile, DirectedGraph), Failure> {
    let path = config.graph.as_ref().ok_or_else(|| Failure::input("--graph is required"))?;
    let file = GraphFile::load(path)?;
    let g = file.graph()?;
    Ok((file, g))
}

fn policy(config: &RunConfig) -> RankPolicy {
    RankPolicy { rel_tol: config.tol }
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

fn index_key(idx: &[usize]) -> String {
    idx.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn cumulants(config: &RunConfig) -> Result<Output, Failure> {
    let (file, g) = graph_file(config)?;
    let a = file.model(&g, config.seed, config.radius)?;
    let noise = file.noise(g.p(), &config.sorted_orders(), config.seed)?;
    let mut tensors = Vec::new();
    let mut residuals = Vec::new();
    let mut rows = Vec::new();
    for w in &noise {
        let sol = solve_cumulant(&a, w)?;
        residuals.push(json!({ "order": w.order, "residual": recursive_residual(&sol.tensor, &a, w) }));
        rows.extend(sol.tensor.entries().map(|(idx, v)| vec![w.order.to_string(), index_key(&idx), v.to_string()]));
        tensors.push(sol.tensor);
    }
    let find = |n: usize| tensors.iter().find(|t| t.order() == n).cloned();
    let stack = match (find(2), find(3)) {
        (Some(s), Some(t)) => Some(CumulantStack::new(s, t, find(4)).map_err(|e| Failure::input(e.to_string()))?.to_dump()),
        _ => None,
    };
    let result = json!({
        "a": rows_of(a.matrix()),
        "spectral_radius": dlyap::spectral_radius(a.matrix()),
        "noise": noise,
        "tensors": tensors.iter().map(|t| t.to_dump()).collect::<Vec<_>>(),
        "residuals": residuals,
        "stack": stack,
    });
    Ok(Output { result, header: header(&["order", "index", "value"]), rows })
}

fn identify(config: &RunConfig) -> Result<(Output, Option<Failure>), Failure> {
    let (file, g) = graph_file(config)?;
    let (stack, truth) = match &config.stack {
        Some(path) => (load_stack(path)?, None),
        None => {
            let a = file.model(&g, config.seed, config.radius)?;
            let mut orders = config.sorted_orders();
            orders.extend([2, 3]);
            orders.sort_unstable();
            orders.dedup();
            let noise = file.noise(g.p(), &orders, config.seed)?;
            (CumulantStack::forward(&a, &noise)?, Some(a))
        }
    };
    if stack.p() != g.p() {
        return Err(Failure::input(format!("stack has {} variables, graph has {}", stack.p(), g.p())));
    }
    let opts = IdentifyOptions { degeneracy: config.degeneracy, residual_tol: config.residual_tol, rank: policy(config) };
    let n_max = if stack.r.is_some() { 4 } else { 3 };
    let counts = count_equations_vs_parameters(&g, n_max);
    if let Some(rep) = identify_auto(&g, &stack, &opts) {
        let error = match (&truth, rep.matrix()) {
            (Some(a), Some(est)) => Some((a.matrix() - est).abs().max()),
            _ => None,
        };
        let rows = match rep.matrix() {
            Some(m) => g.edges().iter().map(|&(i, j)| vec![i.to_string(), j.to_string(), m[(j, i)].to_string()]).collect(),
            None => Vec::new(),
        };
        let failure = (rep.verdict != Verdict::Recovered)
            .then(|| Failure::identification(format!("{:?}: {}", rep.verdict, rep.notes.join("; "))));
        let result = json!({ "report": rep, "equation_count": counts, "max_abs_error": error });
        return Ok((Output { result, header: header(&["source", "target", "weight"]), rows }, failure));
    }
    let local = local_identifiability_verdict(&g, config.trials, config.seed, policy(config));
    let failure = (local.verdict == LocalVerdict::RankDeficient).then(|| {
        Failure::identification(format!(
            "no constructive method applies and the Jacobian is deficient by {}; {} parameters against {} equations up to order {n_max}",
            local.deficiency, counts.params, counts.equations
        ))
    });
    let rows = vec![vec![format!("{:?}", local.verdict), local.deficiency.to_string()]];
    let result = json!({
        "method": "jacobian",
        "local": local,
        "equation_count": counts,
    });
    Ok((Output { result, header: header(&["verdict", "deficiency"]), rows }, failure))
}

#[derive(Serialize)]
struct Independence {
    i: usize,
    j: usize,
    given: Vec<usize>,
}

fn analyze(config: &RunConfig) -> Result<Output, Failure> {
    let (file, g) = graph_file(config)?;
    let p = g.p();
    let mut marginal = Vec::new();
    let mut conditional = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            if g.implied_marginal_independence(&[i], &[j]) {
                marginal.push(Independence { i, j, given: Vec::new() });
            }
            for k in (0..p).filter(|&k| k != i && k != j) {
                if g.implied_conditional_independence(&[i], &[j], &[k]) {
                    conditional.push(Independence { i, j, given: vec![k] });
                }
            }
        }
    }
    let star: Option<StarClass> = g.classify_star().ok();
    let a = file.model(&g, config.seed, config.radius)?;
    let stack = CumulantStack::forward(&a, &file.noise(p, &[2, 3], config.seed)?)?;
    let (constraints, inconsistency): (Vec<RankConstraint>, Option<String>) =
        match rank_constraints_scan(&g, &stack, config.max_subset, policy(config)) {
            Ok(c) => (c, None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
    let rows = constraints
        .iter()
        .map(|c| {
            vec![
                serde_json::to_value(c.kind).unwrap().as_str().unwrap().to_string(),
                index_key(&c.u),
                c.bound.to_string(),
                c.rows.to_string(),
                c.rank.to_string(),
                c.vacuous.to_string(),
                c.max_violation.to_string(),
            ]
        })
        .collect();
    let local = local_identifiability_verdict(&g, config.trials, config.seed, policy(config));
    let result = json!({
        "graph": {
            "p": p,
            "edges": g.edges(),
            "dag": g.is_dag(),
            "all_self_loops": g.has_all_self_loops(),
            "polytree": g.is_polytree(),
            "directed_tree": g.is_directed_tree(),
            "method": select_method(&g),
        },
        "marginal_independence": marginal,
        "conditional_independence": conditional,
        "star_class": star,
        "rank_constraints": {
            "checked": constraints.len(),
            "non_vacuous": constraints.iter().filter(|c| !c.vacuous).collect::<Vec<_>>(),
            "inconsistency": inconsistency,
        },
        "local_identifiability": local,
        "equation_count": count_equations_vs_parameters(&g, 3),
    });
    Ok(Output { result, header: header(&["kind", "u", "bound", "rows", "rank", "vacuous", "max_violation"]), rows })
}

fn toric(config: &RunConfig) -> Result<Output, Failure> {
    let (_, g) = graph_file(config)?;
    let order = *config.sorted_orders().last().expect("orders validated non-empty");
    let m = toric_matrix(&g, order.max(2)).map_err(|e| Failure::input(e.to_string()))?;
    let kernel: Vec<Vec<i64>> =
        m.kernel().iter().map(|u| u.iter().map(|x| x.to_i64().expect("kernel entries are small")).collect()).collect();
    let labels = m.column_labels();
    let rows = m
        .row_labels
        .iter()
        .zip(&m.entries)
        .map(|(label, row)| std::iter::once(label.clone()).chain(row.iter().map(i64::to_string)).collect())
        .collect();
    let mut header = header(&["row"]);
    header.extend(labels.iter().cloned());
    let result = json!({ "matrix": m, "column_labels": labels, "kernel": kernel });
    Ok(Output { result, header, rows })
}

fn ptable(max: usize) -> Output {
    let table: Vec<Vec<Vec<i64>>> = p_table(max)
        .iter()
        .map(|row| row.iter().map(|poly| poly.iter().map(|c| c.to_i64().expect("coefficients fit")).collect()).collect())
        .collect();
    let rows = table
        .iter()
        .enumerate()
        .flat_map(|(x, row)| {
            row.iter().enumerate().map(move |(y, poly)| {
                let coeffs = poly.iter().map(i64::to_string).collect::<Vec<_>>().join(" ");
                vec![x.to_string(), y.to_string(), coeffs]
            })
        })
        .collect();
    Output { result: json!({ "max": max, "coefficients_in_t_squared": table }), header: header(&["x", "y", "coefficients"]), rows }
}
