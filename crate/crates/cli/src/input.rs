use std::path::Path;

use dlyap::identify::{CumulantStack, StackDump};
use dlyap::{sample_noise, sample_stable_matrix, DiagonalCumulant, DirectedGraph, GraphSpec, LyapunovError, ParameterMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Graph file: the graph itself plus optional edge weights and noise cumulants.
/// Anything missing is sampled from the run seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub p: usize,
    pub edges: Vec<[usize; 2]>,
    /// `[source, target, weight]` for every edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<(usize, usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<Vec<DiagonalCumulant>>,
}

impl GraphFile {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
    }

    pub fn graph(&self) -> Result<DirectedGraph, Failure> {
        let spec = GraphSpec { p: self.p, edges: self.edges.clone() };
        DirectedGraph::from_spec(&spec).map_err(|e| Failure::input(e.to_string()))
    }

    /// Inline weights when given (and then certified stable), otherwise a sampled
    /// stable matrix.
    pub fn model(&self, g: &DirectedGraph, seed: u64, radius: f64) -> Result<ParameterMatrix, Failure> {
        let Some(weights) = &self.weights else {
            return Ok(sample_stable_matrix(g, seed, radius));
        };
        let a = ParameterMatrix::from_weights(g.clone(), weights).map_err(|e| Failure::input(e.to_string()))?;
        a.certify().map_err(Failure::from)
    }

    pub fn noise(&self, p: usize, orders: &[usize], seed: u64) -> Result<Vec<DiagonalCumulant>, Failure> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM);
        let mut out = Vec::new();
        for &n in orders {
            // always draw, so the sampled cumulants do not depend on which are inline
            let drawn = sample_noise(p, n, &mut rng);
            let inline = self.noise.as_ref().and_then(|all| all.iter().find(|w| w.order == n));
            match inline {
                Some(w) if w.p() != p => {
                    return Err(Failure::input(format!("order-{n} noise has {} entries, graph has {p}", w.p())))
                }
                Some(w) => out.push(w.clone()),
                None => out.push(drawn),
            }
        }
        Ok(out)
    }
}

const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0000;

/// A stack file holds either a bare stack dump or a `cumulants` report.
pub fn load_stack(path: &Path) -> Result<CumulantStack, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    if let Some(inner) = value.pointer_mut("/result/stack") {
        value = inner.take();
    }
    let dump: StackDump = serde_json::from_value(value).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    CumulantStack::from_dump(&dump).map_err(|e| Failure::input(e.to_string()))
}

impl From<LyapunovError> for Failure {
    fn from(e: LyapunovError) -> Self {
        match e {
            LyapunovError::Unstable { .. } => Failure::unstable(e.to_string()),
            _ => Failure::input(e.to_string()),
        }
    }
}
