//! Cumulants, identifiability and polynomial constraints for linear structural
//! equation models of VAR(1) processes with self-loops.
//!
//! The process `X_t = A X_{t-1} + ε_t` runs on a directed graph whose edge `i -> j`
//! carries the weight `A[(j, i)]`. With independent noise its stationary cumulant
//! tensors solve discrete Lyapunov equations; this crate computes them, expresses
//! them through equitreks, recovers `A` from them, and checks the algebraic
//! relations they satisfy.
//!
//! ```
//! use dlyap::{solve_cumulant, DiagonalCumulant, DirectedGraph, ParameterMatrix};
//!
//! let g = DirectedGraph::new(2, [(0, 0), (0, 1)]).unwrap();
//! let a = ParameterMatrix::from_weights(g, &[(0, 0, 0.5), (0, 1, 1.0)]).unwrap();
//! let cov = solve_cumulant(&a, &DiagonalCumulant::new(2, vec![1.0, 1.0])).unwrap();
//! assert!((cov.tensor.get(&[1, 1]) - 7.0 / 3.0).abs() < 1e-12);
//! ```

pub mod constraints;
pub mod graph;
pub mod identify;
pub mod jacobian;
pub mod linalg;
pub mod lyapunov;
pub mod tensor;
pub mod trek;

pub use graph::{DirectedGraph, EquitrekGraph, GraphError, GraphSpec, StarClass, Trek};
pub use lyapunov::{
    recover_noise, recursive_residual, sample_noise, sample_stable_matrix, series_cumulant,
    simulate_and_estimate, solve_cumulant, solve_cumulant_with, spectral_radius, CumulantSolution,
    LyapunovError, NoiseRecovery, NoiseSpec, ParameterMatrix, SimulationEstimate, SolveMethod,
};
pub use tensor::{DenseTensor, DiagonalCumulant, SymmetricTensor, TensorDump};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
