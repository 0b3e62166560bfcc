//! Guide chapters; every Rust snippet runs as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/graphs.md")]
pub mod graphs {}
#[doc = include_str!("../../../book/src/cumulants.md")]
pub mod cumulants {}
#[doc = include_str!("../../../book/src/treks.md")]
pub mod treks {}
#[doc = include_str!("../../../book/src/identification.md")]
pub mod identification {}
#[doc = include_str!("../../../book/src/jacobian.md")]
pub mod jacobian {}
#[doc = include_str!("../../../book/src/constraints.md")]
pub mod constraints {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
