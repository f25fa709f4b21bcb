//! Test oracles for fraglm: f64 reference kernels, finite-difference
//! gradient checks, brute-force screening metrics and SAFE string generators.

pub mod gradcheck;
pub mod metrics;
pub mod reference;
pub mod safe_gen;
