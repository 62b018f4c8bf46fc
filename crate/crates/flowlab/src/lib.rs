//! Finite-state laboratory for positivity-preserving semigroups.
//!
//! The crate instantiates, on a finite state space, the machinery around a
//! Metzler generator `L` and a reference measure `m`: the (generally mass
//! creating) semigroup `T_t = exp(tL)`, Doob h-transforms that turn it into a
//! killable sub-Markov chain, σ-finite distribution flows evaluated both by
//! exact kernel products and by importance-weighted Monte Carlo, stopping-time
//! flows with first-passage oracles, and the Revuz correspondence between
//! additive-functional rates and smooth measures. Every probabilistic
//! construction ships with an exact linear-algebra counterpart so that the
//! identities relating them can be certified numerically.
//!
//! Entry points:
//! - [`model::ModelBundle`] validates a generator/measure/shift triple,
//! - [`semigroup::SemigroupEngine`] computes `T_t`, resolvents and excessive
//!   functions,
//! - [`htransform::HTransform`] builds the killed chain of an excessive `h`,
//! - [`flows`], [`stopping`], [`revuz`] evaluate and certify the flow
//!   identities,
//! - [`scenario`] runs a JSON scenario file and emits a machine-readable
//!   report (the `flowlab` binary is a thin wrapper around it).

pub mod flows;
pub mod htransform;
pub mod model;
pub mod pathsim;
pub mod revuz;
pub mod scenario;
pub mod semigroup;
pub mod stopping;

pub use model::ModelBundle;
pub use semigroup::SemigroupEngine;

/// Absolute tolerance for structural (exact linear algebra) checks.
pub const STRUCT_TOL: f64 = 1e-10;
/// Tolerance for the eigenvalue bisection locating the coercivity shift.
pub const BISECT_TOL: f64 = 1e-12;
