//! Quadratic matching over permutations and couplings.
//!
//! An energy `E(x) = x' W x + c' x + d` over stacked assignment matrices is
//! lower bounded by a convex relaxation over the coupling polytope, then driven
//! to a permutation by a homotopy that gradually shifts the quadratic form from
//! convex to concave while keeping its values on permutations fixed.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom fix it to `f64`.

pub mod energies;
pub mod error;
pub mod homotopy;
pub mod matching;
pub mod oracle;
pub mod problem;
pub mod projection;
pub mod qp;
pub mod scalar;
pub mod sinkhorn;
pub mod spectral;

pub use error::{Error, Result};
pub use homotopy::{
    bound_hierarchy, fuzzy_solve, homotopy_solve, relax_convex, BoundReport, HomotopyConfig, HomotopyTrace,
    StageRecord,
};
pub use problem::{
    stack, stack_index, unstack, Coupling, EnergySpec, FnOperator, InjectiveAssignment, LinearOperator,
    MarginalSpec, Permutation, QuadraticOperator,
};
pub use projection::{l2_project, linear_assignment, max_coordinate_project};
pub use qp::{solve_quadratic, SolveTrace, SolverConfig};
pub use scalar::Scalar;
pub use sinkhorn::{kl_project, ScalingState, SinkhornConfig};
pub use spectral::{lambda_bar_range, lambda_min_full, EigConfig, EigRange, TangentProjector};

pub type Energy = EnergySpec<f64>;
pub type Marginals = MarginalSpec<f64>;
pub type DCoupling = Coupling<f64>;
pub type Operator = QuadraticOperator<f64>;
pub type Bounds = BoundReport<f64>;

pub type EnergyF32 = EnergySpec<f32>;
pub type MarginalsF32 = MarginalSpec<f32>;
pub type CouplingF32 = Coupling<f32>;
