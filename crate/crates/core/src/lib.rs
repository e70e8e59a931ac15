//! Least-squares finite element methods for distributed optimal control
//! problems with box constraints on the control.
//!
//! The crate covers lowest-order conforming discretizations of three model
//! problems (first-order Poisson, Stokes pseudostress, space-time heat), a
//! primal-dual active set solver for the discrete variational inequality,
//! the built-in a posteriori estimator and an adaptive refinement loop.

pub mod adaptivity;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod fem_spaces;
pub mod linalg;
pub mod mesh;
pub mod problems;
pub mod vi_solver;

pub use adaptivity::{adaptive_loop, compute_eoc, mark_doerfler, AdaptConfig, Column, ConvergenceRecord, LoopStatus};
pub use error::{ExperimentError, FemError, LinalgError, MeshError, SolverError};
pub use estimator::{box_project, estimate_constrained, estimate_unconstrained, EstimatorBreakdown};
pub use experiments::{
    emit_datafile, exact_fields, parse_datafile, run, ExperimentSpec, ManufacturedCase, RefinementMode, RunOptions, RunReport,
};
pub use fem_spaces::{build_dof_map, quadrature, DofMap, QuadratureRule, SpaceKind};
pub use linalg::{SparseMatrix, TripletBuffer};
pub use mesh::{build_lshape, build_rectangle_spacetime, build_unit_square, mesh_stats, refine_nvb, BoundaryLabel, Mesh};
pub use problems::{ControlConstraints, OptimalControlProblem, ProblemKind};
pub use vi_solver::{solve_active_set, solve_coupled, solve_unconstrained, ControlMode, Solution, SolverConfig};
