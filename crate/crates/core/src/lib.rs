//! Numerical homogenization toolkit for nonlocal peridynamic-type operators
//! on periodic geometry: periodized kernel stacks, cell-problem correctors,
//! effective (homogenized) fourth-order tensors, resolvent solves for the
//! heterogeneous operator, and the local second-order limit problem.

pub mod ansatz;
pub mod cell;
pub mod cg;
pub mod effective;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod local;
pub mod model;
pub mod operators;
pub mod tensors;
pub mod tolerances;
pub mod torus;

pub use ansatz::{
    build_ansatz, consistency_residual, forcing_library, profile_library, AnalyticField,
    ConsistencyRecord,
};
pub use cell::{
    assemble_g_and_solve_b, assemble_g_fields, assemble_h, check_phi_constant, check_psi_zero,
    compute_ctilde_quadratic, compute_ctilde_solvability, ctilde_report, gamma_component,
    mean_inv_lambda1, solve_cell_a, CTildeReport, CellDataG, CellDataH, CorrectorA, CorrectorB,
    PhiReport, PsiReport,
};
pub use cg::{cg_solve, CgOptions, CgReport};
pub use effective::{
    certify_elasticity, effective_tensor, lame_apply_hessian, lame_closed_form, rank_one_minimum,
    scaling_field, EffectiveTensor, ElasticityCertificate,
};
pub use error::{PerihomError, Result};
pub use experiments::{
    default_matrix, run_cell, run_consistency, run_convergence, run_effective, run_solve,
    run_validate, structure_report, write_consistency_csv, write_convergence_csv,
    write_corrector_fields, write_json, CellRun, CellSolution, ConsistencyRun, ConvergenceRow,
    ConvergenceRun, ConvergenceTable, EffectiveRun, ExperimentConfig, LameComparison, SolveRun,
    StructureReport, ValidateRun, Workbench,
};
pub use kernels::{periodic_convolve, KernelBuildOptions, KernelStack, NdFft};
pub use local::{solve_constant_scaling, LocalOperator, LocalSolveReport};
pub use operators::{
    assemble_g, BoxOperator, DomainRecord, GMultiplier, NonlocalOperator, ResolventReport,
};
pub use model::{
    kernel_moments, rho_eps, validate_assumptions, CoefField, CoefficientModel, KernelFamily,
    KernelSpec, MomentReport, ValidationReport,
};
pub use tensors::{Tensor2, Tensor3, Tensor4};
pub use torus::{PeriodicField, TorusGrid};
