//! DC microgrid model with a nested nonlinear distributed controller.
//!
//! The crate covers time-domain simulation with scenario events, equilibrium
//! and quasi-steady-state solves, a sampled monotonicity certificate for the
//! slow consensus dynamics, and linearized spectra with parameter sweeps.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the componentwise model equations.
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod controller;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod plant;
pub mod report;
pub mod scenario;
pub mod stability;

pub use config::{load_config, presets, RunConfig, SimulationConfig, TopologyConfig};
pub use controller::{controller_rhs, ControllerState};
pub use equilibrium::{
    solve_equilibrium, solve_h, EquilibriumReport, QssSolver, QuasiSteadyState, EQUILIBRIUM_TOL,
    QSS_TOL,
};
pub use error::{Error, Result};
pub use grid::{
    ControllerParams, ControllerSettings, ElectricalParams, GridTopology, Microgrid,
    PerUnitElectrical,
};
pub use plant::{control_input, full_jacobian, full_rhs, plant_rhs, StateLayout, SystemState};
pub use report::{
    write_json, write_reduced_csv, write_spectrum_csv, write_sweep_csv, write_trajectory_csv,
};
pub use scenario::{
    integrate, metrics, simulate_reduced, EventKind, IntegrateOptions, LyapunovReference, Metrics,
    ReducedOptions, ReducedTrajectory, Scenario, ScenarioEvent, Trajectory,
};
pub use stability::{
    certify_monotonicity, compute_m, linearize, sweep_eigs, CertificateReport, CertificateSpec,
    LinearizationReport, SweepReport, SweepSpec,
};
