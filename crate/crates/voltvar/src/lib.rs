//! Quasi-static simulation and supervisory Volt/VAR optimization for
//! unbalanced three-phase radial distribution feeders.
//!
//! The crate models a feeder down to per-phase detail (3x3 branch impedance
//! blocks, wye/delta loads with PQ/I/Z behavior, ganged and per-phase tap
//! regulators, smart inverters with four-point Volt-Var curves), solves
//! power flow by backward-forward sweep, and layers on top of it:
//!
//! * a two-stage supervisory optimizer (voltage feasibility via inverter
//!   Vars and a pruned discrete tap search, then loss minimization),
//! * a dispatcher that sends inverters a single curve-shift scalar instead
//!   of full curve updates, and
//! * a 24-hour simulation harness comparing local-only control against the
//!   coordinated scheme.

pub mod devices;
pub mod dispatch;
pub mod feeder;
pub mod phase;
pub mod powerflow;
pub mod prng;
pub mod sim;
#[cfg(test)]
pub(crate) mod testkit;
pub mod vvo;

pub use devices::{
    inverter_local_step, local_regulator_step, InverterState, RegulatorMode, RegulatorSpec,
    RegulatorTaps, TapState, VoltVarCurve,
};
pub use feeder::{
    build_admittance, load_feeder, load_feeder_unmodified, load_profiles, AdmittanceView,
    FeederError, FeederModel, NetworkIndex, ProfileSet,
};
pub use phase::{Phase, PhaseSet};
pub use powerflow::{
    check_limits, solve, total_loss, voltage_sensitivity, InjectionSet, PhasorSolution,
    SolveError, SolveOptions, ViolationReport,
};
pub use dispatch::{apply_plan, make_plan, message_accounting, DispatchPlan};
pub use sim::{run_case, CaseId, MetricsReport, Scenario, SimError};
pub use vvo::{run_vvo, tap_search, voltage_variance, OptimizerConfig, VvoError, VvoResult};
