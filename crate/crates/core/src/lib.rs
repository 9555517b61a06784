//! Simulation and verification of self-similar fragmentation chains stopped
//! at mass thresholds, with the strong-law limit constants of processes
//! counted with random characteristics.

pub mod engine;
pub mod error;
pub mod functionals;
pub mod lab;
pub mod limits;
pub mod models;
pub mod quadrature;
pub mod renewal;
pub mod rng;
#[cfg(test)]
mod testkit;

pub use engine::{
    resume, simulate, simulate_stopped, tagged_fragment_path, Block, EventLog, SimOptions, SplitEvent, StoppedState,
    TaggedPath,
};
pub use error::{FragError, Result};
pub use functionals::{
    count_t, counted_process, empirical_mean, energy, lambda_mart, m_mart, Characteristic, CostFunction,
    EmpiricalCharacteristic, EnergyCharacteristic, FunctionalValue, TestFunction, ZeroCharacteristic,
};
pub use lab::{
    alpha_invariance_check, run_experiment, truncation_sweep, AlphaInvarianceReport, ExperimentConfig,
    ExperimentReport, FunctionalSpec, SweepReport, Tolerances, Verdict,
};
pub use limits::{empirical_kernel, empirical_limit, energy_limit, theorem_constant, LimitConstant, Method, Theorem};
pub use models::{
    solve_malthusian, DislocationModel, Family, FamilyName, FamilyParams, MalthusianData, MassSplit, ModelSpec,
};
pub use renewal::{renewal_oracle, RenewalOptions, RenewalTable};
