//! Shared fixtures for the benchmarks.

use fragsim_core::DislocationModel;

pub fn models() -> Vec<(&'static str, DislocationModel)> {
    vec![
        ("uniform", DislocationModel::uniform_binary()),
        (
            "dissipative",
            DislocationModel::dissipative_uniform_binary(0.5).expect("valid kappa"),
        ),
        ("beta", DislocationModel::beta_binary(0.5, 1e-2).expect("valid gamma")),
        ("dirac", DislocationModel::dirac_binary(0.4, 0.4).expect("valid split")),
    ]
}
