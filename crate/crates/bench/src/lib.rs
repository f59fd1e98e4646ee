//! Shared setup for the criterion benches: generator draws plus the solver's
//! starting state, so the likelihood-level benches evaluate at a realistic
//! point rather than an arbitrary parameter vector.

use aft_core::optimizer::{initial_state, FitState};
use aft_core::simulation::default_alphas;
use aft_core::{simulate_dataset, Dataset, FitOptions, SimConfig};

/// A mixed-censoring generator draw at the usual settings.
pub fn dataset(n: usize, seed: u64) -> Dataset {
    let (alpha_l, alpha_r) = default_alphas(0.7).expect("0.7 is a tabulated event probability");
    simulate_dataset(&SimConfig {
        n,
        pi_event: 0.7,
        alpha_l,
        alpha_r,
        beta: [1.0, -1.0],
        gamma: -0.1,
        seed,
    })
    .expect("generator settings are valid")
}

/// The solver's starting point for `data` under default options.
pub fn start(data: &Dataset) -> FitState {
    initial_state(data, &FitOptions::default()).expect("dataset supports the default basis")
}
