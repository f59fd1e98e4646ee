//! Deterministic construction of small random model instances.
//!
//! Used by the derivative-verification test suites and the benchmarks, which
//! need many valid (dataset, basis, penalty, parameters) tuples with mixed
//! censoring kinds and genuinely time-varying covariates. Everything is
//! driven by a single seed, so failures reproduce exactly.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::{penalty_matrix, BasisConfig, PenaltyMatrix};
use crate::model::{CensoringKind, Dataset, ModelParams, StepTrajectory, SubjectRecord};

/// A self-consistent random instance on which the penalised log-likelihood
/// and all of its derivatives are finite and strict-mode clean.
pub struct Instance {
    pub data: Dataset,
    pub cfg: BasisConfig,
    pub penalty: PenaltyMatrix,
    pub h: f64,
    pub params: ModelParams,
}

/// Builds a small instance: 5–30 subjects of all censoring kinds, 1–3
/// time-fixed covariates, 1–2 time-varying covariates with one or two jumps,
/// 2–6 hazard basis functions, strictly positive θ.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(5..=30);
    let p = rng.random_range(1..=3);
    let q = rng.random_range(1..=2);
    let m = rng.random_range(2..=6);

    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let x = Array1::from_iter((0..p).map(|_| rng.random_range(-1.0..1.0)));
        let z = random_trajectory(&mut rng, q);
        let kind = match rng.random_range(0..4) {
            0 => CensoringKind::Event,
            1 => CensoringKind::Right,
            2 => CensoringKind::Left,
            _ => CensoringKind::Interval,
        };
        let (y_left, y_right) = match kind {
            CensoringKind::Event => {
                let y = rng.random_range(0.2..2.5);
                (y, y)
            }
            CensoringKind::Right => (rng.random_range(0.2..2.5), f64::INFINITY),
            CensoringKind::Left => (0.0, rng.random_range(0.3..2.5)),
            CensoringKind::Interval => {
                let a = rng.random_range(0.2..1.8);
                let b = a + rng.random_range(0.1..1.0);
                (a, b)
            }
        };
        subjects.push(SubjectRecord {
            id: format!("s{i}"),
            y_left,
            y_right,
            kind,
            x,
            z,
        });
    }
    let data = Dataset::new(subjects).expect("generated subjects are valid");

    // Knots spread over the working κ range with room past the largest
    // endpoint, so every basis function sees data.
    let mut mu = Vec::with_capacity(m);
    let lo = 0.15;
    let hi = 2.8;
    for u in 0..m {
        let base = lo + (hi - lo) * (u as f64 + 0.5) / m as f64;
        mu.push(base + rng.random_range(-0.05..0.05));
    }
    let sigma: Vec<f64> = (0..m).map(|_| rng.random_range(0.4..1.2)).collect();
    let cfg = BasisConfig::new(Array1::from(mu), Array1::from(sigma), 0.0, 4.0)
        .expect("generated knots are valid");
    let penalty = penalty_matrix(&cfg);

    let beta = Array1::from_iter((0..p).map(|_| rng.random_range(-0.7..0.7)));
    let gamma = Array1::from_iter((0..q).map(|_| rng.random_range(-0.7..0.7)));
    let theta = Array1::from_iter((0..m).map(|_| rng.random_range(0.05..1.5)));
    let params = ModelParams::new(beta, gamma, theta).expect("theta is positive");
    let h = rng.random_range(0.0..0.6);

    Instance {
        data,
        cfg,
        penalty,
        h,
        params,
    }
}

fn random_trajectory(rng: &mut ChaCha8Rng, q: usize) -> StepTrajectory {
    let jumps = rng.random_range(0..=2);
    let mut times = vec![0.0];
    let mut t = 0.0;
    for _ in 0..jumps {
        t += rng.random_range(0.2..1.2);
        times.push(t);
    }
    let rows = times.len();
    let values =
        Array2::from_shape_fn((rows, q), |_| rng.random_range(-1.0..1.0));
    StepTrajectory::new(times, values).expect("generated trajectory is valid")
}
