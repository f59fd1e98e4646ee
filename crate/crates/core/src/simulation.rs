//! Synthetic data generation and Monte Carlo evaluation.
//!
//! The generator draws from an AFT model with Weibull baseline hazard
//! λ₀(κ) = 3κ² (so Λ₀(κ) = κ³ and S₀(κ) = exp(−κ³)), two time-fixed
//! covariates x = (Bernoulli(1/2), Unif[0,1]) and one binary time-varying
//! covariate z(t) = 1{t ≥ τ} that switches on at a uniform change point τ.
//! Exact event times come from inverse-transform sampling pushed through the
//! time rescaling; each subject is then partly interval-censored by
//! comparing the event time against scaled uniform censoring limits.

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CensoringKind, Dataset, StepTrajectory, SubjectRecord};
use crate::optimizer::{fit, FitOptions};

/// 97.5% standard normal quantile, for 95% intervals.
const Z_975: f64 = 1.959963984540054;

/// Censoring-window scales calibrated by grid search (see the ignored
/// `calibration_grid` test, which regenerates them) so that at n = 10⁵ the
/// average censoring mix hits the design targets: with 30% events the
/// left/interval/right proportions are ≈ 0.17/0.20/0.33, with 70% events
/// ≈ 0.08/0.14/0.08.
pub const ALPHAS_EVENT_30: (f64, f64) = (1.1497, 2.0150);
pub const ALPHAS_EVENT_70: (f64, f64) = (1.1238, 3.7295);

/// The calibrated (α_L, α_R) for the two standard event proportions; `None`
/// for any other π^E (callers must then choose scales themselves).
pub fn default_alphas(pi_event: f64) -> Option<(f64, f64)> {
    if pi_event == 0.3 {
        Some(ALPHAS_EVENT_30)
    } else if pi_event == 0.7 {
        Some(ALPHAS_EVENT_70)
    } else {
        None
    }
}

/// Generator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    /// Event proportion π^E ∈ [0, 1].
    pub pi_event: f64,
    /// Scale of the left censoring limit ℓ = α_L·U^L.
    pub alpha_l: f64,
    /// Scale of the right censoring limit r = α_R·U^R.
    pub alpha_r: f64,
    /// True regression coefficients for (x₁, x₂).
    pub beta: [f64; 2],
    /// True coefficient of the change-point covariate.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            pi_event: 0.7,
            alpha_l: ALPHAS_EVENT_70.0,
            alpha_r: ALPHAS_EVENT_70.1,
            beta: [1.0, -1.0],
            gamma: -0.1,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi_event) {
            return Err(Error::InvalidOptions(format!(
                "pi_event must lie in [0, 1], got {}",
                self.pi_event
            )));
        }
        for (name, v) in [("alpha_l", self.alpha_l), ("alpha_r", self.alpha_r)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidOptions(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.beta.iter().any(|v| !v.is_finite()) || !self.gamma.is_finite() {
            return Err(Error::InvalidOptions(
                "true coefficients must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Per-subject RNG: one counter-based stream per (replication, subject), so
/// datasets are reproducible and independent of generation order.
fn subject_rng(seed: u64, rep: u64, subject: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((rep << 32) | subject);
    rng
}

/// Draws one subject: covariates, the exact event time through the time
/// rescaling, then the censored observation.
pub fn simulate_subject(cfg: &SimConfig, id: String, rng: &mut impl Rng) -> SubjectRecord {
    let x1 = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    let x2 = rng.random::<f64>();
    // (0, 1] so the change point is a valid strictly-positive breakpoint.
    let tau = 1.0 - rng.random::<f64>();
    let u = 1.0 - rng.random::<f64>();
    let u_e = rng.random::<f64>();
    let u_l = rng.random::<f64>();
    let u_r = rng.random::<f64>();

    // Weibull baseline draw S₀(t₀) = exp(−t₀³), accelerated by the fixed
    // covariates; past the change point the clock runs at e^γ.
    let t0 = (-u.ln()).cbrt();
    let scaled = (x1 * cfg.beta[0] + x2 * cfg.beta[1]).exp() * t0;
    let t = if scaled < tau {
        scaled
    } else {
        tau + cfg.gamma.exp() * (scaled - tau)
    };

    let l = cfg.alpha_l * u_l;
    let r = cfg.alpha_r * u_r;
    let (kind, y_left, y_right) = if u_e < cfg.pi_event {
        (CensoringKind::Event, t, t)
    } else if r < t {
        // Right-censored; when the window is inverted (r < t < ℓ) the
        // construction degenerates to the uninformative record (0, ∞).
        if t < l {
            (CensoringKind::Right, 0.0, f64::INFINITY)
        } else {
            (CensoringKind::Right, r, f64::INFINITY)
        }
    } else if t < l {
        (CensoringKind::Left, 0.0, l)
    } else if l > 0.0 && l < r {
        (CensoringKind::Interval, l, r)
    } else if l < r {
        // ℓ = 0: the interval starts at the time origin, which is exactly
        // left censoring at r.
        (CensoringKind::Left, 0.0, r)
    } else if t > 0.0 {
        // ℓ = r = t: a zero-width interval pins the event time.
        (CensoringKind::Event, t, t)
    } else {
        (CensoringKind::Right, 0.0, f64::INFINITY)
    };

    SubjectRecord {
        id,
        y_left,
        y_right,
        kind,
        x: array![x1, x2],
        z: StepTrajectory::new(vec![0.0, tau], Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).expect("2x1"))
            .expect("valid change-point trajectory"),
    }
}

/// One replication's dataset; `simulate_dataset` is replication 0.
pub fn simulate_dataset_rep(cfg: &SimConfig, rep: u64) -> Result<Dataset> {
    cfg.validate()?;
    let subjects = (0..cfg.n)
        .map(|i| {
            let mut rng = subject_rng(cfg.seed, rep, i as u64);
            simulate_subject(cfg, format!("s{i}"), &mut rng)
        })
        .collect();
    Dataset::with_dims(subjects, 2, 1)
}

/// n independent subjects under `cfg`.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<Dataset> {
    simulate_dataset_rep(cfg, 0)
}

/// Empirical censoring proportions of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensoringMix {
    pub event: f64,
    pub left: f64,
    pub interval: f64,
    pub right: f64,
}

pub fn censoring_mix(data: &Dataset) -> CensoringMix {
    let n = data.len().max(1) as f64;
    let mut counts = [0usize; 4];
    for s in data.subjects() {
        let slot = match s.kind {
            CensoringKind::Event => 0,
            CensoringKind::Left => 1,
            CensoringKind::Interval => 2,
            CensoringKind::Right => 3,
        };
        counts[slot] += 1;
    }
    CensoringMix {
        event: counts[0] as f64 / n,
        left: counts[1] as f64 / n,
        interval: counts[2] as f64 / n,
        right: counts[3] as f64 / n,
    }
}

/// Grid calibration of (α_L, α_R) against target (left, interval, right)
/// proportions: four coarse-to-fine rounds minimising the worst absolute
/// deviation of the simulated mix at the given n.
pub fn calibrate_alphas(
    cfg: &SimConfig,
    targets: (f64, f64, f64),
) -> Result<(f64, f64)> {
    let mut best = (cfg.alpha_l, cfg.alpha_r);
    let mut best_err = f64::INFINITY;
    let (mut lo_l, mut hi_l) = (0.02f64, 4.0f64);
    let (mut lo_r, mut hi_r) = (0.02f64, 8.0f64);
    let steps = 12usize;
    for _ in 0..4 {
        for i in 0..=steps {
            for j in 0..=steps {
                let al = lo_l + (hi_l - lo_l) * i as f64 / steps as f64;
                let ar = lo_r + (hi_r - lo_r) * j as f64 / steps as f64;
                let trial = SimConfig {
                    alpha_l: al,
                    alpha_r: ar,
                    ..*cfg
                };
                let mix = censoring_mix(&simulate_dataset(&trial)?);
                let err = (mix.left - targets.0)
                    .abs()
                    .max((mix.interval - targets.1).abs())
                    .max((mix.right - targets.2).abs());
                if err < best_err {
                    best_err = err;
                    best = (al, ar);
                }
            }
        }
        let half_l = 1.5 * (hi_l - lo_l) / steps as f64;
        let half_r = 1.5 * (hi_r - lo_r) / steps as f64;
        lo_l = (best.0 - half_l).max(1e-3);
        hi_l = best.0 + half_l;
        lo_r = (best.1 - half_r).max(1e-3);
        hi_r = best.1 + half_r;
    }
    Ok(best)
}

/// Monte Carlo summary over replications, in coefficient order β₁, β₂, γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    /// Mean estimate minus truth, per coefficient.
    pub bias: Vec<f64>,
    /// Monte Carlo sample standard deviation of the estimates.
    pub mcsd: Vec<f64>,
    /// Average asymptotic (sandwich) standard error.
    pub aasd: Vec<f64>,
    /// Coverage of 95% intervals built with the MCSD.
    pub cp_mcsd: Vec<f64>,
    /// Coverage of 95% intervals built with each replication's own SE.
    pub cp_aasd: Vec<f64>,
    /// Censoring mix averaged over all generated replications.
    pub mean_mix: CensoringMix,
    pub reps_requested: usize,
    /// Replications entering the summaries.
    pub reps_used: usize,
    /// Replications dropped for failing to fit, converge, or produce a
    /// covariance.
    pub excluded: usize,
}

/// One replication's outcome: the generated dataset's censoring mix and,
/// when the fit converged with a covariance, the point estimates and their
/// standard errors in coefficient order β₁, β₂, γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRun {
    pub rep: usize,
    pub mix: CensoringMix,
    pub estimates: Option<RepEstimates>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepEstimates {
    pub coef: [f64; 3],
    pub se: [f64; 3],
}

fn run_rep(cfg: &SimConfig, rep: u64, fit_opts: &FitOptions) -> Result<RepRun> {
    let data = simulate_dataset_rep(cfg, rep)?;
    let mix = censoring_mix(&data);
    let estimates = match fit(&data, fit_opts) {
        Ok(res) if res.converged => res.covariance.as_ref().map(|cov| RepEstimates {
            coef: [res.params.beta[0], res.params.beta[1], res.params.gamma[0]],
            se: [cov.se_beta[0], cov.se_beta[1], cov.se_gamma[0]],
        }),
        _ => None,
    };
    Ok(RepRun {
        rep: rep as usize,
        mix,
        estimates,
    })
}

/// Runs `reps` independent simulate-and-fit rounds, keeping each
/// replication's estimates. Replications that fail to fit, converge, or
/// produce a covariance carry `estimates: None`.
pub fn monte_carlo_runs(
    cfg: &SimConfig,
    reps: usize,
    fit_opts: &FitOptions,
) -> Result<Vec<RepRun>> {
    cfg.validate()?;
    fit_opts.validate()?;
    if reps < 2 {
        return Err(Error::InvalidOptions(format!(
            "Monte Carlo summaries need at least 2 replications, got {reps}"
        )));
    }
    (0..reps as u64)
        .into_par_iter()
        .map(|rep| run_rep(cfg, rep, fit_opts))
        .collect()
}

/// Runs `reps` independent simulate-and-fit rounds and aggregates bias,
/// Monte Carlo SD, average asymptotic SD, and 95% coverage under both SD
/// notions. Replications that fail to converge are counted and excluded.
pub fn monte_carlo(
    cfg: &SimConfig,
    reps: usize,
    fit_opts: &FitOptions,
) -> Result<MonteCarloReport> {
    let runs = monte_carlo_runs(cfg, reps, fit_opts)?;
    summarize_runs(cfg, &runs)
}

/// Aggregates per-replication outcomes into the Monte Carlo summary.
pub fn summarize_runs(cfg: &SimConfig, outcomes: &[RepRun]) -> Result<MonteCarloReport> {
    let reps = outcomes.len();
    if reps < 2 {
        return Err(Error::InvalidOptions(format!(
            "Monte Carlo summaries need at least 2 replications, got {reps}"
        )));
    }
    let truth = [cfg.beta[0], cfg.beta[1], cfg.gamma];
    let mut mean_mix = CensoringMix {
        event: 0.0,
        left: 0.0,
        interval: 0.0,
        right: 0.0,
    };
    let mut ests: Vec<[f64; 3]> = Vec::with_capacity(reps);
    let mut ses: Vec<[f64; 3]> = Vec::with_capacity(reps);
    for o in outcomes {
        mean_mix.event += o.mix.event;
        mean_mix.left += o.mix.left;
        mean_mix.interval += o.mix.interval;
        mean_mix.right += o.mix.right;
        if let Some(est) = o.estimates {
            ests.push(est.coef);
            ses.push(est.se);
        }
    }
    let scale = reps as f64;
    mean_mix.event /= scale;
    mean_mix.left /= scale;
    mean_mix.interval /= scale;
    mean_mix.right /= scale;

    let used = ests.len();
    if used < 2 {
        return Err(Error::InvalidOptions(format!(
            "only {used} of {reps} replications produced usable fits"
        )));
    }

    let mut bias = Vec::with_capacity(3);
    let mut mcsd = Vec::with_capacity(3);
    let mut aasd = Vec::with_capacity(3);
    let mut cp_mcsd = Vec::with_capacity(3);
    let mut cp_aasd = Vec::with_capacity(3);
    for j in 0..3 {
        let mean = ests.iter().map(|e| e[j]).sum::<f64>() / used as f64;
        let var = ests
            .iter()
            .map(|e| (e[j] - mean) * (e[j] - mean))
            .sum::<f64>()
            / (used - 1) as f64;
        let sd = var.sqrt();
        bias.push(mean - truth[j]);
        mcsd.push(sd);
        aasd.push(ses.iter().map(|s| s[j]).sum::<f64>() / used as f64);
        let cover_mc = ests
            .iter()
            .filter(|e| (e[j] - truth[j]).abs() <= Z_975 * sd)
            .count();
        cp_mcsd.push(cover_mc as f64 / used as f64);
        let cover_aa = ests
            .iter()
            .zip(&ses)
            .filter(|(e, s)| (e[j] - truth[j]).abs() <= Z_975 * s[j])
            .count();
        cp_aasd.push(cover_aa as f64 / used as f64);
    }

    Ok(MonteCarloReport {
        names: vec!["beta1".into(), "beta2".into(), "gamma1".into()],
        truth: truth.to_vec(),
        bias,
        mcsd,
        aasd,
        cp_mcsd,
        cp_aasd,
        mean_mix,
        reps_requested: reps,
        reps_used: used,
        excluded: reps - used,
    })
}
