//! Constrained maximisation of the penalised log-likelihood.
//!
//! The inner loop alternates three block updates at fixed smoothing weight h:
//! damped Newton steps for β and then γ against negative-semidefinite
//! curvature surrogates, followed by a multiplicative-iterative step for θ
//! whose scaling keeps every coordinate nonnegative for any damping in
//! [0, 1]. Each block runs a backtracking line search that accepts the first
//! trial not decreasing P, so the P-trace is nondecreasing while the basis
//! stays fixed. Each smoothing round opens by re-placing the knots on the
//! current κ scale; once [`FitOptions::boundary_freeze_iter`] cumulative inner
//! iterations have passed the layout is frozen, so late rounds maximise one
//! fixed objective.
//!
//! The outer loop re-estimates the smoothing parameter from its
//! marginal-likelihood fixed point σ²ₕ = θᵀRθ/(m − ν) with
//! ν = tr{(F̂ + Q)⁻¹Q}, and stops once ν stabilises.

use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::basis::{
    default_knot_count, knot_placement, penalty_matrix, BasisConfig, PenaltyMatrix,
};
use crate::error::{Error, Result};
use crate::inference::{self, CovarianceResult};
use crate::likelihood::{self, assemble, eval_pl, eval_pl_with_geom, Derivs, Geometry, Guard};
use crate::linalg;
use crate::model::{Dataset, ModelParams};

/// Ridge added to a singular curvature surrogate before retrying the solve.
const CURVATURE_RIDGE: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Options and reports.
// ---------------------------------------------------------------------------

/// Tuning knobs for [`fit`] and the individual solver stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Inner convergence: largest parameter move between successive
    /// iterations must fall below this (together with the KKT conditions).
    pub param_tol: f64,
    /// KKT tolerance on the per-subject gradient scale |∂P/∂·|/n.
    pub kkt_tol: f64,
    /// Iteration cap for one inner solve.
    pub max_inner_iters: usize,
    /// Cap on smoothing-update rounds.
    pub max_outer_iters: usize,
    /// Cumulative inner iterations after which the knot layout is frozen.
    pub boundary_freeze_iter: usize,
    /// Outer convergence: |Δν| below this stops the smoothing updates.
    pub nu_tol: f64,
    /// Starting value of σ²ₕ (h = 1/(2σ²ₕ) = 0.5 at the default 1.0).
    pub initial_sigma2h: f64,
    /// Line-search shrink factor.
    pub ls_shrink: f64,
    /// Maximum number of line-search shrinks after the full step.
    pub ls_max_halvings: u32,
    /// θ_u at or below this counts as sitting on the boundary.
    pub theta_thresh: f64,
    /// ∂P/∂θ_u below the negation of this counts as pressing the boundary
    /// (used for the active set of the covariance).
    pub grad_thresh: f64,
    /// Number of basis functions; n^(1/3) rounded when absent.
    pub knot_count: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            param_tol: 1e-6,
            kkt_tol: 1e-4,
            max_inner_iters: 1000,
            max_outer_iters: 25,
            boundary_freeze_iter: 100,
            nu_tol: 1e-2,
            initial_sigma2h: 1.0,
            ls_shrink: 0.5,
            ls_max_halvings: 30,
            theta_thresh: 1e-2,
            grad_thresh: 1e-2,
            knot_count: None,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        fn pos(name: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidOptions(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        }
        pos("param_tol", self.param_tol)?;
        pos("kkt_tol", self.kkt_tol)?;
        pos("nu_tol", self.nu_tol)?;
        pos("initial_sigma2h", self.initial_sigma2h)?;
        pos("theta_thresh", self.theta_thresh)?;
        pos("grad_thresh", self.grad_thresh)?;
        if !(self.ls_shrink > 0.0 && self.ls_shrink < 1.0) {
            return Err(Error::InvalidOptions(format!(
                "ls_shrink must lie strictly between 0 and 1, got {}",
                self.ls_shrink
            )));
        }
        if self.max_inner_iters == 0 {
            return Err(Error::InvalidOptions("max_inner_iters must be at least 1".into()));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidOptions("max_outer_iters must be at least 1".into()));
        }
        if self.knot_count == Some(0) {
            return Err(Error::InvalidOptions("knot_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Solver anomalies worth surfacing alongside the estimates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitFlags {
    /// The β line search was exhausted at least once.
    pub stalled_beta: bool,
    pub stalled_gamma: bool,
    pub stalled_theta: bool,
    /// A singular β curvature surrogate needed a ridge at least once.
    pub regularized_beta: bool,
    pub regularized_gamma: bool,
    /// The smoothing update degenerated and h was frozen.
    pub h_frozen: bool,
    /// The outer loop stopped because ν stabilised.
    pub smoothing_converged: bool,
    /// The final objective evaluation needed no log-argument clamps.
    pub clamp_free: bool,
}

/// One inner iteration in the progress trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterRecord {
    /// Smoothing round (1-based).
    pub outer: usize,
    /// Cumulative inner iteration count at the time of the record.
    pub inner: usize,
    /// Penalised log-likelihood after the θ update.
    pub pl: f64,
    /// The knot layout was re-placed at the start of this iteration, so `pl`
    /// is not comparable with the previous record.
    pub refreshed: bool,
}

/// What a single block update did.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    /// Any coordinate actually changed.
    pub moved: bool,
    /// Accepted fraction of the proposed step (0 when nothing was accepted).
    pub step: f64,
    pub pl_before: f64,
    pub pl_after: f64,
    /// Line search exhausted without an acceptable trial.
    pub stalled: bool,
    /// The curvature surrogate needed a ridge.
    pub regularized: bool,
}

impl StepOutcome {
    fn unchanged(pl: f64) -> Self {
        Self {
            moved: false,
            step: 0.0,
            pl_before: pl,
            pl_after: pl,
            stalled: false,
            regularized: false,
        }
    }
}

/// Result of one inner solve at fixed h.
#[derive(Debug, Clone, Copy)]
pub struct InnerReport {
    /// Parameter moves fell below tolerance with the KKT conditions holding.
    pub converged: bool,
    pub iterations: usize,
    pub kkt_satisfied: bool,
    pub final_pl: f64,
}

/// One evaluation of the smoothing fixed point.
#[derive(Debug, Clone, Copy)]
pub struct SigmaUpdate {
    /// Effective degrees of freedom ν at the current h, when computable.
    pub nu: Option<f64>,
    /// Proposed σ²ₕ (the current value when `degenerate`).
    pub sigma2h: f64,
    /// Penalty weight implied by `sigma2h`.
    pub h: f64,
    /// The update was unusable (θᵀRθ = 0, ν ≥ m, or a singular system);
    /// σ²ₕ stays frozen.
    pub degenerate: bool,
}

/// Mutable solver state: current parameters, basis, penalty and progress.
///
/// The dataset is borrowed by the solver functions rather than owned here, so
/// one state can be stepped manually through [`newton_step_beta`],
/// [`newton_step_gamma`], [`mi_step_theta`], [`inner_solve`] and
/// [`update_sigma2h`].
#[derive(Debug, Clone)]
pub struct FitState {
    pub params: ModelParams,
    pub cfg: BasisConfig,
    pub penalty: PenaltyMatrix,
    pub sigma2h: f64,
    /// Cumulative inner iterations across all smoothing rounds; drives the
    /// knot-layout freeze.
    pub global_inner_iter: usize,
    /// Current smoothing round (0 before the first).
    pub outer_iter: usize,
    pub trace: Vec<IterRecord>,
    pub nu_trace: Vec<f64>,
    pub flags: FitFlags,
}

impl FitState {
    /// Penalty weight h = 1/(2σ²ₕ).
    pub fn h(&self) -> f64 {
        1.0 / (2.0 * self.sigma2h)
    }
}

/// A completed fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub cfg: BasisConfig,
    pub penalty: PenaltyMatrix,
    /// Penalty weight under which the final estimates were computed.
    pub h: f64,
    pub sigma2h: f64,
    /// Effective degrees of freedom at the final h, when the smoothing
    /// system was solvable.
    pub nu: Option<f64>,
    /// Inner convergence, smoothing termination and a clamp-free final
    /// evaluation all held.
    pub converged: bool,
    /// The last inner solve converged.
    pub inner_converged: bool,
    pub flags: FitFlags,
    pub outer_iters: usize,
    pub total_inner_iters: usize,
    pub final_pl: f64,
    pub final_ll: f64,
    /// Indices of θ coordinates treated as actively constrained at zero.
    pub active: Vec<usize>,
    /// Sandwich covariance of (β, γ, θ); absent when the information matrix
    /// could not be inverted (see `covariance_error`).
    pub covariance: Option<CovarianceResult>,
    pub covariance_error: Option<String>,
    pub trace: Vec<IterRecord>,
    pub nu_trace: Vec<f64>,
    /// Elapsed wall time; informational only and excluded from any notion of
    /// reproducibility.
    pub wall_seconds: f64,
}

// ---------------------------------------------------------------------------
// Initial state.
// ---------------------------------------------------------------------------

/// Starting point of the solver: β = γ = 0, knots placed from the observed
/// time scale, flat θ calibrated so baseline median survival sits at the
/// median observed κ, and σ²ₕ from the options.
pub fn initial_state(data: &Dataset, opts: &FitOptions) -> Result<FitState> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let m = opts.knot_count.unwrap_or_else(|| default_knot_count(data.len()));
    let beta = Array1::zeros(data.p());
    let gamma = Array1::zeros(data.q());
    let kappas = data.kappa_endpoints(beta.view(), gamma.view());
    let cfg = knot_placement(&kappas, m)?;
    let penalty = penalty_matrix(&cfg);
    let theta = flat_theta_start(&cfg, &kappas)?;
    Ok(FitState {
        params: ModelParams { beta, gamma, theta },
        cfg,
        penalty,
        sigma2h: opts.initial_sigma2h,
        global_inner_iter: 0,
        outer_iter: 0,
        trace: Vec::new(),
        nu_trace: Vec::new(),
        flags: FitFlags {
            clamp_free: true,
            ..FitFlags::default()
        },
    })
}

/// Every θ_u set to the c > 0 solving Λ₀(κ_med) = ln 2, putting baseline
/// median survival at the median observed time scale.
fn flat_theta_start(cfg: &BasisConfig, kappas: &[f64]) -> Result<Array1<f64>> {
    let mut sorted = kappas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut cum = total_cum(cfg, quantile_sorted(&sorted, 0.5))?;
    if cum <= 0.0 {
        // Median κ of zero (at least half the subjects censored at time 0):
        // fall back to the mean scale.
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        cum = total_cum(cfg, mean)?;
    }
    if cum <= 0.0 {
        return Err(Error::InvalidBasis(
            "cannot calibrate the baseline hazard: no basis mass below the observed time scale"
                .into(),
        ));
    }
    Ok(Array1::from_elem(cfg.m(), std::f64::consts::LN_2 / cum))
}

/// Σ_u Ψ_u(k).
fn total_cum(cfg: &BasisConfig, k: f64) -> Result<f64> {
    let mut s = 0.0;
    for u in 0..cfg.m() {
        s += cfg.cum_psi(u, k)?;
    }
    Ok(s)
}

/// Type-7 quantile of an ascending slice.
fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = level * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

// ---------------------------------------------------------------------------
// Block steps.
// ---------------------------------------------------------------------------

/// Geometry and derivative cache at the current parameter point for one basis
/// configuration.
struct Work<'d> {
    data: &'d Dataset,
    cfg: BasisConfig,
    r: PenaltyMatrix,
    h: f64,
    geom: Geometry,
    derivs: Derivs,
}

impl<'d> Work<'d> {
    fn new(
        data: &'d Dataset,
        cfg: BasisConfig,
        r: PenaltyMatrix,
        h: f64,
        params: &ModelParams,
    ) -> Result<Self> {
        let geom = Geometry::build(data, &cfg, params.beta.view(), params.gamma.view());
        let derivs = assemble(data, &geom, &r, h, params.theta.view(), Guard::Clamped)?;
        Ok(Self {
            data,
            cfg,
            r,
            h,
            geom,
            derivs,
        })
    }

    /// Rebuild after a β/γ move.
    fn moved_regression(&mut self, params: &ModelParams) -> Result<()> {
        self.geom = Geometry::build(self.data, &self.cfg, params.beta.view(), params.gamma.view());
        self.derivs = assemble(
            self.data,
            &self.geom,
            &self.r,
            self.h,
            params.theta.view(),
            Guard::Clamped,
        )?;
        Ok(())
    }

    /// Re-derive after a θ move; the geometry is unchanged.
    fn moved_theta(&mut self, params: &ModelParams) -> Result<()> {
        self.derivs = assemble(
            self.data,
            &self.geom,
            &self.r,
            self.h,
            params.theta.view(),
            Guard::Clamped,
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum RegBlock {
    Beta,
    Gamma,
}

/// d solving −H d = g against the negative-semidefinite surrogate H, with a
/// ridge retry when −H is singular. `None` when even the ridged system has no
/// solution.
fn ascent_direction(ph: &Array2<f64>, g: &Array1<f64>) -> Option<(Array1<f64>, bool)> {
    let neg = ph.mapv(std::ops::Neg::neg);
    if let Some(d) = linalg::solve_spd(&neg, g) {
        return Some((d, false));
    }
    let mut ridged = neg;
    for i in 0..ridged.nrows() {
        ridged[(i, i)] += CURVATURE_RIDGE;
    }
    linalg::solve_spd(&ridged, g).map(|d| (d, true))
}

/// Damped Newton update of one regression block, accepting the first
/// backtracked trial with P′ ≥ P.
fn regression_step(
    work: &mut Work<'_>,
    params: &mut ModelParams,
    opts: &FitOptions,
    block: RegBlock,
) -> Result<StepOutcome> {
    let pl0 = work.derivs.pl;
    let proposal = {
        let (g, ph) = match block {
            RegBlock::Beta => (&work.derivs.g_beta, &work.derivs.ph_beta),
            RegBlock::Gamma => (&work.derivs.g_gamma, &work.derivs.ph_gamma),
        };
        if g.iter().all(|v| *v == 0.0) {
            return Ok(StepOutcome::unchanged(pl0));
        }
        ascent_direction(ph, g)
    };
    let Some((dir, regularized)) = proposal else {
        return Ok(StepOutcome {
            stalled: true,
            regularized: true,
            ..StepOutcome::unchanged(pl0)
        });
    };
    let mut a = 1.0;
    for _ in 0..=opts.ls_max_halvings {
        let current = match block {
            RegBlock::Beta => &params.beta,
            RegBlock::Gamma => &params.gamma,
        };
        let trial = current + &(&dir * a);
        let (bv, gv) = match block {
            RegBlock::Beta => (trial.view(), params.gamma.view()),
            RegBlock::Gamma => (params.beta.view(), trial.view()),
        };
        let (pl, _) = eval_pl(
            work.data,
            &work.cfg,
            &work.r,
            work.h,
            bv,
            gv,
            params.theta.view(),
            Guard::Clamped,
        )?;
        if pl.is_finite() && pl >= pl0 {
            let moved = &trial != current;
            match block {
                RegBlock::Beta => params.beta = trial,
                RegBlock::Gamma => params.gamma = trial,
            }
            if moved {
                work.moved_regression(params)?;
            }
            return Ok(StepOutcome {
                moved,
                step: a,
                pl_before: pl0,
                pl_after: work.derivs.pl,
                stalled: false,
                regularized,
            });
        }
        a *= opts.ls_shrink;
    }
    Ok(StepOutcome {
        stalled: true,
        regularized,
        ..StepOutcome::unchanged(pl0)
    })
}

/// Multiplicative-iterative update of θ: step S·∂P/∂θ with the positive
/// diagonal scaling S_u = θ_u/D_u, damped until P does not decrease. The
/// update keeps θ ≥ 0 for any damping in [0, 1]; only geometry dot products
/// are needed per trial.
fn theta_step(
    work: &mut Work<'_>,
    params: &mut ModelParams,
    opts: &FitOptions,
) -> Result<StepOutcome> {
    let pl0 = work.derivs.pl;
    let scale = likelihood::mi_scale_from_denom(&work.derivs.mi_denom, params.theta.view())?;
    let dir = &scale * &work.derivs.g_theta;
    if dir.iter().all(|v| *v == 0.0) {
        return Ok(StepOutcome::unchanged(pl0));
    }
    let mut a = 1.0;
    for _ in 0..=opts.ls_max_halvings {
        let mut trial = &params.theta + &(&dir * a);
        // θ′_u = θ_u(1−a) + a·θ_u·pos_u/D_u is nonnegative in exact
        // arithmetic; absorb the one-ulp rounding.
        trial.mapv_inplace(|v| v.max(0.0));
        let (pl, _) = eval_pl_with_geom(
            work.data,
            &work.geom,
            &work.r,
            work.h,
            trial.view(),
            Guard::Clamped,
        )?;
        if pl.is_finite() && pl >= pl0 {
            let moved = trial != params.theta;
            params.theta = trial;
            if moved {
                work.moved_theta(params)?;
            }
            return Ok(StepOutcome {
                moved,
                step: a,
                pl_before: pl0,
                pl_after: work.derivs.pl,
                stalled: false,
                regularized: false,
            });
        }
        a *= opts.ls_shrink;
    }
    Ok(StepOutcome {
        stalled: true,
        ..StepOutcome::unchanged(pl0)
    })
}

// ---------------------------------------------------------------------------
// Public stepping API.
// ---------------------------------------------------------------------------

fn check_state(data: &Dataset, state: &FitState) -> Result<()> {
    if state.params.beta.len() != data.p() {
        return Err(Error::DimensionMismatch {
            context: "beta vs dataset covariates",
            expected: data.p(),
            got: state.params.beta.len(),
        });
    }
    if state.params.gamma.len() != data.q() {
        return Err(Error::DimensionMismatch {
            context: "gamma vs dataset covariates",
            expected: data.q(),
            got: state.params.gamma.len(),
        });
    }
    if state.params.theta.len() != state.cfg.m() {
        return Err(Error::DimensionMismatch {
            context: "theta vs basis count",
            expected: state.cfg.m(),
            got: state.params.theta.len(),
        });
    }
    if state.penalty.r.nrows() != state.cfg.m() || state.penalty.r.ncols() != state.cfg.m() {
        return Err(Error::DimensionMismatch {
            context: "penalty vs basis count",
            expected: state.cfg.m(),
            got: state.penalty.r.nrows(),
        });
    }
    state.params.validate_theta()?;
    if !(state.sigma2h > 0.0 && state.sigma2h.is_finite()) {
        return Err(Error::InvalidOptions(format!(
            "sigma2h must be positive and finite, got {}",
            state.sigma2h
        )));
    }
    Ok(())
}

/// One damped Newton update of β at fixed (γ, θ).
pub fn newton_step_beta(
    data: &Dataset,
    state: &mut FitState,
    opts: &FitOptions,
) -> Result<StepOutcome> {
    opts.validate()?;
    check_state(data, state)?;
    let mut work = Work::new(
        data,
        state.cfg.clone(),
        state.penalty.clone(),
        state.h(),
        &state.params,
    )?;
    let out = regression_step(&mut work, &mut state.params, opts, RegBlock::Beta)?;
    state.flags.stalled_beta |= out.stalled;
    state.flags.regularized_beta |= out.regularized;
    Ok(out)
}

/// One damped Newton update of γ at fixed (β, θ).
pub fn newton_step_gamma(
    data: &Dataset,
    state: &mut FitState,
    opts: &FitOptions,
) -> Result<StepOutcome> {
    opts.validate()?;
    check_state(data, state)?;
    let mut work = Work::new(
        data,
        state.cfg.clone(),
        state.penalty.clone(),
        state.h(),
        &state.params,
    )?;
    let out = regression_step(&mut work, &mut state.params, opts, RegBlock::Gamma)?;
    state.flags.stalled_gamma |= out.stalled;
    state.flags.regularized_gamma |= out.regularized;
    Ok(out)
}

/// One damped multiplicative-iterative update of θ at fixed (β, γ).
pub fn mi_step_theta(
    data: &Dataset,
    state: &mut FitState,
    opts: &FitOptions,
) -> Result<StepOutcome> {
    opts.validate()?;
    check_state(data, state)?;
    let mut work = Work::new(
        data,
        state.cfg.clone(),
        state.penalty.clone(),
        state.h(),
        &state.params,
    )?;
    let out = theta_step(&mut work, &mut state.params, opts)?;
    state.flags.stalled_theta |= out.stalled;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Inner loop.
// ---------------------------------------------------------------------------

/// First-order optimality on the per-subject gradient scale: free coordinates
/// need |∂P/∂·|/n below tolerance, θ coordinates may instead sit at the
/// boundary with the gradient pointing outward.
fn kkt_ok(d: &Derivs, params: &ModelParams, n: usize, opts: &FitOptions) -> bool {
    let scale = n.max(1) as f64;
    let small = |g: f64| g.abs() / scale < opts.kkt_tol;
    d.g_beta.iter().all(|&g| small(g))
        && d.g_gamma.iter().all(|&g| small(g))
        && params
            .theta
            .iter()
            .zip(d.g_theta.iter())
            .all(|(&t, &g)| small(g) || (t <= opts.theta_thresh && g < 0.0))
}

/// Largest absolute coordinate move between two parameter points.
fn param_delta(a: &ModelParams, b: &ModelParams) -> f64 {
    fn block(x: &Array1<f64>, y: &Array1<f64>) -> f64 {
        x.iter()
            .zip(y.iter())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max)
    }
    block(&a.beta, &b.beta)
        .max(block(&a.gamma, &b.gamma))
        .max(block(&a.theta, &b.theta))
}

/// Re-place the knots on the κ scale implied by the current (β, γ). Keeps the
/// old layout when placement fails on a degenerate κ multiset or lands on the
/// identical configuration; returns whether the basis actually moved.
fn refresh_basis<'d>(data: &'d Dataset, state: &mut FitState, work: &mut Work<'d>) -> Result<bool> {
    let kappas = data.kappa_endpoints(state.params.beta.view(), state.params.gamma.view());
    let Ok(cfg) = knot_placement(&kappas, state.cfg.m()) else {
        return Ok(false);
    };
    if cfg == state.cfg {
        return Ok(false);
    }
    let penalty = penalty_matrix(&cfg);
    *work = Work::new(data, cfg.clone(), penalty.clone(), work.h, &state.params)?;
    state.cfg = cfg;
    state.penalty = penalty;
    Ok(true)
}

/// Alternating β → γ → θ sweeps at fixed h until parameters settle and the
/// KKT conditions hold. Starting at a KKT point returns immediately with zero
/// iterations. While the cumulative iteration count is below the freeze
/// threshold, the round opens by re-placing the knots on the current κ scale;
/// the remaining sweeps then maximise one fixed objective, which keeps the
/// alternating updates from chasing a moving basis.
pub fn inner_solve(data: &Dataset, state: &mut FitState, opts: &FitOptions) -> Result<InnerReport> {
    opts.validate()?;
    check_state(data, state)?;
    let h = state.h();
    let mut work = Work::new(data, state.cfg.clone(), state.penalty.clone(), h, &state.params)?;
    if kkt_ok(&work.derivs, &state.params, data.len(), opts) {
        return Ok(InnerReport {
            converged: true,
            iterations: 0,
            kkt_satisfied: true,
            final_pl: work.derivs.pl,
        });
    }
    let mut entry_refresh = if state.global_inner_iter < opts.boundary_freeze_iter {
        refresh_basis(data, state, &mut work)?
    } else {
        false
    };
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_inner_iters {
        let refreshed = std::mem::take(&mut entry_refresh);

        let prev = state.params.clone();
        let b = regression_step(&mut work, &mut state.params, opts, RegBlock::Beta)?;
        state.flags.stalled_beta |= b.stalled;
        state.flags.regularized_beta |= b.regularized;
        let g = regression_step(&mut work, &mut state.params, opts, RegBlock::Gamma)?;
        state.flags.stalled_gamma |= g.stalled;
        state.flags.regularized_gamma |= g.regularized;
        let t = theta_step(&mut work, &mut state.params, opts)?;
        state.flags.stalled_theta |= t.stalled;

        iterations += 1;
        state.global_inner_iter += 1;
        state.trace.push(IterRecord {
            outer: state.outer_iter,
            inner: state.global_inner_iter,
            pl: work.derivs.pl,
            refreshed,
        });

        if param_delta(&prev, &state.params) < opts.param_tol
            && kkt_ok(&work.derivs, &state.params, data.len(), opts)
        {
            converged = true;
            break;
        }
    }
    Ok(InnerReport {
        converged,
        iterations,
        kkt_satisfied: kkt_ok(&work.derivs, &state.params, data.len(), opts),
        final_pl: work.derivs.pl,
    })
}

// ---------------------------------------------------------------------------
// Smoothing parameter.
// ---------------------------------------------------------------------------

/// One fixed-point update of σ²ₕ at the current estimates: with F̂ = −∂²ℓ and
/// Q the block-diagonal penalty carrying R/σ²ₕ on the θ block,
/// ν = tr{(F̂ + Q)⁻¹Q} and σ²ₕ ← θᵀRθ/(m − ν). Degenerate updates (θᵀRθ = 0,
/// ν ≥ m, or an unsolvable system) leave σ²ₕ untouched and say so.
pub fn update_sigma2h(data: &Dataset, state: &mut FitState) -> Result<SigmaUpdate> {
    check_state(data, state)?;
    let upd = compute_sigma_update(data, state)?;
    if let Some(nu) = upd.nu {
        state.nu_trace.push(nu);
    }
    if !upd.degenerate {
        state.sigma2h = upd.sigma2h;
    }
    Ok(upd)
}

fn compute_sigma_update(data: &Dataset, state: &FitState) -> Result<SigmaUpdate> {
    let m = state.cfg.m();
    let off = data.p() + data.q();
    let keep = SigmaUpdate {
        nu: None,
        sigma2h: state.sigma2h,
        h: state.h(),
        degenerate: true,
    };

    let hess = likelihood::full_hessian_clamped(data, &state.cfg, &state.params)?;
    let mut a = hess.mapv(std::ops::Neg::neg);
    let w = 1.0 / state.sigma2h;
    for u in 0..m {
        for v in 0..m {
            a[(off + u, off + v)] += w * state.penalty.r[(u, v)];
        }
    }
    // ν = tr{(F̂+Q)⁻¹Q} needs only the θ-block columns of Q.
    let mut qcols = Array2::zeros((off + m, m));
    for u in 0..m {
        for v in 0..m {
            qcols[(off + v, u)] = w * state.penalty.r[(v, u)];
        }
    }
    let Some(x) = linalg::lu_solve_mat(&a, &qcols) else {
        return Ok(keep);
    };
    let nu = (0..m).map(|u| x[(off + u, u)]).sum::<f64>();
    if !nu.is_finite() {
        return Ok(keep);
    }
    let quad = state.penalty.quadratic_form(state.params.theta.view());
    let denom = m as f64 - nu;
    if quad <= 0.0 || denom <= 0.0 {
        return Ok(SigmaUpdate {
            nu: Some(nu),
            ..keep
        });
    }
    let sigma2h = quad / denom;
    Ok(SigmaUpdate {
        nu: Some(nu),
        sigma2h,
        h: 1.0 / (2.0 * sigma2h),
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Full fit.
// ---------------------------------------------------------------------------

/// Fits the model: alternating inner solves and smoothing updates until ν
/// stabilises, then the constrained sandwich covariance at the final
/// estimates. A degenerate smoothing update freezes h and terminates the
/// outer loop with a flag; a failed covariance is reported in
/// `covariance_error` rather than failing the fit.
pub fn fit(data: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    let started = Instant::now();
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.p() + data.q() == 0 {
        return Err(Error::NoCovariates);
    }

    let mut state = initial_state(data, opts)?;
    let mut inner_converged = false;
    let mut nu_prev: Option<f64> = None;
    let mut nu_last: Option<f64> = None;
    let mut pending_sigma: Option<f64> = None;

    for outer in 1..=opts.max_outer_iters {
        // Apply the previous round's proposal only once another round
        // actually runs, so the reported h is the one the final estimates
        // were computed under.
        if let Some(s) = pending_sigma.take() {
            state.sigma2h = s;
        }
        state.outer_iter = outer;
        let report = inner_solve(data, &mut state, opts)?;
        inner_converged = report.converged;

        let upd = compute_sigma_update(data, &state)?;
        if let Some(nu) = upd.nu {
            state.nu_trace.push(nu);
            nu_last = Some(nu);
        }
        if upd.degenerate {
            state.flags.h_frozen = true;
            break;
        }
        let nu = upd.nu.unwrap_or(f64::NAN);
        if nu_prev.is_some_and(|prev| (nu - prev).abs() < opts.nu_tol) {
            state.flags.smoothing_converged = true;
            break;
        }
        nu_prev = Some(nu);
        pending_sigma = Some(upd.sigma2h);
    }

    finalize(data, state, opts, inner_converged, nu_last, started)
}

fn finalize(
    data: &Dataset,
    mut state: FitState,
    opts: &FitOptions,
    inner_converged: bool,
    nu: Option<f64>,
    started: Instant,
) -> Result<FitResult> {
    let h = state.h();
    let geom = Geometry::build(data, &state.cfg, state.params.beta.view(), state.params.gamma.view());
    let derivs = assemble(
        data,
        &geom,
        &state.penalty,
        h,
        state.params.theta.view(),
        Guard::Clamped,
    )?;
    state.flags.clamp_free = !derivs.clamped;

    let active = inference::active_constraints(
        state.params.theta.view(),
        derivs.g_theta.view(),
        opts.theta_thresh,
        opts.grad_thresh,
    );
    let (covariance, covariance_error) = match inference::sandwich_covariance(
        data,
        &state.cfg,
        &state.penalty,
        h,
        &state.params,
        &active,
    ) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let converged = inner_converged
        && (state.flags.smoothing_converged || state.flags.h_frozen)
        && state.flags.clamp_free;

    Ok(FitResult {
        params: state.params,
        cfg: state.cfg,
        penalty: state.penalty,
        h,
        sigma2h: state.sigma2h,
        nu,
        converged,
        inner_converged,
        flags: state.flags,
        outer_iters: state.outer_iter,
        total_inner_iters: state.global_inner_iter,
        final_pl: derivs.pl,
        final_ll: derivs.ll,
        active,
        covariance,
        covariance_error,
        trace: state.trace,
        nu_trace: state.nu_trace,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CensoringKind, StepTrajectory, SubjectRecord};
    use crate::testkit::random_instance;
    use ndarray::array;

    fn subject(id: &str, kind: CensoringKind, yl: f64, yr: f64, x: f64) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            y_left: yl,
            y_right: yr,
            kind,
            x: array![x],
            z: StepTrajectory::zero(0),
        }
    }

    /// Right-censored subjects with an all-zero covariate and θ = 0 satisfy
    /// the KKT conditions outright: no gradient anywhere, boundary gradient
    /// pointing outward.
    fn kkt_fixture() -> (Dataset, FitState) {
        let subjects = (0..8)
            .map(|i| {
                subject(
                    &format!("s{i}"),
                    CensoringKind::Right,
                    0.4 + 0.2 * i as f64,
                    f64::INFINITY,
                    0.0,
                )
            })
            .collect();
        let data = Dataset::with_dims(subjects, 1, 0).unwrap();
        let kappas = data.kappa_endpoints(array![0.0].view(), array![].view());
        let cfg = knot_placement(&kappas, 3).unwrap();
        let penalty = penalty_matrix(&cfg);
        let state = FitState {
            params: ModelParams {
                beta: array![0.0],
                gamma: array![],
                theta: Array1::zeros(3),
            },
            cfg,
            penalty,
            sigma2h: 1.0,
            global_inner_iter: 0,
            outer_iter: 1,
            trace: Vec::new(),
            nu_trace: Vec::new(),
            flags: FitFlags::default(),
        };
        (data, state)
    }

    #[test]
    fn kkt_point_returns_without_iterating() {
        let (data, mut state) = kkt_fixture();
        let before = state.params.clone();
        let report = inner_solve(&data, &mut state, &FitOptions::default()).unwrap();
        assert!(report.converged);
        assert!(report.kkt_satisfied);
        assert_eq!(report.iterations, 0);
        assert!(state.trace.is_empty());
        assert_eq!(state.params, before);
    }

    #[test]
    fn single_block_steps_do_not_decrease_the_objective() {
        for seed in [3u64, 11, 27] {
            let inst = random_instance(seed);
            let mut state = FitState {
                params: inst.params.clone(),
                cfg: inst.cfg.clone(),
                penalty: inst.penalty.clone(),
                sigma2h: 1.0 / (2.0 * inst.h.max(1e-3)),
                global_inner_iter: 0,
                outer_iter: 1,
                trace: Vec::new(),
                nu_trace: Vec::new(),
                flags: FitFlags::default(),
            };
            let opts = FitOptions::default();
            for _ in 0..3 {
                let b = newton_step_beta(&inst.data, &mut state, &opts).unwrap();
                assert!(b.pl_after >= b.pl_before);
                let g = newton_step_gamma(&inst.data, &mut state, &opts).unwrap();
                assert!(g.pl_after >= g.pl_before);
                let t = mi_step_theta(&inst.data, &mut state, &opts).unwrap();
                assert!(t.pl_after >= t.pl_before);
                assert!(state.params.theta.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn inner_solve_trace_is_monotone_between_refreshes() {
        let inst = random_instance(42);
        let opts = FitOptions {
            max_inner_iters: 40,
            ..FitOptions::default()
        };
        let mut state = initial_state(&inst.data, &opts).unwrap();
        inner_solve(&inst.data, &mut state, &opts).unwrap();
        assert!(!state.trace.is_empty());
        for w in state.trace.windows(2) {
            if !w[1].refreshed {
                assert!(
                    w[1].pl >= w[0].pl,
                    "objective fell from {} to {} without a basis change",
                    w[0].pl,
                    w[1].pl
                );
            }
        }
    }

    #[test]
    fn initial_theta_puts_median_survival_at_median_time() {
        let inst = random_instance(7);
        let opts = FitOptions::default();
        let state = initial_state(&inst.data, &opts).unwrap();
        let kappas = inst
            .data
            .kappa_endpoints(state.params.beta.view(), state.params.gamma.view());
        let mut sorted = kappas;
        sorted.sort_by(f64::total_cmp);
        let med = quantile_sorted(&sorted, 0.5);
        let cum = state
            .cfg
            .baseline_cumhaz(&state.params.theta, med)
            .unwrap();
        assert!((cum - std::f64::consts::LN_2).abs() < 1e-12);
        let first = state.params.theta[0];
        assert!(state.params.theta.iter().all(|v| *v == first));
    }

    #[test]
    fn smoothing_update_moves_sigma_toward_the_fixed_point() {
        let inst = random_instance(19);
        let opts = FitOptions {
            max_inner_iters: 60,
            ..FitOptions::default()
        };
        let mut state = initial_state(&inst.data, &opts).unwrap();
        inner_solve(&inst.data, &mut state, &opts).unwrap();
        let upd = update_sigma2h(&inst.data, &mut state).unwrap();
        if !upd.degenerate {
            let nu = upd.nu.unwrap();
            assert!(nu.is_finite());
            assert!(upd.sigma2h > 0.0);
            assert_eq!(state.sigma2h, upd.sigma2h);
            assert_eq!(state.nu_trace, vec![nu]);
        } else {
            assert_eq!(state.sigma2h, opts.initial_sigma2h);
        }
    }

    #[test]
    fn fit_reruns_are_bit_identical() {
        let inst = random_instance(5);
        let opts = FitOptions {
            max_inner_iters: 25,
            max_outer_iters: 3,
            ..FitOptions::default()
        };
        let a = fit(&inst.data, &opts).unwrap();
        let b = fit(&inst.data, &opts).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.h.to_bits(), b.h.to_bits());
        assert_eq!(a.final_pl.to_bits(), b.final_pl.to_bits());
        assert_eq!(a.trace.len(), b.trace.len());
        for (ra, rb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ra.pl.to_bits(), rb.pl.to_bits());
            assert_eq!(ra.refreshed, rb.refreshed);
        }
        assert_eq!(a.nu_trace, b.nu_trace);
    }

    #[test]
    fn fit_keeps_theta_nonnegative_and_reports_consistent_flags() {
        let inst = random_instance(23);
        let opts = FitOptions {
            max_inner_iters: 25,
            max_outer_iters: 3,
            ..FitOptions::default()
        };
        let res = fit(&inst.data, &opts).unwrap();
        assert!(res.params.theta.iter().all(|v| *v >= 0.0));
        assert!(res.h > 0.0);
        assert!((res.h - 1.0 / (2.0 * res.sigma2h)).abs() < 1e-15);
        assert_eq!(res.total_inner_iters, res.trace.len());
        if res.converged {
            assert!(res.inner_converged);
            assert!(res.flags.clamp_free);
        }
        for u in &res.active {
            assert!(res.params.theta[*u] <= opts.theta_thresh);
        }
    }

    #[test]
    fn mismatched_state_dimensions_are_rejected() {
        let (data, mut state) = kkt_fixture();
        state.params.theta = Array1::zeros(5);
        let err = newton_step_beta(&data, &mut state, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn invalid_options_are_rejected() {
        let bad = FitOptions {
            ls_shrink: 1.0,
            ..FitOptions::default()
        };
        assert!(bad.validate().is_err());
        let bad = FitOptions {
            knot_count: Some(0),
            ..FitOptions::default()
        };
        assert!(bad.validate().is_err());
        let bad = FitOptions {
            param_tol: 0.0,
            ..FitOptions::default()
        };
        assert!(bad.validate().is_err());
    }
}
