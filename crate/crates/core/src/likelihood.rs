//! The penalised log-likelihood for partly interval-censored AFT data and all
//! of its analytic derivatives: gradients, pseudo-Hessians (negative
//! semidefinite ascent surrogates), the multiplicative-iterative scaling
//! diagonal, and the exact full Hessian used for smoothing selection and
//! covariance estimation.
//!
//! Each subject contributes through at most two κ endpoints. Writing ℓ_i as a
//! function of the endpoint values κ_e and θ, every block derivative is
//! assembled from a handful of per-endpoint scalars (∂ℓ/∂κ_e, ∂²ℓ/∂κ_e∂κ_f,
//! ∂²ℓ/∂κ_e∂θ) combined with the closed-form κ derivatives from
//! [`crate::model`]. Interval-censored terms are computed through the
//! survival-mass ratios S(y^L)/(S(y^L)-S(y^R)) via `expm1`, which stays
//! accurate even when both survival values underflow.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use crate::basis::{BasisConfig, PenaltyMatrix};
use crate::error::{Error, Result};
use crate::model::{kappa_full, kappa_unchecked, CensoringKind, Dataset, ModelParams, SubjectRecord};

/// Clamp floor for logarithm arguments (hazard values, survival masses and
/// survival differences) during line search. A converged fit must evaluate
/// cleanly without this guard.
pub const LOG_GUARD: f64 = 1e-12;

/// Subjects are processed in parallel above this count; per-subject terms are
/// reduced in subject order either way, so results do not depend on the
/// thread count.
const PAR_THRESHOLD: usize = 2048;

/// Whether degenerate logarithm arguments abort evaluation or are clamped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Guard {
    /// Error out on non-positive arguments (public API contract).
    Strict,
    /// Clamp at [`LOG_GUARD`] and record that the clamp fired (line search).
    Clamped,
}

// ---------------------------------------------------------------------------
// Geometry: per-endpoint caches that depend on (β, γ) but not on θ.
// ---------------------------------------------------------------------------

pub(crate) struct Endpoint {
    pub kappa: f64,
    /// dκ/dγ.
    pub dkg: Array1<f64>,
    /// d²κ/dγdγᵀ.
    pub dkg2: Array2<f64>,
    pub psi: Array1<f64>,
    pub cum: Array1<f64>,
    pub psi1: Array1<f64>,
    pub psi2: Array1<f64>,
}

impl Endpoint {
    fn build(
        subject: &SubjectRecord,
        cfg: &BasisConfig,
        beta: ArrayView1<'_, f64>,
        gamma: ArrayView1<'_, f64>,
        t: f64,
    ) -> Self {
        let (kappa, dkg, dkg2) = kappa_full(subject, beta, gamma, t, true);
        let vals = cfg.eval_vectors(kappa);
        Endpoint {
            kappa,
            dkg,
            dkg2,
            psi: vals.psi,
            cum: vals.cum,
            psi1: vals.psi1,
            psi2: vals.psi2,
        }
    }
}

pub(crate) enum GeomKind {
    /// Endpoint at the event time; carries z(y) and the cached direct term
    /// xβ + z(y)γ, both fixed while θ varies.
    Event { zy: Array1<f64>, direct: f64 },
    /// Endpoint at y^L.
    Right,
    /// Endpoint at y^R.
    Left,
    /// First endpoint at y^L, second at y^R.
    Interval { right: Endpoint },
}

pub(crate) struct SubjectGeom {
    pub e: Endpoint,
    pub kind: GeomKind,
}

impl SubjectGeom {
    fn build(
        subject: &SubjectRecord,
        cfg: &BasisConfig,
        beta: ArrayView1<'_, f64>,
        gamma: ArrayView1<'_, f64>,
    ) -> Self {
        match subject.kind {
            CensoringKind::Event => {
                let zy = subject.z.value_at(subject.y_right).to_owned();
                let direct = subject.x.dot(&beta) + zy.dot(&gamma);
                SubjectGeom {
                    e: Endpoint::build(subject, cfg, beta, gamma, subject.y_right),
                    kind: GeomKind::Event { zy, direct },
                }
            }
            CensoringKind::Right => SubjectGeom {
                e: Endpoint::build(subject, cfg, beta, gamma, subject.y_left),
                kind: GeomKind::Right,
            },
            CensoringKind::Left => SubjectGeom {
                e: Endpoint::build(subject, cfg, beta, gamma, subject.y_right),
                kind: GeomKind::Left,
            },
            CensoringKind::Interval => SubjectGeom {
                e: Endpoint::build(subject, cfg, beta, gamma, subject.y_left),
                kind: GeomKind::Interval {
                    right: Endpoint::build(subject, cfg, beta, gamma, subject.y_right),
                },
            },
        }
    }
}

pub(crate) struct Geometry {
    pub subs: Vec<SubjectGeom>,
}

impl Geometry {
    pub fn build(
        data: &Dataset,
        cfg: &BasisConfig,
        beta: ArrayView1<'_, f64>,
        gamma: ArrayView1<'_, f64>,
    ) -> Self {
        let subs = if data.len() >= PAR_THRESHOLD {
            data.subjects()
                .par_iter()
                .map(|s| SubjectGeom::build(s, cfg, beta, gamma))
                .collect()
        } else {
            data.subjects()
                .iter()
                .map(|s| SubjectGeom::build(s, cfg, beta, gamma))
                .collect()
        };
        Geometry { subs }
    }
}

// ---------------------------------------------------------------------------
// Scalar helpers.
// ---------------------------------------------------------------------------

/// 1 - exp(-Λ), exact for small Λ.
#[inline]
fn one_minus_surv(cum: f64) -> f64 {
    -(-cum).exp_m1()
}

/// θ-contraction accumulated in coordinate order. `ndarray::dot` unrolls into
/// several partial sums, which changes the rounding relative to the streaming
/// `hazard_pair` loop; the optimizer compares likelihood values across both
/// paths and needs them bit-identical.
#[inline]
fn sdot(theta: ArrayView1<'_, f64>, v: &Array1<f64>) -> f64 {
    theta.iter().zip(v.iter()).map(|(&t, &x)| t * x).sum()
}

struct GuardState {
    clamped: bool,
}

impl GuardState {
    fn new() -> Self {
        GuardState { clamped: false }
    }

    /// Returns a strictly positive stand-in for `v` (a log argument or a
    /// denominator); errors under [`Guard::Strict`].
    fn positive(&mut self, guard: Guard, v: f64, id: &str, context: &'static str) -> Result<f64> {
        if v > LOG_GUARD {
            Ok(v)
        } else {
            match guard {
                Guard::Strict => Err(Error::LogOfNonPositive {
                    id: id.to_owned(),
                    context,
                }),
                Guard::Clamped => {
                    self.clamped = true;
                    Ok(LOG_GUARD)
                }
            }
        }
    }
}

fn check_dims(data: &Dataset, cfg: &BasisConfig, params: &ModelParams) -> Result<()> {
    let (p, q, m) = params.dims();
    if data.p() != p {
        return Err(Error::DimensionMismatch {
            context: "beta vs dataset covariates",
            expected: data.p(),
            got: p,
        });
    }
    if data.q() != q {
        return Err(Error::DimensionMismatch {
            context: "gamma vs dataset covariates",
            expected: data.q(),
            got: q,
        });
    }
    if cfg.m() != m {
        return Err(Error::DimensionMismatch {
            context: "theta vs basis count",
            expected: cfg.m(),
            got: m,
        });
    }
    params.validate_theta()
}

fn check_penalty(r: &PenaltyMatrix, m: usize) -> Result<()> {
    if r.r.nrows() != m || r.r.ncols() != m {
        return Err(Error::DimensionMismatch {
            context: "penalty matrix vs basis count",
            expected: m,
            got: r.r.nrows(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Log-likelihood evaluation.
// ---------------------------------------------------------------------------

/// One subject's log-likelihood term, from scratch (no cached geometry).
fn subject_ll(
    subject: &SubjectRecord,
    cfg: &BasisConfig,
    beta: ArrayView1<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    theta: ArrayView1<'_, f64>,
    guard: Guard,
) -> Result<(f64, bool)> {
    let mut gs = GuardState::new();
    let value = match subject.kind {
        CensoringKind::Event => {
            let k = kappa_unchecked(subject, beta, gamma, subject.y_right);
            let (lam, cum) = cfg.hazard_pair(theta, k);
            let lam = gs.positive(guard, lam, &subject.id, "event hazard")?;
            let direct = subject.x.dot(&beta) + subject.z.value_at(subject.y_right).dot(&gamma);
            lam.ln() - direct - cum
        }
        CensoringKind::Right => {
            let k = kappa_unchecked(subject, beta, gamma, subject.y_left);
            let (_, cum) = cfg.hazard_pair(theta, k);
            -cum
        }
        CensoringKind::Left => {
            let k = kappa_unchecked(subject, beta, gamma, subject.y_right);
            let (_, cum) = cfg.hazard_pair(theta, k);
            let mass = gs.positive(
                guard,
                one_minus_surv(cum),
                &subject.id,
                "left-censored survival mass",
            )?;
            mass.ln()
        }
        CensoringKind::Interval => {
            let kl = kappa_unchecked(subject, beta, gamma, subject.y_left);
            let kr = kappa_unchecked(subject, beta, gamma, subject.y_right);
            let (_, cum_l) = cfg.hazard_pair(theta, kl);
            let (_, cum_r) = cfg.hazard_pair(theta, kr);
            interval_log_mass(cum_l, cum_r, &mut gs, guard, &subject.id)?
        }
    };
    Ok((value, gs.clamped))
}

/// log(S(y^L) - S(y^R)) = -Λ_L + log(1 - e^{-(Λ_R - Λ_L)}), guarded on the
/// literal survival difference.
fn interval_log_mass(
    cum_l: f64,
    cum_r: f64,
    gs: &mut GuardState,
    guard: Guard,
    id: &str,
) -> Result<f64> {
    let rel = one_minus_surv(cum_r - cum_l);
    let diff = (-cum_l).exp() * rel;
    if diff > LOG_GUARD {
        Ok(-cum_l + rel.ln())
    } else {
        let clamped = gs.positive(guard, diff, id, "interval survival difference")?;
        Ok(clamped.ln())
    }
}

/// Penalised log-likelihood evaluated from the data (no cached geometry);
/// the β/γ line-search path.
pub(crate) fn eval_pl(
    data: &Dataset,
    cfg: &BasisConfig,
    r: &PenaltyMatrix,
    h: f64,
    beta: ArrayView1<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    theta: ArrayView1<'_, f64>,
    guard: Guard,
) -> Result<(f64, bool)> {
    let per_subject: Result<Vec<(f64, bool)>> = if data.len() >= PAR_THRESHOLD {
        data.subjects()
            .par_iter()
            .map(|s| subject_ll(s, cfg, beta, gamma, theta, guard))
            .collect()
    } else {
        data.subjects()
            .iter()
            .map(|s| subject_ll(s, cfg, beta, gamma, theta, guard))
            .collect()
    };
    let mut ll = 0.0;
    let mut clamped = false;
    for (v, c) in per_subject? {
        ll += v;
        clamped |= c;
    }
    Ok((ll - h * r.quadratic_form(theta), clamped))
}

/// Penalised log-likelihood from cached geometry; the θ line-search path
/// (only dot products against θ, no basis evaluations).
pub(crate) fn eval_pl_with_geom(
    data: &Dataset,
    geom: &Geometry,
    r: &PenaltyMatrix,
    h: f64,
    theta: ArrayView1<'_, f64>,
    guard: Guard,
) -> Result<(f64, bool)> {
    let mut ll = 0.0;
    let mut gs = GuardState::new();
    for (subject, sg) in data.subjects().iter().zip(&geom.subs) {
        ll += match &sg.kind {
            GeomKind::Event { direct, .. } => {
                let lam = gs.positive(guard, sdot(theta, &sg.e.psi), &subject.id, "event hazard")?;
                lam.ln() - direct - sdot(theta, &sg.e.cum)
            }
            GeomKind::Right => -sdot(theta, &sg.e.cum),
            GeomKind::Left => {
                let mass = gs.positive(
                    guard,
                    one_minus_surv(sdot(theta, &sg.e.cum)),
                    &subject.id,
                    "left-censored survival mass",
                )?;
                mass.ln()
            }
            GeomKind::Interval { right } => interval_log_mass(
                sdot(theta, &sg.e.cum),
                sdot(theta, &right.cum),
                &mut gs,
                guard,
                &subject.id,
            )?,
        };
    }
    Ok((ll - h * r.quadratic_form(theta), gs.clamped))
}

/// The log-likelihood ℓ(β, γ, θ): exact-event, right-, left- and
/// interval-censored terms summed over subjects.
pub fn log_likelihood(data: &Dataset, cfg: &BasisConfig, params: &ModelParams) -> Result<f64> {
    check_dims(data, cfg, params)?;
    let (ll, _) = eval_pl(
        data,
        cfg,
        &PenaltyMatrix::zero(cfg.m()),
        0.0,
        params.beta.view(),
        params.gamma.view(),
        params.theta.view(),
        Guard::Strict,
    )?;
    Ok(ll)
}

/// P(β, γ, θ) = ℓ(β, γ, θ) - h·θᵀRθ.
pub fn penalised_log_likelihood(
    data: &Dataset,
    cfg: &BasisConfig,
    r: &PenaltyMatrix,
    h: f64,
    params: &ModelParams,
) -> Result<f64> {
    check_dims(data, cfg, params)?;
    check_penalty(r, cfg.m())?;
    let (pl, _) = eval_pl(
        data,
        cfg,
        r,
        h,
        params.beta.view(),
        params.gamma.view(),
        params.theta.view(),
        Guard::Strict,
    )?;
    Ok(pl)
}

// ---------------------------------------------------------------------------
// Per-endpoint derivative scalars.
//
// For one endpoint e of subject i, with ℓ_i viewed as a function of the
// endpoint values κ_e and of θ:
//   a      = ∂ℓ/∂κ_e
//   b      = ∂²ℓ/∂κ_e²
//   c      = ∂²ℓ/∂κ_e∂θ                         (m-vector)
//   a_neg  = the non-positive part of a kept by the pseudo-Hessian
//   b_neg  = the non-positive part of b kept by the pseudo-Hessian
// Interval-censored subjects additionally carry the cross second derivative
// b_lr = ∂²ℓ/∂κ_L∂κ_R, and every subject carries its θ-space pieces
// (gradient, exact θθ Hessian, MI denominators) in `ThetaCoefs`.
// ---------------------------------------------------------------------------

struct EndpointCoefs {
    a: f64,
    b: f64,
    c: Array1<f64>,
    a_neg: f64,
    b_neg: f64,
}

struct ThetaCoefs {
    /// ∂ℓ/∂θ.
    g: Array1<f64>,
    /// ∂²ℓ/∂θ∂θᵀ.
    h: Array2<f64>,
    /// Non-negative per-coordinate MI denominators (the negated
    /// survival-side part of ∂ℓ/∂θ).
    denom: Array1<f64>,
}

struct SubjectCoefs {
    left: EndpointCoefs,
    /// Second endpoint (interval-censored only).
    right: Option<EndpointCoefs>,
    /// ∂²ℓ/∂κ_L∂κ_R (interval-censored only).
    b_lr: f64,
    theta: ThetaCoefs,
}

/// Hazard scalars at one endpoint under the current θ.
struct Haz {
    lam: f64,
    lam1: f64,
    lam2: f64,
    cum: f64,
}

fn haz(e: &Endpoint, theta: ArrayView1<'_, f64>) -> Haz {
    Haz {
        lam: sdot(theta, &e.psi),
        lam1: sdot(theta, &e.psi1),
        lam2: sdot(theta, &e.psi2),
        cum: sdot(theta, &e.cum),
    }
}

fn subject_coefs(
    subject: &SubjectRecord,
    sg: &SubjectGeom,
    theta: ArrayView1<'_, f64>,
    guard: Guard,
    gs: &mut GuardState,
) -> Result<SubjectCoefs> {
    let m = theta.len();
    match &sg.kind {
        GeomKind::Event { .. } => {
            let hz = haz(&sg.e, theta);
            let lam = gs.positive(guard, hz.lam, &subject.id, "event hazard")?;
            let rl = hz.lam1 / lam;
            // c = ψ'/λ - (λ'/λ²)ψ - ψ.
            let c = &sg.e.psi1 / lam - &sg.e.psi * (rl / lam) - &sg.e.psi;
            let g = &sg.e.psi / lam - &sg.e.cum;
            // ∂²ℓ/∂θ∂θᵀ = -ψψᵀ/λ².
            let mut hth = Array2::zeros((m, m));
            rank1_update(&mut hth, -1.0 / (lam * lam), &sg.e.psi, &sg.e.psi);
            Ok(SubjectCoefs {
                left: EndpointCoefs {
                    a: rl - lam,
                    b: hz.lam2 / lam - rl * rl - hz.lam1,
                    c,
                    a_neg: -lam,
                    b_neg: -rl * rl,
                },
                right: None,
                b_lr: 0.0,
                theta: ThetaCoefs {
                    g,
                    h: hth,
                    denom: sg.e.cum.clone(),
                },
            })
        }
        GeomKind::Right => {
            let hz = haz(&sg.e, theta);
            Ok(SubjectCoefs {
                left: EndpointCoefs {
                    a: -hz.lam,
                    b: -hz.lam1,
                    c: -&sg.e.psi,
                    a_neg: -hz.lam,
                    b_neg: 0.0,
                },
                right: None,
                b_lr: 0.0,
                theta: ThetaCoefs {
                    g: -&sg.e.cum,
                    h: Array2::zeros((m, m)),
                    denom: sg.e.cum.clone(),
                },
            })
        }
        GeomKind::Left => {
            let hz = haz(&sg.e, theta);
            let surv = (-hz.cum).exp();
            let mass = gs.positive(
                guard,
                one_minus_surv(hz.cum),
                &subject.id,
                "left-censored survival mass",
            )?;
            // w = S/F, the odds of remaining event-free at y^R.
            let w = surv / mass;
            let a = w * hz.lam;
            let c = &sg.e.psi * w - &sg.e.cum * (a * w + a);
            let g = &sg.e.cum * w;
            // ∂²ℓ/∂θ∂θᵀ = -(w + w²)ΨΨᵀ.
            let mut hth = Array2::zeros((m, m));
            rank1_update(&mut hth, -(w + w * w), &sg.e.cum, &sg.e.cum);
            Ok(SubjectCoefs {
                left: EndpointCoefs {
                    b: w * (hz.lam1 - hz.lam * hz.lam) - a * a,
                    c,
                    a,
                    a_neg: 0.0,
                    b_neg: -(w * hz.lam * hz.lam + a * a),
                },
                right: None,
                b_lr: 0.0,
                theta: ThetaCoefs {
                    g,
                    h: hth,
                    denom: Array1::zeros(m),
                },
            })
        }
        GeomKind::Interval { right } => {
            let hl = haz(&sg.e, theta);
            let hr = haz(right, theta);
            // Ratios r_L = S_L/(S_L - S_R) and r_R = S_R/(S_L - S_R) depend
            // only on the gap Λ_R - Λ_L, so they stay exact even when both
            // survival values underflow.
            let rel = one_minus_surv(hr.cum - hl.cum);
            let diff = (-hl.cum).exp() * rel;
            let rel = if diff > LOG_GUARD {
                rel
            } else {
                gs.positive(guard, diff, &subject.id, "interval survival difference")?;
                // Derivatives at clamped points only steer the line search.
                rel.max(LOG_GUARD)
            };
            let r_l = 1.0 / rel;
            let r_r = (hl.cum - hr.cum).exp() * r_l;
            let a_l = -hl.lam * r_l;
            let a_r = hr.lam * r_r;
            let g = &right.cum * r_r - &sg.e.cum * r_l;
            let c_l = (&sg.e.cum * hl.lam - &sg.e.psi) * r_l - &g * a_l;
            let c_r = (&right.psi - &right.cum * hr.lam) * r_r - &g * a_r;
            // ∂²ℓ/∂θ∂θᵀ = r_LΨ_LΨ_Lᵀ - r_RΨ_RΨ_Rᵀ - GGᵀ.
            let mut hth = Array2::zeros((m, m));
            rank1_update(&mut hth, r_l, &sg.e.cum, &sg.e.cum);
            rank1_update(&mut hth, -r_r, &right.cum, &right.cum);
            rank1_update(&mut hth, -1.0, &g, &g);
            let denom = &sg.e.cum * r_l;
            Ok(SubjectCoefs {
                left: EndpointCoefs {
                    a: a_l,
                    b: r_l * (hl.lam * hl.lam - hl.lam1) - a_l * a_l,
                    c: c_l,
                    a_neg: a_l,
                    b_neg: -a_l * a_l,
                },
                right: Some(EndpointCoefs {
                    a: a_r,
                    b: r_r * (hr.lam1 - hr.lam * hr.lam) - a_r * a_r,
                    c: c_r,
                    a_neg: 0.0,
                    b_neg: -(r_r * hr.lam * hr.lam + a_r * a_r),
                }),
                b_lr: -a_l * a_r,
                theta: ThetaCoefs { g, h: hth, denom },
            })
        }
    }
}

/// acc += s · u vᵀ.
fn rank1_update(acc: &mut Array2<f64>, s: f64, u: &Array1<f64>, v: &Array1<f64>) {
    if s == 0.0 {
        return;
    }
    let (n, k) = acc.dim();
    debug_assert_eq!(n, u.len());
    debug_assert_eq!(k, v.len());
    for i in 0..n {
        let su = s * u[i];
        if su == 0.0 {
            continue;
        }
        let mut row = acc.row_mut(i);
        for j in 0..k {
            row[j] += su * v[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Assembly.
// ---------------------------------------------------------------------------

/// Gradients and curvature surrogates of P at one parameter point.
pub(crate) struct Derivs {
    /// Unpenalised log-likelihood.
    pub ll: f64,
    /// Penalised log-likelihood.
    pub pl: f64,
    pub g_beta: Array1<f64>,
    pub g_gamma: Array1<f64>,
    /// Includes the −2hRθ penalty term.
    pub g_theta: Array1<f64>,
    /// Negative semidefinite β pseudo-Hessian.
    pub ph_beta: Array2<f64>,
    /// Negative semidefinite γ pseudo-Hessian.
    pub ph_gamma: Array2<f64>,
    /// Non-negative MI denominators, including the positive part of 2hRθ.
    pub mi_denom: Array1<f64>,
    pub clamped: bool,
}

/// Single pass over the dataset computing everything the optimizer needs at
/// the current parameter point.
pub(crate) fn assemble(
    data: &Dataset,
    geom: &Geometry,
    r: &PenaltyMatrix,
    h: f64,
    theta: ArrayView1<'_, f64>,
    guard: Guard,
) -> Result<Derivs> {
    let p = data.p();
    let q = data.q();
    let m = theta.len();
    let mut gs = GuardState::new();

    let mut ll = 0.0;
    let mut g_beta = Array1::zeros(p);
    let mut g_gamma = Array1::zeros(q);
    let mut g_theta = Array1::zeros(m);
    let mut ph_beta = Array2::zeros((p, p));
    let mut ph_gamma = Array2::zeros((q, q));
    let mut mi_denom = Array1::zeros(m);

    for (subject, sg) in data.subjects().iter().zip(&geom.subs) {
        ll += match &sg.kind {
            GeomKind::Event { direct, .. } => {
                let lam = gs.positive(guard, sdot(theta, &sg.e.psi), &subject.id, "event hazard")?;
                lam.ln() - direct - sdot(theta, &sg.e.cum)
            }
            GeomKind::Right => -sdot(theta, &sg.e.cum),
            GeomKind::Left => {
                let mass = gs.positive(
                    guard,
                    one_minus_surv(sdot(theta, &sg.e.cum)),
                    &subject.id,
                    "left-censored survival mass",
                )?;
                mass.ln()
            }
            GeomKind::Interval { right } => interval_log_mass(
                sdot(theta, &sg.e.cum),
                sdot(theta, &right.cum),
                &mut gs,
                guard,
                &subject.id,
            )?,
        };

        let co = subject_coefs(subject, sg, theta, guard, &mut gs)?;

        // β block: every ∂κ_e/∂β = -κ_e·x, so all endpoint terms of one
        // subject share the direction x and collapse to scalar weights.
        let mut a_dkb = -co.left.a * sg.e.kappa;
        let mut ph_b = co.left.b_neg * sg.e.kappa * sg.e.kappa + co.left.a_neg * sg.e.kappa;
        // γ block.
        g_gamma.scaled_add(co.left.a, &sg.e.dkg);
        rank1_update(&mut ph_gamma, co.left.b_neg, &sg.e.dkg, &sg.e.dkg);
        ph_gamma.scaled_add(co.left.a_neg, &sg.e.dkg2);

        if let (Some(rc), GeomKind::Interval { right }) = (&co.right, &sg.kind) {
            a_dkb -= rc.a * right.kappa;
            ph_b += rc.b_neg * right.kappa * right.kappa + rc.a_neg * right.kappa;
            g_gamma.scaled_add(rc.a, &right.dkg);
            rank1_update(&mut ph_gamma, rc.b_neg, &right.dkg, &right.dkg);
            ph_gamma.scaled_add(rc.a_neg, &right.dkg2);
        }

        g_beta.scaled_add(a_dkb, &subject.x);
        rank1_update(&mut ph_beta, ph_b, &subject.x, &subject.x);

        // Direct −xβ − z(y)γ term for events.
        if let GeomKind::Event { zy, .. } = &sg.kind {
            g_beta -= &subject.x;
            g_gamma -= zy;
        }

        g_theta += &co.theta.g;
        mi_denom += &co.theta.denom;
    }

    let pl = ll - h * r.quadratic_form(theta);

    // Penalty contributions: gradient −2hRθ; MI denominators take the
    // positive part of 2hRθ coordinate-wise.
    let rtheta = r.mul_theta(theta);
    g_theta.scaled_add(-2.0 * h, &rtheta);
    for u in 0..m {
        let pen = 2.0 * h * rtheta[u];
        if pen > 0.0 {
            mi_denom[u] += pen;
        }
    }

    Ok(Derivs {
        ll,
        pl,
        g_beta,
        g_gamma,
        g_theta,
        ph_beta,
        ph_gamma,
        mi_denom,
        clamped: gs.clamped,
    })
}

/// Exact Hessian of the *unpenalised* log-likelihood over (β, γ, θ), in that
/// block order.
pub(crate) fn full_hessian_from_geom(
    data: &Dataset,
    geom: &Geometry,
    theta: ArrayView1<'_, f64>,
    guard: Guard,
) -> Result<Array2<f64>> {
    let p = data.p();
    let q = data.q();
    let m = theta.len();
    let dim = p + q + m;
    let mut hess = Array2::<f64>::zeros((dim, dim));
    let mut gs = GuardState::new();

    for (subject, sg) in data.subjects().iter().zip(&geom.subs) {
        let co = subject_coefs(subject, sg, theta, guard, &mut gs)?;
        let x = &subject.x;

        let mut endpoints: Vec<(&EndpointCoefs, &Endpoint)> = vec![(&co.left, &sg.e)];
        if let (Some(rc), GeomKind::Interval { right }) = (&co.right, &sg.kind) {
            endpoints.push((rc, right));
        }

        for (c, e) in &endpoints {
            let k = e.kappa;
            // ∂κ/∂β = -κx, ∂²κ/∂β∂βᵀ = κxxᵀ, ∂²κ/∂β∂γᵀ = -x·(dκ/dγ)ᵀ.
            let bb = c.b * k * k + c.a * k;
            for i in 0..p {
                for j in 0..p {
                    hess[(i, j)] += bb * x[i] * x[j];
                }
            }
            let bg = -(c.b * k + c.a);
            for i in 0..p {
                for j in 0..q {
                    hess[(i, p + j)] += bg * x[i] * e.dkg[j];
                }
            }
            for i in 0..q {
                for j in 0..q {
                    hess[(p + i, p + j)] += c.b * e.dkg[i] * e.dkg[j] + c.a * e.dkg2[(i, j)];
                }
            }
            for i in 0..p {
                for u in 0..m {
                    hess[(i, p + q + u)] -= k * x[i] * c.c[u];
                }
            }
            for i in 0..q {
                for u in 0..m {
                    hess[(p + i, p + q + u)] += e.dkg[i] * c.c[u];
                }
            }
        }

        // Interval-censored cross terms between κ_L and κ_R.
        if endpoints.len() == 2 {
            let (kl, kr) = (endpoints[0].1.kappa, endpoints[1].1.kappa);
            let (gl, gr) = (&endpoints[0].1.dkg, &endpoints[1].1.dkg);
            let blr = co.b_lr;
            for i in 0..p {
                for j in 0..p {
                    hess[(i, j)] += 2.0 * blr * kl * kr * x[i] * x[j];
                }
            }
            for i in 0..p {
                for j in 0..q {
                    hess[(i, p + j)] -= blr * x[i] * (kl * gr[j] + kr * gl[j]);
                }
            }
            for i in 0..q {
                for j in 0..q {
                    hess[(p + i, p + j)] += blr * (gl[i] * gr[j] + gr[i] * gl[j]);
                }
            }
        }

        for u in 0..m {
            for v in 0..m {
                hess[(p + q + u, p + q + v)] += co.theta.h[(u, v)];
            }
        }
    }

    // The cross blocks βγ, βθ, γθ were filled above the diagonal; mirror
    // them down.
    for i in 0..dim {
        for j in (i + 1)..dim {
            hess[(j, i)] = hess[(i, j)];
        }
    }

    Ok(hess)
}

// ---------------------------------------------------------------------------
// Public derivative API (strict evaluation, checked dimensions).
// ---------------------------------------------------------------------------

fn assemble_checked(
    data: &Dataset,
    cfg: &BasisConfig,
    r: &PenaltyMatrix,
    h: f64,
    params: &ModelParams,
) -> Result<Derivs> {
    check_dims(data, cfg, params)?;
    check_penalty(r, cfg.m())?;
    let geom = Geometry::build(data, cfg, params.beta.view(), params.gamma.view());
    assemble(data, &geom, r, h, params.theta.view(), Guard::Strict)
}

/// ∂P/∂β (the penalty does not involve β, so this equals ∂ℓ/∂β).
pub fn grad_beta(
    data: &Dataset,
    cfg: &BasisConfig,
    r: &PenaltyMatrix,
    h: f64,
    params: &ModelParams,
) -> Result<Array1<f64>> {
    Ok(assemble_checked(data, cfg, r, h, params)?.g_beta)
}

/// ∂P/∂γ.
pub fn grad_gamma(
    data: &Dataset,
    cfg: &BasisConfig,
    r: &PenaltyMatrix,
    h: f64,
    params: &ModelParams,
) -> Result<Array1<f64>> {
    Ok(assemble_checked(data, cfg, r, h, params)?.g_gamma)
}

/// ∂P/∂θ = ∂ℓ/∂θ − 2hRθ.
pub fn grad_theta(
    data: &Dataset,
    cfg: &BasisConfig,
    r: &PenaltyMatrix,
    h: f64,
    params: &ModelParams,
) -> Result<Array1<f64>> {
    Ok(assemble_checked(data, cfg, r, h, params)?.g_theta)
}

/// Negative semidefinite curvature surrogate for the β Newton step.
pub fn pseudo_hessian_beta(
    data: &Dataset,
    cfg: &BasisConfig,
    params: &ModelParams,
) -> Result<Array2<f64>> {
    let r = PenaltyMatrix::zero(cfg.m());
    Ok(assemble_checked(data, cfg, &r, 0.0, params)?.ph_beta)
}

/// Negative semidefinite curvature surrogate for the γ Newton step.
pub fn pseudo_hessian_gamma(
    data: &Dataset,
    cfg: &BasisConfig,
    params: &ModelParams,
) -> Result<Array2<f64>> {
    let r = PenaltyMatrix::zero(cfg.m());
    Ok(assemble_checked(data, cfg, &r, 0.0, params)?.ph_gamma)
}

/// Multiplicative-iterative step scale S_u = θ_u / D_u, with S_u = 0 whenever
/// θ_u = 0. A zero denominator against a positive θ_u is an error: that
/// coordinate has no curvature information left.
pub fn mi_scale_theta(
    data: &Dataset,
    cfg: &BasisConfig,
    r: &PenaltyMatrix,
    h: f64,
    params: &ModelParams,
) -> Result<Array1<f64>> {
    let d = assemble_checked(data, cfg, r, h, params)?;
    mi_scale_from_denom(&d.mi_denom, params.theta.view())
}

pub(crate) fn mi_scale_from_denom(
    denom: &Array1<f64>,
    theta: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    let mut scale = Array1::zeros(theta.len());
    for u in 0..theta.len() {
        if theta[u] == 0.0 {
            continue;
        }
        if denom[u] <= 0.0 {
            return Err(Error::DegenerateMiDenominator { index: u });
        }
        scale[u] = theta[u] / denom[u];
    }
    Ok(scale)
}

/// Exact Hessian of ℓ over (β, γ, θ), in that block order. The penalty is
/// excluded; its θ-block contribution −2hR is added by callers that need the
/// penalised Hessian.
pub fn full_hessian(
    data: &Dataset,
    cfg: &BasisConfig,
    params: &ModelParams,
) -> Result<Array2<f64>> {
    check_dims(data, cfg, params)?;
    let geom = Geometry::build(data, cfg, params.beta.view(), params.gamma.view());
    full_hessian_from_geom(data, &geom, params.theta.view(), Guard::Strict)
}

/// [`full_hessian`] under guarded evaluation, for use at solver iterates. A
/// converged fit can legitimately leave a censored subject with a tiny
/// positive probability mass that the strict literal-difference check would
/// reject; the derivative formulas stay exact there, so the smoothing update
/// and covariance evaluate them rather than failing the fit.
pub(crate) fn full_hessian_clamped(
    data: &Dataset,
    cfg: &BasisConfig,
    params: &ModelParams,
) -> Result<Array2<f64>> {
    check_dims(data, cfg, params)?;
    let geom = Geometry::build(data, cfg, params.beta.view(), params.gamma.view());
    full_hessian_from_geom(data, &geom, params.theta.view(), Guard::Clamped)
}
