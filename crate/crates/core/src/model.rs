//! Data model for partly interval-censored observations with time-varying
//! covariates, and the subject-specific time transform κ that the rest of the
//! crate is built on.
//!
//! For a subject with time-fixed covariates `x` and piecewise-constant
//! time-varying covariates `z(t)`,
//!
//! ```text
//! κ(t) = exp(-x·β) · ∫₀ᵗ exp(-z(s)·γ) ds
//! ```
//!
//! and because `z` is a right-continuous step function the integral is a
//! finite sum over segments, exact to machine precision.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Censoring status of one observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CensoringKind {
    /// Exact event time observed: `yL == yR`.
    Event,
    /// Event occurred before `yR`: `yL == 0`, `yR` finite.
    Left,
    /// Event occurred after `yL`: `yR == +∞`.
    Right,
    /// Event occurred inside `(yL, yR)` with `0 < yL < yR < ∞`.
    Interval,
}

impl CensoringKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CensoringKind::Event => "event",
            CensoringKind::Left => "left",
            CensoringKind::Right => "right",
            CensoringKind::Interval => "interval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "event" => Some(CensoringKind::Event),
            "left" => Some(CensoringKind::Left),
            "right" => Some(CensoringKind::Right),
            "interval" => Some(CensoringKind::Interval),
            _ => None,
        }
    }
}

impl std::fmt::Display for CensoringKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Right-continuous piecewise-constant covariate path.
///
/// Segment `a` holds `values.row(a)` on `[times[a], times[a+1])`; the last
/// segment extends to +∞. The first breakpoint is always 0, so every
/// trajectory covers the whole nonnegative half-line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrajectory {
    times: Vec<f64>,
    values: Array2<f64>,
}

impl StepTrajectory {
    pub fn new(times: Vec<f64>, values: Array2<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidTrajectory("no breakpoints".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidTrajectory(format!(
                "first breakpoint must be 0, got {}",
                times[0]
            )));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidTrajectory(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidTrajectory("non-finite breakpoint".into()));
        }
        if values.nrows() != times.len() {
            return Err(Error::InvalidTrajectory(format!(
                "{} breakpoints but {} value rows",
                times.len(),
                values.nrows()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTrajectory("non-finite covariate value".into()));
        }
        Ok(Self { times, values })
    }

    /// Single-segment trajectory that is `value` for all `t ≥ 0`.
    pub fn constant(value: Array1<f64>) -> Self {
        let q = value.len();
        Self {
            times: vec![0.0],
            values: value.into_shape_with_order((1, q)).expect("row reshape"),
        }
    }

    /// The all-zero trajectory with `q` components.
    pub fn zero(q: usize) -> Self {
        Self::constant(Array1::zeros(q))
    }

    /// Number of covariate components `q`.
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_segments(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Value of the covering segment at time `t ≥ 0`.
    pub fn value_at(&self, t: f64) -> ArrayView1<'_, f64> {
        let idx = self.times.partition_point(|&s| s <= t);
        self.values.row(idx.saturating_sub(1))
    }

    /// Segments intersected with `[0, t]`, as `(value, length)` pairs with
    /// positive length.
    pub fn segments_to(&self, t: f64) -> impl Iterator<Item = (ArrayView1<'_, f64>, f64)> {
        let times = &self.times;
        let values = &self.values;
        (0..times.len()).filter_map(move |a| {
            let start = times[a];
            let end = if a + 1 < times.len() {
                times[a + 1].min(t)
            } else {
                t
            };
            let len = end - start;
            (len > 0.0).then(|| (values.row(a), len))
        })
    }
}

/// One individual's observation: censoring interval, censoring kind,
/// time-fixed covariates and time-varying covariate path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub y_left: f64,
    pub y_right: f64,
    pub kind: CensoringKind,
    pub x: Array1<f64>,
    pub z: StepTrajectory,
}

impl SubjectRecord {
    /// The observation endpoint y* that knot placement and the likelihood use:
    /// `yL` for right-censored subjects, `yR` otherwise.
    pub fn observed_time(&self) -> f64 {
        match self.kind {
            CensoringKind::Right => self.y_left,
            _ => self.y_right,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidSubject {
                id: self.id.clone(),
                reason,
            })
        };
        if self.x.iter().any(|v| !v.is_finite()) {
            return fail("non-finite time-fixed covariate".into());
        }
        if !(self.y_left >= 0.0) {
            return fail(format!("yL = {} is negative", self.y_left));
        }
        match self.kind {
            CensoringKind::Event => {
                if self.y_left != self.y_right || !self.y_right.is_finite() {
                    return fail(format!(
                        "event requires yL == yR finite, got [{}, {}]",
                        self.y_left, self.y_right
                    ));
                }
            }
            CensoringKind::Left => {
                if self.y_left != 0.0 || !self.y_right.is_finite() || self.y_right <= 0.0 {
                    return fail(format!(
                        "left censoring requires yL == 0 < yR < inf, got [{}, {}]",
                        self.y_left, self.y_right
                    ));
                }
            }
            CensoringKind::Right => {
                if self.y_right.is_finite() {
                    return fail(format!(
                        "right censoring requires yR = inf, got {}",
                        self.y_right
                    ));
                }
            }
            CensoringKind::Interval => {
                if !(self.y_left > 0.0 && self.y_left < self.y_right && self.y_right.is_finite()) {
                    return fail(format!(
                        "interval censoring requires 0 < yL < yR < inf, got [{}, {}]",
                        self.y_left, self.y_right
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A validated collection of subjects with consistent covariate dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    subjects: Vec<SubjectRecord>,
    p: usize,
    q: usize,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self> {
        let first = subjects.first().ok_or(Error::EmptyDataset)?;
        let (p, q) = (first.x.len(), first.z.dim());
        Self::with_dims(subjects, p, q)
    }

    /// Builds a dataset with explicit dimensions; permits zero subjects.
    pub fn with_dims(subjects: Vec<SubjectRecord>, p: usize, q: usize) -> Result<Self> {
        for s in &subjects {
            s.validate()?;
            if s.x.len() != p {
                return Err(Error::DimensionMismatch {
                    context: "time-fixed covariates",
                    expected: p,
                    got: s.x.len(),
                });
            }
            if s.z.dim() != q {
                return Err(Error::DimensionMismatch {
                    context: "time-varying covariates",
                    expected: q,
                    got: s.z.dim(),
                });
            }
        }
        Ok(Self { subjects, p, q })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Number of time-fixed covariates.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of time-varying covariates.
    pub fn q(&self) -> usize {
        self.q
    }

    /// κ evaluated at every subject's observation endpoint y*.
    pub fn kappa_endpoints(&self, beta: ArrayView1<'_, f64>, gamma: ArrayView1<'_, f64>) -> Vec<f64> {
        self.subjects
            .iter()
            .map(|s| kappa_unchecked(s, beta, gamma, s.observed_time()))
            .collect()
    }
}

/// The full parameter block `(β, γ, θ)` with `θ ≥ 0` elementwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Array1<f64>,
    pub gamma: Array1<f64>,
    pub theta: Array1<f64>,
}

impl ModelParams {
    pub fn new(beta: Array1<f64>, gamma: Array1<f64>, theta: Array1<f64>) -> Result<Self> {
        let params = Self { beta, gamma, theta };
        params.validate_theta()?;
        Ok(params)
    }

    pub fn validate_theta(&self) -> Result<()> {
        for (u, &t) in self.theta.iter().enumerate() {
            if !(t >= 0.0) {
                return Err(Error::NegativeTheta { index: u, value: t });
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.beta.len(), self.gamma.len(), self.theta.len())
    }
}

fn check_subject_dims(subject: &SubjectRecord, beta: ArrayView1<'_, f64>, gamma: ArrayView1<'_, f64>) -> Result<()> {
    if subject.x.len() != beta.len() {
        return Err(Error::DimensionMismatch {
            context: "beta vs time-fixed covariates",
            expected: subject.x.len(),
            got: beta.len(),
        });
    }
    if subject.z.dim() != gamma.len() {
        return Err(Error::DimensionMismatch {
            context: "gamma vs time-varying covariates",
            expected: subject.z.dim(),
            got: gamma.len(),
        });
    }
    Ok(())
}

/// The time transform κ(t) = e^{-x·β} Σ_a e^{-z_a·γ} (segment length within [0, t]).
pub fn kappa(subject: &SubjectRecord, params: &ModelParams, t: f64) -> Result<f64> {
    check_subject_dims(subject, params.beta.view(), params.gamma.view())?;
    Ok(kappa_unchecked(subject, params.beta.view(), params.gamma.view(), t))
}

/// Gradient of κ(t) in β: `-κ(t)·x`.
pub fn kappa_grad_beta(subject: &SubjectRecord, params: &ModelParams, t: f64) -> Result<Array1<f64>> {
    let k = kappa(subject, params, t)?;
    Ok(subject.x.mapv(|xj| -k * xj))
}

/// Gradient of κ(t) in γ: `-e^{-x·β} Σ_a e^{-z_a·γ} z_a·len_a`.
pub fn kappa_grad_gamma(subject: &SubjectRecord, params: &ModelParams, t: f64) -> Result<Array1<f64>> {
    check_subject_dims(subject, params.beta.view(), params.gamma.view())?;
    let (_, g, _) = kappa_full(subject, params.beta.view(), params.gamma.view(), t, false);
    Ok(g)
}

/// Hessian of κ(t) in γ: `e^{-x·β} Σ_a e^{-z_a·γ} z_aᵀz_a·len_a`, symmetric PSD.
pub fn kappa_hess_gamma(subject: &SubjectRecord, params: &ModelParams, t: f64) -> Result<Array2<f64>> {
    check_subject_dims(subject, params.beta.view(), params.gamma.view())?;
    let (_, _, kmat) = kappa_full(subject, params.beta.view(), params.gamma.view(), t, true);
    Ok(kmat)
}

pub(crate) fn kappa_unchecked(
    subject: &SubjectRecord,
    beta: ArrayView1<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    t: f64,
) -> f64 {
    kappa_cov(subject.x.view(), &subject.z, beta, gamma, t)
}

/// κ for an arbitrary covariate profile (x, z), without a subject wrapper.
pub(crate) fn kappa_cov(
    x: ArrayView1<'_, f64>,
    z: &StepTrajectory,
    beta: ArrayView1<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    t: f64,
) -> f64 {
    let exb = (-x.dot(&beta)).exp();
    let mut acc = 0.0;
    for (zv, len) in z.segments_to(t) {
        acc += (-zv.dot(&gamma)).exp() * len;
    }
    exb * acc
}

/// κ together with its γ-gradient and (optionally) γ-Hessian in one pass.
pub(crate) fn kappa_full(
    subject: &SubjectRecord,
    beta: ArrayView1<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    t: f64,
    with_hess: bool,
) -> (f64, Array1<f64>, Array2<f64>) {
    let q = gamma.len();
    let exb = (-subject.x.dot(&beta)).exp();
    let mut acc = 0.0;
    let mut g = Array1::<f64>::zeros(q);
    let mut kmat = Array2::<f64>::zeros(if with_hess { (q, q) } else { (0, 0) });
    for (z, len) in subject.z.segments_to(t) {
        let w = (-z.dot(&gamma)).exp() * len;
        acc += w;
        for r in 0..q {
            g[r] -= w * z[r];
        }
        if with_hess {
            for r in 0..q {
                let zr = z[r];
                if zr == 0.0 {
                    continue;
                }
                for s in 0..q {
                    kmat[(r, s)] += w * zr * z[s];
                }
            }
        }
    }
    g.mapv_inplace(|v| v * exb);
    kmat.mapv_inplace(|v| v * exb);
    (exb * acc, g, kmat)
}
