//! The on-disk fit artifact.
//!
//! `fit.json` is a versioned snapshot of everything needed to report a fit
//! and to compute predictions from it later: coefficient estimates, the
//! basis layout, the smoothing state, convergence diagnostics, standard
//! errors when available, and a per-round summary of the optimisation. It
//! deliberately excludes wall-clock timings so that rerunning the same
//! command byte-for-byte reproduces the same file.
//!
//! Unknown fields are rejected on load, and so is any `schema_version`
//! other than the one this build writes, so stale or foreign files fail
//! loudly instead of being misread.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use aft_core::basis::{BasisConfig, PenaltyMatrix};
use aft_core::inference::{wald_table, WaldRow};
use aft_core::model::ModelParams;
use aft_core::optimizer::{FitFlags, FitResult};

use crate::io::ColumnNames;

pub const SCHEMA_VERSION: u32 = 1;

/// Coefficient estimates on the model scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
}

/// The Gaussian basis layout the fit ended on.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub d1: f64,
    pub d2: f64,
}

/// Final smoothing state.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SmoothingSpec {
    pub h: f64,
    pub sigma2h: f64,
    /// Effective degrees of freedom at the final h, when computable.
    pub nu: Option<f64>,
}

/// Sandwich standard errors; absent when the information matrix could not
/// be inverted.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SeSpec {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub retained_min_eigenvalue: f64,
    /// Eigenvalues truncated by the covariance's nearest-PSD repair
    /// (nonzero flags small-sample standard errors).
    pub clipped_eigenvalues: usize,
}

/// One smoothing round as seen in the iteration trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RoundSummary {
    pub outer: usize,
    pub iterations: usize,
    pub pl_first: f64,
    pub pl_last: f64,
    /// The round re-placed the knots before iterating.
    pub refreshed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FitArtifact {
    pub schema_version: u32,
    pub x_columns: Vec<String>,
    pub z_columns: Vec<String>,
    pub coefficients: Coefficients,
    pub basis: BasisSpec,
    pub smoothing: SmoothingSpec,
    pub converged: bool,
    pub inner_converged: bool,
    pub flags: FitFlags,
    pub outer_iters: usize,
    pub total_inner_iters: usize,
    pub final_pl: f64,
    pub final_ll: f64,
    /// Indices of θ coordinates held at the nonnegativity boundary.
    pub active: Vec<usize>,
    pub se: Option<SeSpec>,
    pub covariance_error: Option<String>,
    /// Wald rows named after the covariate columns.
    pub wald: Vec<WaldRow>,
    pub rounds: Vec<RoundSummary>,
}

impl FitArtifact {
    pub fn from_fit(fit: &FitResult, columns: &ColumnNames) -> Self {
        let wald = match wald_table(fit) {
            Ok(mut rows) => {
                let names = columns.x.iter().chain(columns.z.iter());
                for (row, name) in rows.iter_mut().zip(names) {
                    row.name = name.clone();
                }
                rows
            }
            Err(_) => Vec::new(),
        };
        let mut rounds: Vec<RoundSummary> = Vec::new();
        for rec in &fit.trace {
            match rounds.last_mut() {
                Some(r) if r.outer == rec.outer => {
                    r.iterations += 1;
                    r.pl_last = rec.pl;
                    r.refreshed |= rec.refreshed;
                }
                _ => rounds.push(RoundSummary {
                    outer: rec.outer,
                    iterations: 1,
                    pl_first: rec.pl,
                    pl_last: rec.pl,
                    refreshed: rec.refreshed,
                }),
            }
        }
        Self {
            schema_version: SCHEMA_VERSION,
            x_columns: columns.x.clone(),
            z_columns: columns.z.clone(),
            coefficients: Coefficients {
                beta: fit.params.beta.to_vec(),
                gamma: fit.params.gamma.to_vec(),
                theta: fit.params.theta.to_vec(),
            },
            basis: BasisSpec {
                mu: fit.cfg.mu().to_vec(),
                sigma: fit.cfg.sigma().to_vec(),
                d1: fit.cfg.d1,
                d2: fit.cfg.d2,
            },
            smoothing: SmoothingSpec {
                h: fit.h,
                sigma2h: fit.sigma2h,
                nu: fit.nu,
            },
            converged: fit.converged,
            inner_converged: fit.inner_converged,
            flags: fit.flags,
            outer_iters: fit.outer_iters,
            total_inner_iters: fit.total_inner_iters,
            final_pl: fit.final_pl,
            final_ll: fit.final_ll,
            active: fit.active.clone(),
            se: fit.covariance.as_ref().map(|c| SeSpec {
                beta: c.se_beta.to_vec(),
                gamma: c.se_gamma.to_vec(),
                retained_min_eigenvalue: c.retained_min_eigenvalue,
                clipped_eigenvalues: c.clipped_eigenvalues,
            }),
            covariance_error: fit.covariance_error.clone(),
            wald,
            rounds,
        }
    }

    /// Rebuilds just enough of a fit to evaluate predictions. The penalty
    /// matrix, iteration trace, and covariance are not reconstructed.
    pub fn to_fit(&self) -> Result<FitResult> {
        let cfg = BasisConfig::new(
            Array1::from(self.basis.mu.clone()),
            Array1::from(self.basis.sigma.clone()),
            self.basis.d1,
            self.basis.d2,
        )?;
        let params = ModelParams {
            beta: Array1::from(self.coefficients.beta.clone()),
            gamma: Array1::from(self.coefficients.gamma.clone()),
            theta: Array1::from(self.coefficients.theta.clone()),
        };
        if params.theta.len() != cfg.m() {
            bail!(
                "artifact is inconsistent: {} theta coefficients for {} basis functions",
                params.theta.len(),
                cfg.m()
            );
        }
        Ok(FitResult {
            params,
            penalty: PenaltyMatrix::zero(cfg.m()),
            cfg,
            h: self.smoothing.h,
            sigma2h: self.smoothing.sigma2h,
            nu: self.smoothing.nu,
            converged: self.converged,
            inner_converged: self.inner_converged,
            flags: self.flags,
            outer_iters: self.outer_iters,
            total_inner_iters: self.total_inner_iters,
            final_pl: self.final_pl,
            final_ll: self.final_ll,
            active: self.active.clone(),
            covariance: None,
            covariance_error: self.covariance_error.clone(),
            trace: Vec::new(),
            nu_trace: Vec::new(),
            wall_seconds: 0.0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let artifact: Self = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a valid fit artifact", path.display()))?;
        if artifact.schema_version != SCHEMA_VERSION {
            bail!(
                "{}: unsupported fit artifact version {} (this build reads version {})",
                path.display(),
                artifact.schema_version,
                SCHEMA_VERSION
            );
        }
        Ok(artifact)
    }
}
