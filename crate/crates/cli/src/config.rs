//! Optional TOML configuration for the fitting commands.
//!
//! The file is flat — one key per solver option, every key optional — and
//! sits below command-line flags in precedence: defaults, then the file,
//! then explicit flags. Unknown keys are rejected so typos fail instead of
//! being silently ignored.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

use aft_core::FitOptions;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub param_tol: Option<f64>,
    pub kkt_tol: Option<f64>,
    pub max_inner_iters: Option<usize>,
    pub max_outer_iters: Option<usize>,
    pub boundary_freeze_iter: Option<usize>,
    pub nu_tol: Option<f64>,
    pub initial_sigma2h: Option<f64>,
    pub ls_shrink: Option<f64>,
    pub ls_max_halvings: Option<u32>,
    pub theta_thresh: Option<f64>,
    pub grad_thresh: Option<f64>,
    pub knot_count: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("{} is not a valid config", path.display()))
    }

    /// Overrides the options with every key the file set.
    pub fn apply(&self, opts: &mut FitOptions) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field {
                    opts.$field = v;
                })*
            };
        }
        set!(
            param_tol,
            kkt_tol,
            max_inner_iters,
            max_outer_iters,
            boundary_freeze_iter,
            nu_tol,
            initial_sigma2h,
            ls_shrink,
            ls_max_halvings,
            theta_thresh,
            grad_thresh
        );
        if self.knot_count.is_some() {
            opts.knot_count = self.knot_count;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_keys_override_defaults_only_where_set() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("aft.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "knot_count = 8\nnu_tol = 0.5").unwrap();

        let cfg = FileConfig::load(&path).unwrap();
        let mut opts = FitOptions::default();
        cfg.apply(&mut opts);
        assert_eq!(opts.knot_count, Some(8));
        assert_eq!(opts.nu_tol, 0.5);
        assert_eq!(opts.param_tol, FitOptions::default().param_tol);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("aft.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "knots = 8").unwrap();

        let err = FileConfig::load(&path).unwrap_err();
        assert!(format!("{err:#}").contains("not a valid config"));
    }
}
