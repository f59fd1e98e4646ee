//! The three subcommands: fit, simulate, predict.
//!
//! Each returns a process exit code. By convention 0 means success, 2 means
//! the fit ran to its iteration budget without converging (artifacts are
//! still written so the run can be inspected), and all I/O, parsing, and
//! validation failures surface as errors that the binary maps to exit 1.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;

use aft_core::inference::predict_survival;
use aft_core::simulation::{
    censoring_mix, default_alphas, monte_carlo_runs, summarize_runs, SimConfig,
};
use aft_core::{fit, FitOptions};

use crate::config::FileConfig;
use crate::io::{self, ColumnNames, Ingested};
use crate::schema::FitArtifact;

/// Number of grid intervals for the baseline table written next to a fit.
const BASELINE_STEPS: usize = 200;

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct FitCmd {
    /// Long-format trajectory CSV (`id,start,end,z…`, or
    /// `id,start,end,status,z…` when no subjects file is given).
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Subjects CSV (`id,y_left,y_right,kind,x…`); omit to read
    /// status-coded data.
    #[arg(long)]
    pub subjects: Option<PathBuf>,

    /// TOML file with solver options; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory for `fit.json` and `baseline.csv`.
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub solver: SolverFlags,
}

/// Solver options exposed as flags. Unset flags fall back to the config
/// file, then to the built-in defaults.
#[derive(Debug, Default, Args)]
pub struct SolverFlags {
    /// Inner convergence tolerance on parameter moves.
    #[arg(long)]
    pub param_tol: Option<f64>,

    /// KKT tolerance on the per-subject gradient scale.
    #[arg(long)]
    pub kkt_tol: Option<f64>,

    /// Iteration cap for one inner solve.
    #[arg(long)]
    pub max_inner_iters: Option<usize>,

    /// Cap on smoothing-update rounds.
    #[arg(long)]
    pub max_outer_iters: Option<usize>,

    /// Cumulative inner iterations after which the knot layout is frozen.
    #[arg(long)]
    pub boundary_freeze_iter: Option<usize>,

    /// Outer convergence tolerance on the effective degrees of freedom.
    #[arg(long)]
    pub nu_tol: Option<f64>,

    /// Starting value of the smoothing variance σ²ₕ.
    #[arg(long)]
    pub initial_sigma2h: Option<f64>,

    /// Line-search shrink factor in (0, 1).
    #[arg(long)]
    pub ls_shrink: Option<f64>,

    /// Maximum line-search shrinks per step.
    #[arg(long)]
    pub ls_max_halvings: Option<u32>,

    /// θ at or below this counts as sitting on the boundary.
    #[arg(long)]
    pub theta_thresh: Option<f64>,

    /// Gradient threshold for the active-constraint set.
    #[arg(long)]
    pub grad_thresh: Option<f64>,

    /// Number of basis functions (default: n^(1/3), rounded).
    #[arg(long)]
    pub knots: Option<usize>,
}

impl SolverFlags {
    fn apply(&self, opts: &mut FitOptions) {
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag {
                    opts.$field = v;
                })*
            };
        }
        set!(
            param_tol => param_tol,
            kkt_tol => kkt_tol,
            max_inner_iters => max_inner_iters,
            max_outer_iters => max_outer_iters,
            boundary_freeze_iter => boundary_freeze_iter,
            nu_tol => nu_tol,
            initial_sigma2h => initial_sigma2h,
            ls_shrink => ls_shrink,
            ls_max_halvings => ls_max_halvings,
            theta_thresh => theta_thresh,
            grad_thresh => grad_thresh
        );
        if self.knots.is_some() {
            opts.knot_count = self.knots;
        }
    }
}

/// Resolves options (defaults, then config file, then flags) and ingests the
/// dataset in whichever format the argument combination selects.
fn prepare(cmd: &FitCmd) -> Result<(Ingested, FitOptions)> {
    let mut opts = FitOptions::default();
    if let Some(path) = &cmd.config {
        FileConfig::load(path)?.apply(&mut opts);
    }
    cmd.solver.apply(&mut opts);
    opts.validate()?;

    let ingested = match (&cmd.subjects, &cmd.data) {
        (Some(subjects), data) => io::ingest(subjects, data.as_deref())?,
        (None, Some(data)) => io::ingest_status(data)?,
        (None, None) => bail!("nothing to fit: pass --subjects (with optional --data) or --data"),
    };
    Ok((ingested, opts))
}

impl FitCmd {
    pub fn run(&self) -> Result<i32> {
        let (ingested, opts) = prepare(self)?;
        let Ingested { data, columns } = ingested;
        println!(
            "fitting {} subjects ({} time-fixed, {} time-varying covariates)",
            data.len(),
            data.p(),
            data.q()
        );

        let result = fit(&data, &opts)?;
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create {}", self.out.display()))?;

        let artifact = FitArtifact::from_fit(&result, &columns);
        artifact.save(&self.out.join("fit.json"))?;
        write_baseline(&result, &self.out.join("baseline.csv"))?;

        print_fit_summary(&artifact);
        Ok(if result.converged { 0 } else { 2 })
    }
}

fn write_baseline(result: &aft_core::FitResult, path: &Path) -> Result<()> {
    let cfg = &result.cfg;
    let theta = &result.params.theta;
    let header: Vec<String> = ["kappa", "hazard", "cumhaz", "survival"]
        .iter()
        .map(|s| (*s).to_owned())
        .collect();
    let mut rows = Vec::with_capacity(BASELINE_STEPS + 1);
    for i in 0..=BASELINE_STEPS {
        let k = cfg.d2 * i as f64 / BASELINE_STEPS as f64;
        let hazard = cfg.baseline_hazard(theta, k)?;
        let cumhaz = cfg.baseline_cumhaz(theta, k)?;
        rows.push(vec![
            io::fmt_f64(k),
            io::fmt_f64(hazard),
            io::fmt_f64(cumhaz),
            io::fmt_f64((-cumhaz).exp()),
        ]);
    }
    io::write_table(path, &header, &rows)
}

fn print_fit_summary(artifact: &FitArtifact) {
    if artifact.converged {
        println!(
            "converged after {} rounds ({} inner iterations)",
            artifact.outer_iters, artifact.total_inner_iters
        );
    } else {
        println!(
            "did NOT converge within {} rounds ({} inner iterations)",
            artifact.outer_iters, artifact.total_inner_iters
        );
    }
    println!(
        "penalised log-likelihood {:.6}, log-likelihood {:.6}, h {:.6}",
        artifact.final_pl, artifact.final_ll, artifact.smoothing.h
    );
    if !artifact.active.is_empty() {
        println!("active baseline constraints: {:?}", artifact.active);
    }
    if artifact.wald.is_empty() {
        let reason = artifact
            .covariance_error
            .as_deref()
            .unwrap_or("covariance unavailable");
        println!("no standard errors: {reason}");
        for (name, est) in artifact
            .x_columns
            .iter()
            .chain(artifact.z_columns.iter())
            .zip(
                artifact
                    .coefficients
                    .beta
                    .iter()
                    .chain(artifact.coefficients.gamma.iter()),
            )
        {
            println!("  {name:<16} {est:>12.6}");
        }
        return;
    }
    println!(
        "  {:<16} {:>12} {:>12} {:>9} {:>12}",
        "coefficient", "estimate", "se", "z", "p"
    );
    for row in &artifact.wald {
        let z = row.z.map_or("-".to_owned(), |z| format!("{z:.3}"));
        let p = row.p.map_or("-".to_owned(), |p| format!("{p:.3e}"));
        println!(
            "  {:<16} {:>12.6} {:>12.6} {:>9} {:>12}",
            row.name, row.estimate, row.se, z, p
        );
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SimulateCmd {
    /// Subjects per replication.
    #[arg(long)]
    pub n: usize,

    /// Target proportion of exactly observed events.
    #[arg(long)]
    pub pi_event: f64,

    /// Left-censoring scale; defaults are calibrated for --pi-event 0.3
    /// and 0.7.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha_l: Option<f64>,

    /// Right-censoring scale.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha_r: Option<f64>,

    /// Time-fixed coefficients.
    #[arg(long, value_delimiter = ',', num_args = 1..=2, allow_hyphen_values = true, default_values_t = [1.0, -1.0])]
    pub beta: Vec<f64>,

    /// Time-varying coefficient.
    #[arg(long, allow_hyphen_values = true, default_value_t = -0.1)]
    pub gamma: f64,

    /// Seed for the reproducible generator.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    /// Run a Monte Carlo study with this many replications instead of
    /// writing one dataset.
    #[arg(long)]
    pub reps: Option<usize>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl SimulateCmd {
    fn sim_config(&self) -> Result<SimConfig> {
        let (alpha_l, alpha_r) = match (self.alpha_l, self.alpha_r) {
            (Some(l), Some(r)) => (l, r),
            (None, None) => default_alphas(self.pi_event).ok_or_else(|| {
                anyhow::anyhow!(
                    "no calibrated censoring scales for pi_event {}; pass --alpha-l and --alpha-r",
                    self.pi_event
                )
            })?,
            _ => bail!("--alpha-l and --alpha-r must be given together"),
        };
        if self.beta.len() != 2 {
            bail!("--beta takes exactly two comma-separated values, got {}", self.beta.len());
        }
        let cfg = SimConfig {
            n: self.n,
            pi_event: self.pi_event,
            alpha_l,
            alpha_r,
            beta: [self.beta[0], self.beta[1]],
            gamma: self.gamma,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run(&self) -> Result<i32> {
        let cfg = self.sim_config()?;
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create {}", self.out.display()))?;

        match self.reps {
            None => {
                let data = aft_core::simulate_dataset(&cfg)?;
                let columns = ColumnNames {
                    x: vec!["x1".to_owned(), "x2".to_owned()],
                    z: vec!["z1".to_owned()],
                };
                io::emit(
                    &data,
                    &columns,
                    &self.out.join("subjects.csv"),
                    Some(&self.out.join("long.csv")),
                )?;
                let mix = censoring_mix(&data);
                println!(
                    "wrote {} subjects: {:.3} events, {:.3} left, {:.3} interval, {:.3} right",
                    data.len(),
                    mix.event,
                    mix.left,
                    mix.interval,
                    mix.right
                );
                Ok(0)
            }
            Some(reps) => {
                let runs = monte_carlo_runs(&cfg, reps, &FitOptions::default())?;
                let report = summarize_runs(&cfg, &runs)?;

                let mut header = vec!["rep".to_owned()];
                header.extend(report.names.iter().cloned());
                header.extend(report.names.iter().map(|n| format!("se_{n}")));
                let mut rows = Vec::new();
                for run in &runs {
                    let Some(est) = &run.estimates else { continue };
                    let mut row = vec![run.rep.to_string()];
                    row.extend(est.coef.iter().map(|&v| io::fmt_f64(v)));
                    row.extend(est.se.iter().map(|&v| io::fmt_f64(v)));
                    rows.push(row);
                }
                io::write_table(&self.out.join("reps.csv"), &header, &rows)?;

                let mut json = serde_json::to_string_pretty(&report)?;
                json.push('\n');
                std::fs::write(self.out.join("report.json"), json)?;

                println!(
                    "{} of {} replications usable ({} excluded)",
                    report.reps_used, report.reps_requested, report.excluded
                );
                println!(
                    "  {:<8} {:>10} {:>10} {:>10} {:>9} {:>9}",
                    "", "bias", "mcsd", "aasd", "cp(mcsd)", "cp(aasd)"
                );
                for (j, name) in report.names.iter().enumerate() {
                    println!(
                        "  {:<8} {:>10.4} {:>10.4} {:>10.4} {:>9.3} {:>9.3}",
                        name,
                        report.bias[j],
                        report.mcsd[j],
                        report.aasd[j],
                        report.cp_mcsd[j],
                        report.cp_aasd[j]
                    );
                }
                Ok(0)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct PredictCmd {
    /// Fit artifact written by `aft fit`.
    #[arg(long)]
    pub fit: PathBuf,

    /// Scenario CSV: `name,traj,tau` plus the fitted covariate columns.
    #[arg(long)]
    pub scenarios: PathBuf,

    /// Upper end of the prediction grid (observed time scale).
    #[arg(long)]
    pub t_max: f64,

    /// Number of grid intervals between 0 and --t-max.
    #[arg(long, default_value_t = 200)]
    pub t_steps: usize,

    /// Output directory for `survival.csv` and `ratio.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

impl PredictCmd {
    pub fn run(&self) -> Result<i32> {
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            bail!("--t-max must be positive and finite, got {}", self.t_max);
        }
        if self.t_steps == 0 {
            bail!("--t-steps must be at least 1");
        }
        let artifact = FitArtifact::load(&self.fit)?;
        let fit = artifact.to_fit()?;
        let scenarios =
            io::read_scenarios(&self.scenarios, &artifact.x_columns, artifact.z_columns.len())?;

        let grid: Vec<f64> = (0..=self.t_steps)
            .map(|i| self.t_max * i as f64 / self.t_steps as f64)
            .collect();
        let mut curves = Vec::with_capacity(scenarios.len());
        for sc in &scenarios {
            let s = predict_survival(&fit, &sc.x, &sc.z, &grid)
                .with_context(|| format!("scenario `{}`", sc.name))?;
            curves.push(s);
        }

        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create {}", self.out.display()))?;

        let mut header = vec!["t".to_owned()];
        header.extend(scenarios.iter().map(|s| s.name.clone()));
        let rows: Vec<Vec<String>> = grid
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut row = vec![io::fmt_f64(t)];
                row.extend(curves.iter().map(|c| io::fmt_f64(c[i])));
                row
            })
            .collect();
        io::write_table(&self.out.join("survival.csv"), &header, &rows)?;

        if scenarios.len() >= 2 {
            let mut header = vec!["t".to_owned()];
            header.extend(scenarios[1..].iter().map(|s| s.name.clone()));
            let rows: Vec<Vec<String>> = grid
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let mut row = vec![io::fmt_f64(t)];
                    row.extend(curves[1..].iter().map(|c| io::fmt_f64(c[i] / curves[0][i])));
                    row
                })
                .collect();
            io::write_table(&self.out.join("ratio.csv"), &header, &rows)?;
        }

        println!(
            "wrote survival curves for {} scenario(s) on {} grid points",
            scenarios.len(),
            grid.len()
        );
        Ok(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::TempDir;

    fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    fn simulate_small(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
        let cmd = SimulateCmd {
            n: 80,
            pi_event: 0.7,
            alpha_l: None,
            alpha_r: None,
            beta: vec![1.0, -1.0],
            gamma: -0.1,
            seed,
            reps: None,
            out: dir.to_path_buf(),
        };
        assert_eq!(cmd.run().unwrap(), 0);
        (dir.join("subjects.csv"), dir.join("long.csv"))
    }

    #[test]
    fn fit_writes_artifacts_and_reports_convergence() {
        let dir = TempDir::new().unwrap();
        let (subjects, long) = simulate_small(dir.path(), 11);
        let out = dir.path().join("fit");
        let cmd = FitCmd {
            data: Some(long),
            subjects: Some(subjects),
            config: None,
            out: out.clone(),
            solver: SolverFlags {
                knots: Some(4),
                ..SolverFlags::default()
            },
        };
        let code = cmd.run().unwrap();
        assert_eq!(code, 0);
        assert!(out.join("fit.json").exists());
        assert!(out.join("baseline.csv").exists());

        let artifact = FitArtifact::load(&out.join("fit.json")).unwrap();
        assert!(artifact.converged);
        assert_eq!(artifact.coefficients.beta.len(), 2);
        assert_eq!(artifact.coefficients.gamma.len(), 1);
        assert_eq!(artifact.x_columns, vec!["x1", "x2"]);
    }

    #[test]
    fn predict_writes_proper_survival_curves() {
        let dir = TempDir::new().unwrap();
        let (subjects, long) = simulate_small(dir.path(), 3);
        let out = dir.path().join("fit");
        let cmd = FitCmd {
            data: Some(long),
            subjects: Some(subjects),
            config: None,
            out: out.clone(),
            solver: SolverFlags {
                knots: Some(4),
                ..SolverFlags::default()
            },
        };
        cmd.run().unwrap();

        let scenarios = write_file(
            dir.path(),
            "scenarios.csv",
            "name,x1,x2,traj,tau\nuntreated,0,0.5,00,\ntreated,0,0.5,11,\n",
        );
        let pout = dir.path().join("pred");
        let pcmd = PredictCmd {
            fit: out.join("fit.json"),
            scenarios,
            t_max: 2.0,
            t_steps: 20,
            out: pout.clone(),
        };
        assert_eq!(pcmd.run().unwrap(), 0);

        let text = std::fs::read_to_string(pout.join("survival.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,untreated,treated");
        let mut prev: Option<(f64, f64)> = None;
        for line in lines {
            let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            let pair = (cells[1], cells[2]);
            match prev {
                None => assert_eq!(pair, (1.0, 1.0)),
                Some((a, b)) => {
                    assert!(pair.0 <= a && pair.1 <= b, "survival must be nonincreasing");
                }
            }
            prev = Some(pair);
        }
        assert!(pout.join("ratio.csv").exists());
    }

    #[test]
    fn simulate_reps_writes_report_and_estimates() {
        let dir = TempDir::new().unwrap();
        let cmd = SimulateCmd {
            n: 60,
            pi_event: 0.7,
            alpha_l: None,
            alpha_r: None,
            beta: vec![1.0, -1.0],
            gamma: -0.1,
            seed: 4,
            reps: Some(2),
            out: dir.path().to_path_buf(),
        };
        assert_eq!(cmd.run().unwrap(), 0);
        assert!(dir.path().join("reps.csv").exists());
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["reps_requested"], 2);
    }

    #[test]
    fn missing_inputs_are_rejected() {
        let cmd = FitCmd {
            data: None,
            subjects: None,
            config: None,
            out: PathBuf::from("unused"),
            solver: SolverFlags::default(),
        };
        let err = prepare(&cmd).unwrap_err().to_string();
        assert!(err.contains("nothing to fit"), "unexpected message: {err}");
    }
}
