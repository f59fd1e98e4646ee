//! Acceptance criteria for the whole workspace, one test per criterion.
//!
//! Each test prints a single `criterion N: PASS/FAIL` line (visible with
//! `--nocapture`; the harness result line carries the same verdict) and
//! asserts it. The two Monte Carlo criteria share one set of replications.
//!
//! By default the replication studies run in a reduced "smoke" size with
//! windows widened to hold with margin at that size; setting
//! `AFT_FULL_ACCEPTANCE=1` switches to the full 200-replication runs with
//! the tight windows.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use ndarray::{Array1, Array2};

use aft_core::basis::penalty_matrix;
use aft_core::likelihood::{
    full_hessian, grad_beta, grad_gamma, grad_theta, log_likelihood, penalised_log_likelihood,
};
use aft_core::model::ModelParams;
use aft_core::simulation::{
    censoring_mix, default_alphas, monte_carlo, CensoringMix, MonteCarloReport, SimConfig,
};
use aft_core::testkit::random_instance;
use aft_core::{fit, simulate_dataset, Dataset, FitOptions, FitResult, StepTrajectory};

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

const TRUTH: [f64; 3] = [1.0, -1.0, -0.1];

fn full_mode() -> bool {
    std::env::var("AFT_FULL_ACCEPTANCE").is_ok_and(|v| v == "1")
}

/// Prints the verdict line and fails the test when `ok` is false.
fn report(criterion: usize, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {verdict} — {detail}");
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn table_settings(n: usize) -> SimConfig {
    SimConfig {
        n,
        pi_event: 0.7,
        alpha_l: default_alphas(0.7).unwrap().0,
        alpha_r: default_alphas(0.7).unwrap().1,
        beta: [TRUTH[0], TRUTH[1]],
        gamma: TRUTH[2],
        seed: 1,
    }
}

/// The large-sample replication study shared by criteria 1 and 3.
fn shared_large_mc() -> &'static MonteCarloReport {
    static MC: OnceLock<MonteCarloReport> = OnceLock::new();
    MC.get_or_init(|| {
        let reps = if full_mode() { 200 } else { 50 };
        monte_carlo(&table_settings(1000), reps, &FitOptions::default())
            .expect("large-sample study must run")
    })
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aft")
}

fn run_bin(args: &[&str]) -> std::process::Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary must launch")
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn within_rel(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

// ---------------------------------------------------------------------------
// Criterion 1: large-sample bias, spread, and coverage.
// ---------------------------------------------------------------------------

const C1_BIAS: [f64; 3] = [0.0010, -0.0081, -0.0030];
const C1_BIAS_TOL: [f64; 3] = [0.006, 0.010, 0.008];
const C1_MCSD: [f64; 3] = [0.0280, 0.0480, 0.0390];

#[test]
fn criterion_1_large_sample_bias_spread_coverage() {
    let mc = shared_large_mc();
    let reps = mc.reps_requested as f64;
    let full = full_mode();

    let mut ok = mc.reps_used * 100 >= mc.reps_requested * 95;
    let mut notes = vec![format!("{}/{} reps used", mc.reps_used, mc.reps_requested)];
    for j in 0..3 {
        // In smoke mode the bias window is five Monte Carlo standard errors
        // around the reference value; coverage and spread widen accordingly.
        let bias_tol = if full {
            C1_BIAS_TOL[j]
        } else {
            5.0 * C1_MCSD[j] / reps.sqrt()
        };
        let mcsd_rel = if full { 0.20 } else { 0.30 };
        let (cp_lo, cp_hi) = if full { (0.91, 0.99) } else { (0.87, 1.0) };

        let bias_ok = within(mc.bias[j], C1_BIAS[j], bias_tol);
        let mcsd_ok = within_rel(mc.mcsd[j], C1_MCSD[j], mcsd_rel);
        let cp_ok = mc.cp_mcsd[j] >= cp_lo && mc.cp_mcsd[j] <= cp_hi;
        ok &= bias_ok && mcsd_ok && cp_ok;
        notes.push(format!(
            "{}: bias {:+.4} (ref {:+.4}±{:.4}{}), mcsd {:.4} (ref {:.4}±{:.0}%{}), cp {:.3}{}",
            mc.names[j],
            mc.bias[j],
            C1_BIAS[j],
            bias_tol,
            if bias_ok { "" } else { " ✗" },
            mc.mcsd[j],
            C1_MCSD[j],
            mcsd_rel * 100.0,
            if mcsd_ok { "" } else { " ✗" },
            mc.cp_mcsd[j],
            if cp_ok { "" } else { " ✗" },
        ));
    }
    report(1, ok, &notes.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 2: small-sample bias.
// ---------------------------------------------------------------------------

const C2_BIAS: [f64; 3] = [0.0005, -0.0343, -0.0395];
const C2_TOL: [f64; 3] = [0.025, 0.040, 0.035];

#[test]
fn criterion_2_small_sample_bias() {
    let mc = monte_carlo(&table_settings(100), 200, &FitOptions::default())
        .expect("small-sample study must run");

    let mut ok = mc.reps_used * 100 >= mc.reps_requested * 95;
    let mut notes = vec![format!("{}/{} reps used", mc.reps_used, mc.reps_requested)];
    for j in 0..3 {
        let bias_ok = within(mc.bias[j], C2_BIAS[j], C2_TOL[j]);
        ok &= bias_ok;
        notes.push(format!(
            "{}: bias {:+.4} (ref {:+.4}±{:.3}{})",
            mc.names[j],
            mc.bias[j],
            C2_BIAS[j],
            C2_TOL[j],
            if bias_ok { "" } else { " ✗" },
        ));
    }
    report(2, ok, &notes.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 3: asymptotic standard errors track the Monte Carlo spread.
// ---------------------------------------------------------------------------

const C3_AASD_B1: f64 = 0.0270;

#[test]
fn criterion_3_asymptotic_se_tracks_spread() {
    let mc = shared_large_mc();

    let aasd_ok = within_rel(mc.aasd[0], C3_AASD_B1, 0.15);
    let mut ok = aasd_ok;
    let mut notes = vec![format!(
        "beta1 aasd {:.4} (ref {:.4}±15%{})",
        mc.aasd[0],
        C3_AASD_B1,
        if aasd_ok { "" } else { " ✗" },
    )];
    for j in 0..3 {
        let ratio = mc.aasd[j] / mc.mcsd[j];
        let ratio_ok = (0.8..=1.2).contains(&ratio);
        ok &= ratio_ok;
        notes.push(format!(
            "{} aasd/mcsd {:.3}{}",
            mc.names[j],
            ratio,
            if ratio_ok { "" } else { " ✗" },
        ));
    }
    report(3, ok, &notes.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 4: the default censoring scales hit the target mix.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_censoring_mix_calibration() {
    let targets = [
        (0.3, CensoringMix { event: 0.30, left: 0.17, interval: 0.20, right: 0.33 }),
        (0.7, CensoringMix { event: 0.70, left: 0.08, interval: 0.14, right: 0.08 }),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (pi_event, target) in targets {
        let (alpha_l, alpha_r) = default_alphas(pi_event).unwrap();
        let cfg = SimConfig {
            n: 100_000,
            pi_event,
            alpha_l,
            alpha_r,
            seed: 2026,
            ..table_settings(0)
        };
        let mix = censoring_mix(&simulate_dataset(&cfg).unwrap());
        let here = within(mix.event, target.event, 0.02)
            && within(mix.left, target.left, 0.02)
            && within(mix.interval, target.interval, 0.02)
            && within(mix.right, target.right, 0.02);
        ok &= here;
        notes.push(format!(
            "pi_event {pi_event}: mix ({:.3}, {:.3}, {:.3}, {:.3}) vs ({:.2}, {:.2}, {:.2}, {:.2})±0.02{}",
            mix.event, mix.left, mix.interval, mix.right,
            target.event, target.left, target.interval, target.right,
            if here { "" } else { " ✗" },
        ));
    }
    report(4, ok, &notes.join("; "));
}

// ---------------------------------------------------------------------------
// Criterion 5: analytic derivatives match finite differences.
// ---------------------------------------------------------------------------

/// Relative error when the reference is large enough, absolute otherwise.
fn fd_mismatch(analytic: f64, fd: f64, rel_tol: f64, abs_tol: f64) -> bool {
    if fd.abs() > 1e-3 {
        (analytic - fd).abs() > rel_tol * fd.abs()
    } else {
        (analytic - fd).abs() > abs_tol
    }
}

#[test]
fn criterion_5_derivatives_match_finite_differences() {
    let instances = 50;
    let mut worst = 0.0_f64;
    let mut failures = 0usize;

    for seed in 0..instances {
        let inst = random_instance(seed);
        let (data, cfg, r, h) = (&inst.data, &inst.cfg, &inst.penalty, inst.h);
        let p = inst.params.beta.len();
        let q = inst.params.gamma.len();
        let m = inst.params.theta.len();
        let dim = p + q + m;

        let flat = |params: &ModelParams| -> Vec<f64> {
            params
                .beta
                .iter()
                .chain(params.gamma.iter())
                .chain(params.theta.iter())
                .copied()
                .collect()
        };
        let unflat = |v: &[f64]| -> ModelParams {
            ModelParams {
                beta: Array1::from(v[..p].to_vec()),
                gamma: Array1::from(v[p..p + q].to_vec()),
                theta: Array1::from(v[p + q..].to_vec()),
            }
        };
        let at = flat(&inst.params);

        // Gradient of the penalised objective.
        let analytic: Vec<f64> = grad_beta(data, cfg, r, h, &inst.params)
            .unwrap()
            .into_iter()
            .chain(grad_gamma(data, cfg, r, h, &inst.params).unwrap())
            .chain(grad_theta(data, cfg, r, h, &inst.params).unwrap())
            .collect();
        for i in 0..dim {
            let step = 1e-5 * (1.0 + at[i].abs());
            let mut hi = at.clone();
            let mut lo = at.clone();
            hi[i] += step;
            lo[i] -= step;
            let f_hi = penalised_log_likelihood(data, cfg, r, h, &unflat(&hi)).unwrap();
            let f_lo = penalised_log_likelihood(data, cfg, r, h, &unflat(&lo)).unwrap();
            let fd = (f_hi - f_lo) / (2.0 * step);
            worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1e-3));
            if fd_mismatch(analytic[i], fd, 1e-5, 1e-7) {
                failures += 1;
            }
        }

        // Hessian of the unpenalised log-likelihood against differenced
        // analytic gradients (h = 0 strips the penalty from them).
        let hess = full_hessian(data, cfg, &inst.params).unwrap();
        let zero = aft_core::PenaltyMatrix::zero(m);
        for i in 0..dim {
            let step = 1e-5 * (1.0 + at[i].abs());
            let mut hi = at.clone();
            let mut lo = at.clone();
            hi[i] += step;
            lo[i] -= step;
            let g = |v: &[f64]| -> Vec<f64> {
                let params = unflat(v);
                grad_beta(data, cfg, &zero, 0.0, &params)
                    .unwrap()
                    .into_iter()
                    .chain(grad_gamma(data, cfg, &zero, 0.0, &params).unwrap())
                    .chain(grad_theta(data, cfg, &zero, 0.0, &params).unwrap())
                    .collect()
            };
            let g_hi = g(&hi);
            let g_lo = g(&lo);
            for j in 0..dim {
                let fd = (g_hi[j] - g_lo[j]) / (2.0 * step);
                if fd_mismatch(hess[(j, i)], fd, 1e-4, 1e-6) {
                    failures += 1;
                }
            }
        }
    }

    let ok = failures == 0;
    report(
        5,
        ok,
        &format!(
            "{instances} instances, {failures} mismatched coordinates, worst gradient deviation {worst:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: monotone ascent, feasibility, optimality, determinism.
// ---------------------------------------------------------------------------

fn kkt_holds(data: &Dataset, result: &FitResult, opts: &FitOptions) -> bool {
    let scale = data.len() as f64;
    let small = |g: f64| g.abs() / scale < opts.kkt_tol;
    let gb = grad_beta(data, &result.cfg, &result.penalty, result.h, &result.params).unwrap();
    let gg = grad_gamma(data, &result.cfg, &result.penalty, result.h, &result.params).unwrap();
    let gt = grad_theta(data, &result.cfg, &result.penalty, result.h, &result.params).unwrap();
    gb.iter().all(|&g| small(g))
        && gg.iter().all(|&g| small(g))
        && result
            .params
            .theta
            .iter()
            .zip(gt.iter())
            .all(|(&t, &g)| small(g) || (t <= opts.theta_thresh && g < 0.0))
}

#[test]
fn criterion_6_solver_invariants_and_determinism() {
    let cfg = SimConfig {
        seed: 42,
        ..table_settings(200)
    };
    let data = simulate_dataset(&cfg).unwrap();
    let opts = FitOptions::default();
    let a = fit(&data, &opts).unwrap();
    let b = fit(&data, &opts).unwrap();

    // Within a smoothing round the penalised objective never decreases.
    let mut monotone = true;
    for w in a.trace.windows(2) {
        if w[1].outer == w[0].outer && w[1].pl < w[0].pl - 1e-9 * w[0].pl.abs().max(1.0) {
            monotone = false;
        }
    }
    let feasible = a.params.theta.iter().all(|&t| t >= 0.0);
    let kkt = a.inner_converged && kkt_holds(&data, &a, &opts);
    let identical = a.params == b.params
        && a.h == b.h
        && a.final_pl == b.final_pl
        && a.trace.len() == b.trace.len()
        && a
            .trace
            .iter()
            .zip(b.trace.iter())
            .all(|(x, y)| x.pl == y.pl && x.outer == y.outer);

    // The command line is deterministic too: rerunning the same fit must
    // reproduce the artifacts byte for byte.
    let dir = tempfile::TempDir::new().unwrap();
    let sim_out = dir.path().join("data");
    run_bin(&[
        "simulate", "--n", "120", "--pi-event", "0.7", "--seed", "8",
        "--out", sim_out.to_str().unwrap(),
    ]);
    let subjects = sim_out.join("subjects.csv");
    let long = sim_out.join("long.csv");
    let mut artifacts = Vec::new();
    for name in ["fit_a", "fit_b"] {
        let out = dir.path().join(name);
        let status = run_bin(&[
            "fit",
            "--subjects", subjects.to_str().unwrap(),
            "--data", long.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]);
        assert!(status.status.success(), "CLI fit failed");
        artifacts.push((
            std::fs::read(out.join("fit.json")).unwrap(),
            std::fs::read(out.join("baseline.csv")).unwrap(),
        ));
    }
    let bytes_identical = artifacts[0] == artifacts[1];

    let ok = monotone && feasible && kkt && a.converged && identical && bytes_identical;
    report(
        6,
        ok,
        &format!(
            "monotone {monotone}, theta nonnegative {feasible}, kkt {kkt}, converged {}, library rerun identical {identical}, artifact bytes identical {bytes_identical}",
            a.converged
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: recovered baseline functions.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_baseline_recovery() {
    let cfg = SimConfig {
        seed: 7,
        ..table_settings(1000)
    };
    let data = simulate_dataset(&cfg).unwrap();
    let result = fit(&data, &FitOptions::default()).unwrap();

    let mut worst_hazard = 0.0_f64;
    let mut worst_survival = 0.0_f64;
    for i in 1..=10 {
        let k = i as f64 / 10.0;
        let hazard = result.cfg.baseline_hazard(&result.params.theta, k).unwrap();
        let cumhaz = result.cfg.baseline_cumhaz(&result.params.theta, k).unwrap();
        worst_hazard = worst_hazard.max((hazard - 3.0 * k * k).abs());
        worst_survival = worst_survival.max(((-cumhaz).exp() - (-k.powi(3)).exp()).abs());
    }
    let ok = result.converged && worst_hazard <= 0.5 && worst_survival <= 0.05;
    report(
        7,
        ok,
        &format!(
            "converged {}, max |hazard error| {worst_hazard:.3} (≤0.5), max |survival error| {worst_survival:.3} (≤0.05)",
            result.converged
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: active constraints and the padded covariance.
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_active_constraints_and_covariance() {
    let cfg = SimConfig {
        seed: 2,
        ..table_settings(100)
    };
    let data = simulate_dataset(&cfg).unwrap();
    let opts = FitOptions {
        knot_count: Some(15),
        ..FitOptions::default()
    };
    let result = fit(&data, &opts).unwrap();
    let p = result.params.beta.len();
    let q = result.params.gamma.len();

    let has_active = !result.active.is_empty();
    let cov = result.covariance.as_ref();
    let padded = cov.is_some_and(|c| {
        result.active.iter().all(|&u| {
            let i = p + q + u;
            c.cov.row(i).iter().all(|&v| v == 0.0) && c.cov.column(i).iter().all(|&v| v == 0.0)
        })
    });
    let eig = cov.map(|c| c.retained_min_eigenvalue);
    let psd = eig.is_some_and(|e| e >= -1e-10);

    let ok = has_active && padded && psd;
    report(
        8,
        ok,
        &format!(
            "active set {:?}, zero padding {padded}, retained min eigenvalue {:?} (≥ -1e-10: {psd}), clipped {:?}",
            result.active,
            eig,
            cov.map(|c| c.clipped_eigenvalues)
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: round-trip I/O identity and end-to-end prediction contrasts.
// ---------------------------------------------------------------------------

fn emit_ingest_identity(dir: &Path, tag: &str, data: &Dataset) -> bool {
    let columns = aft::io::ColumnNames {
        x: (1..=data.p()).map(|j| format!("x{j}")).collect(),
        z: (1..=data.q()).map(|j| format!("z{j}")).collect(),
    };
    let subjects = dir.join(format!("{tag}_subjects.csv"));
    let long_path = dir.join(format!("{tag}_long.csv"));
    let long = (data.q() > 0).then_some(long_path.as_path());
    aft::io::emit(data, &columns, &subjects, long).unwrap();
    let back = aft::io::ingest(&subjects, long).unwrap();
    back.data == *data && back.columns == columns
}

#[test]
fn criterion_9_round_trip_and_prediction_contrast() {
    let dir = tempfile::TempDir::new().unwrap();

    // 100 datasets: 60 adversarial small instances, 40 generator draws.
    let mut round_trips = 0usize;
    let mut failures = 0usize;
    for seed in 0..60u64 {
        let data = random_instance(seed).data;
        round_trips += 1;
        if !emit_ingest_identity(dir.path(), &format!("inst{seed}"), &data) {
            failures += 1;
        }
    }
    for seed in 0..40u64 {
        let pi_event = if seed % 2 == 0 { 0.3 } else { 0.7 };
        let (alpha_l, alpha_r) = default_alphas(pi_event).unwrap();
        let cfg = SimConfig {
            n: 30,
            pi_event,
            alpha_l,
            alpha_r,
            seed,
            ..table_settings(0)
        };
        let data = simulate_dataset(&cfg).unwrap();
        round_trips += 1;
        if !emit_ingest_identity(dir.path(), &format!("sim{seed}"), &data) {
            failures += 1;
        }
    }

    // End to end through the binary: a strongly protective "00" trajectory
    // must dominate "11" everywhere after zero, with the ratio table keyed
    // to the first scenario.
    let cfg = SimConfig {
        n: 400,
        gamma: -0.5,
        seed: 9,
        ..table_settings(0)
    };
    let data = simulate_dataset(&cfg).unwrap();
    let columns = aft::io::ColumnNames {
        x: vec!["x1".to_owned(), "x2".to_owned()],
        z: vec!["z1".to_owned()],
    };
    let subjects = dir.path().join("pred_subjects.csv");
    let long = dir.path().join("pred_long.csv");
    aft::io::emit(&data, &columns, &subjects, Some(&long)).unwrap();

    let fit_out = dir.path().join("pred_fit");
    let status = run_bin(&[
        "fit",
        "--subjects", subjects.to_str().unwrap(),
        "--data", long.to_str().unwrap(),
        "--out", fit_out.to_str().unwrap(),
    ]);
    assert!(status.status.success(), "CLI fit failed");

    let scen = dir.path().join("scenarios.csv");
    std::fs::write(&scen, "name,x1,x2,traj,tau\nnever,0,0.5,00,\nalways,0,0.5,11,\n").unwrap();
    let pred_out = dir.path().join("pred");
    let status = run_bin(&[
        "predict",
        "--fit", fit_out.join("fit.json").to_str().unwrap(),
        "--scenarios", scen.to_str().unwrap(),
        "--t-max", "1.5",
        "--t-steps", "30",
        "--out", pred_out.to_str().unwrap(),
    ]);
    assert!(status.status.success(), "CLI predict failed");

    let survival = std::fs::read_to_string(pred_out.join("survival.csv")).unwrap();
    let mut ordered = true;
    let mut strict_somewhere = false;
    let mut header_ok = false;
    for (i, line) in survival.lines().enumerate() {
        if i == 0 {
            header_ok = line == "t,never,always";
            continue;
        }
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let (never, always) = (cells[1], cells[2]);
        if never < always {
            ordered = false;
        }
        if never > always {
            strict_somewhere = true;
        }
    }
    let ratio = std::fs::read_to_string(pred_out.join("ratio.csv")).unwrap();
    let ratio_ok = ratio.lines().skip(1).all(|line| {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        cells[1] <= 1.0
    });

    let ok = failures == 0 && header_ok && ordered && strict_somewhere && ratio_ok;
    report(
        9,
        ok,
        &format!(
            "{round_trips} round trips ({failures} failed), protective ordering {ordered} (strict somewhere {strict_somewhere}), ratio ≤ 1 {ratio_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion scaffolding sanity (not a numbered criterion): the helpers above
// exercise real data paths, so keep them honest.
// ---------------------------------------------------------------------------

#[test]
fn helper_sanity_penalty_and_likelihood_agree() {
    let inst = random_instance(123);
    let pl = penalised_log_likelihood(&inst.data, &inst.cfg, &inst.penalty, inst.h, &inst.params)
        .unwrap();
    let ll = log_likelihood(&inst.data, &inst.cfg, &inst.params).unwrap();
    let quad = inst.penalty.quadratic_form(inst.params.theta.view());
    assert!((pl - (ll - inst.h * quad)).abs() <= 1e-10 * pl.abs().max(1.0));

    let r2 = penalty_matrix(&inst.cfg);
    assert_eq!(r2.r, inst.penalty.r);

    // StepTrajectory and Array plumbing used by the round-trip helper.
    let z = StepTrajectory::new(vec![0.0, 0.5], Array2::zeros((2, 1))).unwrap();
    assert_eq!(z.dim(), 1);
}
