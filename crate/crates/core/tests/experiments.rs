use std::path::{Path, PathBuf};

use dpnash::experiment::{
    run_convergence_experiment, run_fidelity_experiment, run_privacy_experiment, Baseline,
    ExperimentConfig,
};
use dpnash::{
    nash_equilibrium, run_experiment, seek, CommGraph, Error, ExperimentReport, Game, SeekConfig,
};

/// Exact-mode iterations of the reference game at α = 0.05, τ = 1e-5.
const EXACT_ITERATIONS_ALPHA_005: usize = 20_909;

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn write_all(report: &ExperimentReport, dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    report
        .write(dir)
        .unwrap()
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p.file_name().unwrap().into(), bytes)
        })
        .collect()
}

#[test]
fn campaigns_are_byte_identical_across_repeats_and_threads() {
    for name in [
        "smoke_privacy.json",
        "smoke_convergence.json",
        "smoke_fidelity.json",
    ] {
        let mut cfg = config(name);
        cfg.threads = Some(1);
        let a = run_experiment(&cfg).unwrap();
        cfg.threads = Some(3);
        let b = run_experiment(&cfg).unwrap();
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        // summary.json echoes the thread count; the CSVs must not depend on it.
        for ((fa, xa), (fb, xb)) in write_all(&a, da.path())
            .into_iter()
            .zip(write_all(&b, db.path()))
            .filter(|((f, _), _)| f.extension().is_some_and(|e| e == "csv"))
        {
            assert_eq!(fa, fb);
            assert!(xa == xb, "{name}: {} differs", fa.display());
        }
        a.audit().unwrap();

        cfg.seed += 1;
        let c = run_experiment(&cfg).unwrap();
        assert_ne!(a.summary()["cells"], c.summary()["cells"], "{name}");
    }
}

#[test]
fn audit_detects_tampering() {
    let cfg = config("smoke_privacy.json");
    let ExperimentReport::Privacy(mut r) = run_experiment(&cfg).unwrap() else {
        panic!("privacy report expected");
    };
    r.audit().unwrap();
    r.records[0].d_hat += 1.0;
    assert!(matches!(r.audit(), Err(Error::Audit(_))));

    let cfg = config("smoke_fidelity.json");
    let mut f = run_fidelity_experiment(&cfg).unwrap();
    f.audit().unwrap();
    f.records[3].cost_gap += 1e-9;
    assert!(matches!(f.audit(), Err(Error::Audit(_))));
}

#[test]
fn failed_runs_do_not_abort_or_contaminate() {
    let mut cfg = config("smoke_convergence.json");
    cfg.noise.sigma = Some(vec![1.0, 1e12]);
    cfg.runs = 30;
    cfg.seek.max_iter = 3000;
    let r = run_convergence_experiment(&cfg).unwrap();
    r.audit().unwrap();
    assert!(!r.failures.is_empty());
    assert!(r
        .failures
        .iter()
        .all(|f| f.sigma == 1e12 && f.kind == "divergence"));
    let huge = r.cell(1e12).unwrap();
    assert_eq!(huge.runs + huge.failed, 30);
    assert_eq!(huge.failed, r.failures.len());

    // The clean cell matches a campaign that never saw the huge noise level.
    let mut alone = cfg.clone();
    alone.noise.sigma = Some(vec![1.0]);
    let clean = run_convergence_experiment(&alone).unwrap();
    assert_eq!(r.cell(1.0), clean.cell(1.0));
    assert!(clean.failures.is_empty());
}

#[test]
fn noise_levels_share_standard_draws() {
    let mut cfg = config("smoke_privacy.json");
    cfg.noise.sigma = Some(vec![1.0, 3.0]);
    cfg.runs = 20;
    let r = run_privacy_experiment(&cfg).unwrap();
    let first: Vec<_> = r.records.iter().filter(|x| x.sigma == 1.0).collect();
    let second: Vec<_> = r.records.iter().filter(|x| x.sigma == 3.0).collect();
    for (x, y) in first.iter().zip(&second) {
        assert_eq!((x.run, x.budget, x.seed), (y.run, y.budget, y.seed));
        // The attack is linear in the noise, so errors scale with σ.
        let ex = x.beta_hat - r.true_beta;
        let ey = y.beta_hat - r.true_beta;
        assert!(
            (3.0 * ex - ey).abs() <= 1e-6 * ey.abs().max(1e-3),
            "{ex} {ey}"
        );
    }
}

#[test]
fn zero_noise_privacy_attack_is_exact() {
    let mut cfg = config("smoke_privacy.json");
    cfg.noise.sigma = Some(vec![0.0]);
    cfg.runs = 3;
    let r = run_privacy_experiment(&cfg).unwrap();
    for rec in &r.records {
        assert!((rec.d_hat - 15.0).abs() < 1e-3, "{rec:?}");
    }
    assert!(r.cells.iter().all(|c| c.hit_rate == 1.0));
}

#[test]
fn zero_noise_convergence_matches_frozen_count() {
    let mut cfg = config("convergence.json");
    cfg.noise.sigma = Some(vec![0.0]);
    cfg.runs = 2;
    let r = run_convergence_experiment(&cfg).unwrap();
    for rec in &r.records {
        assert!(rec.converged);
        assert!(rec.iterations.abs_diff(EXACT_ITERATIONS_ALPHA_005) <= 1);
    }

    let game = Game::table_one();
    let coeffs = game.coefficients().unwrap();
    let graph = CommGraph::fully_connected(6, 0.1).unwrap();
    let t = seek(&coeffs, &graph, &SeekConfig::new(0.05, 1e-5), None, None).unwrap();
    assert_eq!(t.iterations, r.records[0].iterations);
    let b = nash_equilibrium(&coeffs).unwrap();
    assert!(t.final_state().max_deviation(b.as_slice()) < 1e-2);
}

#[test]
fn zero_noise_fidelity_gap_vanishes_against_noiseless_run() {
    let mut cfg = config("smoke_fidelity.json");
    cfg.noise.sigma = Some(vec![0.0]);
    cfg.runs = 3;
    let mut spec = cfg.fidelity.clone().unwrap();
    spec.baseline = Baseline::Noiseless;
    cfg.fidelity = Some(spec);
    let r = run_fidelity_experiment(&cfg).unwrap();
    for rec in &r.records {
        assert!(rec.cost_gap.abs() <= 1e-9, "{}", rec.cost_gap);
    }
    assert_eq!(r.cell(0.0, 10.0).unwrap().negative_gap_pct, 0.0);
}

#[test]
fn csv_files_carry_schema_line() {
    let cfg = config("smoke_convergence.json");
    let report = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, bytes) in write_all(&report, dir.path()) {
        if name.extension().is_some_and(|e| e == "csv") {
            let text = String::from_utf8(bytes).unwrap();
            let first = text.lines().next().unwrap();
            let stem = name.file_stem().unwrap().to_str().unwrap();
            assert_eq!(
                first,
                format!("# dpnash {} schema={stem}/v1", env!("CARGO_PKG_VERSION"))
            );
        }
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["kind"], "convergence");
}

#[test]
fn config_without_kind_is_rejected() {
    let mut cfg = config("smoke_privacy.json");
    cfg.experiment = None;
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
}
