use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    audit_eq, step_size_warning, with_pool, write_csv, ExperimentConfig, ExperimentKind, FailedRun,
    ReportMeta,
};
use crate::adversary::{attack_statistics, AttackModel};
use crate::error::{Error, Result};
use crate::privacy::{mix_seed, LaplaceSpec};
use crate::report::fmt_g;
use crate::seeking::SeekEngine;

/// One inferred demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRecord {
    pub sigma: f64,
    pub budget: usize,
    pub run: usize,
    pub seed: u64,
    pub beta_hat: f64,
    pub d_hat: f64,
    pub abs_error: f64,
    pub residual: f64,
}

/// Attack quality for one `(σ, B)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyCell {
    pub sigma: f64,
    pub budget: usize,
    pub runs: usize,
    pub failed: usize,
    pub mse: f64,
    pub hit_rate: f64,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub meta: ReportMeta,
    pub victim: usize,
    pub true_demand: f64,
    pub true_beta: f64,
    pub start: usize,
    pub budgets: Vec<usize>,
    /// Whether each budget's window pins down `β̂` on noiseless data.
    pub identifiable: Vec<bool>,
    pub records: Vec<PrivacyRecord>,
    pub cells: Vec<PrivacyCell>,
    pub failures: Vec<FailedRun>,
}

fn aggregate(
    records: &[PrivacyRecord],
    failures: &[FailedRun],
    sigmas: &[f64],
    budgets: &[usize],
    true_d: f64,
) -> Vec<PrivacyCell> {
    let mut cells = Vec::new();
    for &sigma in sigmas {
        let failed = failures.iter().filter(|f| f.sigma == sigma).count();
        for &budget in budgets {
            let samples: Vec<f64> = records
                .iter()
                .filter(|r| r.sigma == sigma && r.budget == budget)
                .map(|r| r.d_hat)
                .collect();
            let cell = match attack_statistics(&samples, true_d) {
                Ok(s) => PrivacyCell {
                    sigma,
                    budget,
                    runs: s.count,
                    failed,
                    mse: s.mse,
                    hit_rate: s.hit_rate,
                    mean: s.mean,
                    median: s.median,
                    min: s.min,
                    max: s.max,
                },
                Err(_) => PrivacyCell {
                    sigma,
                    budget,
                    runs: 0,
                    failed,
                    mse: f64::NAN,
                    hit_rate: f64::NAN,
                    mean: f64::NAN,
                    median: f64::NAN,
                    min: f64::NAN,
                    max: f64::NAN,
                },
            };
            cells.push(cell);
        }
    }
    cells
}

/// Attacks `runs` noisy executions per noise level at every budget.
///
/// Each `(σ, run)` pair is executed once up to the end of the longest
/// window, and every budget's window is cut from that same trajectory.
pub fn run_privacy_experiment(config: &ExperimentConfig) -> Result<PrivacyReport> {
    config.validate()?;
    let attack = config
        .attack
        .as_ref()
        .ok_or_else(|| Error::Config("privacy experiment needs an attack section".into()))?;
    let levels = config.noise_levels()?;
    let game = config.game()?;
    let coeffs = game.coefficients()?;
    let graph = config.graph()?;
    let alpha = config.seek.alpha;
    let n = game.count();
    let victim = attack.victim;
    let true_d = game.prosumers[victim].d;

    let mut meta = ReportMeta::new(ExperimentKind::Privacy, config, &levels);
    meta.warnings
        .extend(step_size_warning(&coeffs, &graph, alpha));

    let costs = game.costs();
    let models = attack
        .budgets
        .iter()
        .map(|&b| AttackModel::new(victim, b, &coeffs, &costs, &game.market, &graph, alpha))
        .collect::<Result<Vec<_>>>()?;
    let longest = *attack.budgets.iter().max().expect("validated nonempty");
    let end = attack.start + longest - 1;

    let jobs: Vec<(f64, usize)> = levels
        .sigma
        .iter()
        .flat_map(|&s| (0..config.runs).map(move |r| (s, r)))
        .collect();

    let outcomes = with_pool(config.threads, || {
        jobs.par_iter()
            .map(|&(sigma, run)| {
                let seed = mix_seed(config.seed, 0, run as u64);
                let attempt = || -> Result<Vec<PrivacyRecord>> {
                    let noise = LaplaceSpec::new(sigma, seed)?.realization(n);
                    let mut engine = SeekEngine::new(&coeffs, &graph, alpha, Some(&noise), None)?;
                    let mut rows = Vec::with_capacity(longest);
                    if attack.start == 0 {
                        rows.push(engine.row(victim).to_vec());
                    }
                    while engine.iteration() < end {
                        engine.step()?;
                        if engine.iteration() >= attack.start {
                            rows.push(engine.row(victim).to_vec());
                        }
                    }
                    models
                        .iter()
                        .zip(&attack.budgets)
                        .map(|(model, &budget)| {
                            let res = model.infer(&rows[..budget])?;
                            Ok(PrivacyRecord {
                                sigma,
                                budget,
                                run,
                                seed,
                                beta_hat: res.beta_hat,
                                d_hat: res.d_hat,
                                abs_error: (res.d_hat - true_d).abs(),
                                residual: res.residual,
                            })
                        })
                        .collect()
                };
                attempt().map_err(|e| FailedRun::new(sigma, None, run, seed, &e))
            })
            .collect::<Vec<_>>()
    })?;

    let mut records = Vec::with_capacity(jobs.len() * attack.budgets.len());
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(batch) => records.extend(batch),
            Err(f) => failures.push(f),
        }
    }
    // Sigma-major, then budget, then run.
    let order = |r: &PrivacyRecord| {
        let s = levels
            .sigma
            .iter()
            .position(|&x| x == r.sigma)
            .unwrap_or(usize::MAX);
        let b = attack
            .budgets
            .iter()
            .position(|&x| x == r.budget)
            .unwrap_or(usize::MAX);
        (s, b, r.run)
    };
    records.sort_by_key(order);

    let cells = aggregate(&records, &failures, &levels.sigma, &attack.budgets, true_d);
    Ok(PrivacyReport {
        meta,
        victim,
        true_demand: true_d,
        true_beta: coeffs.beta()[victim],
        start: attack.start,
        budgets: attack.budgets.clone(),
        identifiable: models.iter().map(AttackModel::identifiable).collect(),
        records,
        cells,
        failures,
    })
}

impl PrivacyReport {
    pub fn cell(&self, sigma: f64, budget: usize) -> Option<&PrivacyCell> {
        self.cells
            .iter()
            .find(|c| c.sigma == sigma && c.budget == budget)
    }

    pub fn audit(&self) -> Result<()> {
        let fresh = aggregate(
            &self.records,
            &self.failures,
            &self.meta.sigma,
            &self.budgets,
            self.true_demand,
        );
        audit_eq("privacy cells", &self.cells, &fresh)
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "privacy",
            "meta": self.meta,
            "victim": self.victim,
            "true_demand": self.true_demand,
            "true_beta": self.true_beta,
            "start": self.start,
            "budgets": self.budgets,
            "identifiable": self.identifiable,
            "cells": self.cells,
            "failed_runs": self.failures.len(),
            "failures": self.failures,
        })
    }

    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let runs = dir.join("privacy_runs.csv");
        write_csv(
            &runs,
            "privacy_runs",
            &[
                "sigma",
                "budget",
                "run",
                "seed",
                "d_hat",
                "abs_error",
                "beta_hat",
                "residual",
            ],
            self.records.iter().map(|r| {
                vec![
                    fmt_g(r.sigma),
                    r.budget.to_string(),
                    r.run.to_string(),
                    r.seed.to_string(),
                    fmt_g(r.d_hat),
                    fmt_g(r.abs_error),
                    fmt_g(r.beta_hat),
                    fmt_g(r.residual),
                ]
            }),
        )?;
        let heatmap = dir.join("privacy_heatmap.csv");
        write_csv(
            &heatmap,
            "privacy_heatmap",
            &[
                "sigma", "budget", "mse", "hit_rate", "runs", "failed", "mean", "median",
            ],
            self.cells.iter().map(|c| {
                vec![
                    fmt_g(c.sigma),
                    c.budget.to_string(),
                    fmt_g(c.mse),
                    fmt_g(c.hit_rate),
                    c.runs.to_string(),
                    c.failed.to_string(),
                    fmt_g(c.mean),
                    fmt_g(c.median),
                ]
            }),
        )?;
        let failed = dir.join("privacy_failed_runs.csv");
        write_failures(&failed, "privacy_failed_runs", &self.failures)?;
        Ok(vec![runs, heatmap, failed])
    }
}

pub(super) fn write_failures(path: &Path, schema: &str, failures: &[FailedRun]) -> Result<()> {
    write_csv(
        path,
        schema,
        &["sigma", "a", "run", "seed", "kind", "message"],
        failures.iter().map(|f| {
            vec![
                fmt_g(f.sigma),
                f.a.map(fmt_g).unwrap_or_default(),
                f.run.to_string(),
                f.seed.to_string(),
                f.kind.clone(),
                format!("\"{}\"", f.message.replace('"', "\"\"")),
            ]
        }),
    )
}
