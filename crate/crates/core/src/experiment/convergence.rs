use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::privacy_sweep::write_failures;
use super::{
    audit_eq, equilibrium, mean_and_stderr, read_bids, step_size_warning, with_pool, write_csv,
    ExperimentConfig, ExperimentKind, FailedRun, ReportMeta,
};
use crate::error::Result;
use crate::game::GameCoefficients;
use crate::privacy::{mix_seed, LaplaceSpec};
use crate::report::fmt_g;
use crate::seeking::{
    build_iteration_matrix, residual_log, seek, step_size_bound, variance_bound,
    variance_bound_trace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub sigma: f64,
    pub run: usize,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    /// `‖y(final) − 1 ⊗ b*‖²` over the whole stacked state.
    pub sq_deviation: f64,
    /// Converged bids per the configured readout.
    pub bids: Vec<f64>,
}

/// Sampled `log₁₀` Frobenius residuals of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTrace {
    pub sigma: f64,
    pub run: usize,
    pub points: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCell {
    pub sigma: f64,
    pub runs: usize,
    pub failed: usize,
    pub converged: usize,
    pub mean_iterations: f64,
    pub std_iterations: f64,
    pub min_iterations: usize,
    pub max_iterations: usize,
    pub mean_sq_deviation: f64,
    pub variance_bound: f64,
    pub variance_bound_trace: f64,
    pub mean_bids: Vec<f64>,
    pub stderr_bids: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub meta: ReportMeta,
    pub equilibrium: Vec<f64>,
    pub spectral_radius: f64,
    pub step_size_bound: Option<f64>,
    pub records: Vec<ConvergenceRecord>,
    pub traces: Vec<ResidualTrace>,
    pub cells: Vec<ConvergenceCell>,
    pub failures: Vec<FailedRun>,
}

/// Variance bounds at fixed `(m, α)`, evaluated per noise level.
struct Bounds<'a> {
    coeffs: &'a GameCoefficients,
    m: f64,
    alpha: f64,
}

impl Bounds<'_> {
    fn stated(&self, sigma: f64) -> f64 {
        variance_bound(self.coeffs, self.m, self.alpha, sigma).unwrap_or(f64::NAN)
    }

    fn trace(&self, sigma: f64) -> f64 {
        variance_bound_trace(self.coeffs, self.m, self.alpha, sigma).unwrap_or(f64::NAN)
    }
}

fn aggregate(
    records: &[ConvergenceRecord],
    failures: &[FailedRun],
    sigmas: &[f64],
    bounds: &Bounds<'_>,
) -> Vec<ConvergenceCell> {
    sigmas
        .iter()
        .map(|&sigma| {
            let rs: Vec<&ConvergenceRecord> = records.iter().filter(|r| r.sigma == sigma).collect();
            let n = rs.len() as f64;
            let iters: Vec<f64> = rs.iter().map(|r| r.iterations as f64).collect();
            let mean_it = iters.iter().sum::<f64>() / n;
            let std_it = if rs.len() > 1 {
                (iters
                    .iter()
                    .map(|x| (x - mean_it) * (x - mean_it))
                    .sum::<f64>()
                    / (n - 1.0))
                    .sqrt()
            } else {
                f64::NAN
            };
            let bids: Vec<&[f64]> = rs.iter().map(|r| r.bids.as_slice()).collect();
            let (mean_bids, stderr_bids) = mean_and_stderr(&bids);
            ConvergenceCell {
                sigma,
                runs: rs.len(),
                failed: failures.iter().filter(|f| f.sigma == sigma).count(),
                converged: rs.iter().filter(|r| r.converged).count(),
                mean_iterations: mean_it,
                std_iterations: std_it,
                min_iterations: rs.iter().map(|r| r.iterations).min().unwrap_or(0),
                max_iterations: rs.iter().map(|r| r.iterations).max().unwrap_or(0),
                mean_sq_deviation: rs.iter().map(|r| r.sq_deviation).sum::<f64>() / n,
                variance_bound: bounds.stated(sigma),
                variance_bound_trace: bounds.trace(sigma),
                mean_bids,
                stderr_bids,
            }
        })
        .collect()
}

/// Runs `runs` noisy executions to convergence per noise level.
pub fn run_convergence_experiment(config: &ExperimentConfig) -> Result<ConvergenceReport> {
    config.validate()?;
    let spec = config.convergence.clone().unwrap_or_default();
    let levels = config.noise_levels()?;
    let game = config.game()?;
    let coeffs = game.coefficients()?;
    let graph = config.graph()?;
    let n = game.count();
    let b_star = equilibrium(&coeffs)?;
    let mut seek_cfg = config.seek;
    seek_cfg.record_every = 0;

    let mut meta = ReportMeta::new(ExperimentKind::Convergence, config, &levels);
    meta.warnings
        .extend(step_size_warning(&coeffs, &graph, seek_cfg.alpha));
    let m = build_iteration_matrix(&coeffs, &graph, seek_cfg.alpha)?.m;
    let bounds = Bounds {
        coeffs: &coeffs,
        m,
        alpha: seek_cfg.alpha,
    };
    if m >= 1.0 {
        meta.warnings.push(format!(
            "spectral radius {m} is not below 1; variance bounds are undefined"
        ));
    }

    let jobs: Vec<(f64, usize)> = levels
        .sigma
        .iter()
        .flat_map(|&s| (0..config.runs).map(move |r| (s, r)))
        .collect();
    let stride = spec.residual_stride;
    let outcomes = with_pool(config.threads, || {
        jobs.par_iter()
            .map(|&(sigma, run)| {
                let seed = mix_seed(config.seed, 0, run as u64);
                let attempt = || -> Result<(ConvergenceRecord, ResidualTrace)> {
                    let noise = LaplaceSpec::new(sigma, seed)?.realization(n);
                    let t = seek(&coeffs, &graph, &seek_cfg, Some(&noise), None)?;
                    let last = t.final_state();
                    let points = if stride == 0 {
                        Vec::new()
                    } else {
                        let log = residual_log(&t);
                        let mut pts: Vec<(usize, f64)> =
                            log.iter().step_by(stride).copied().collect();
                        if let Some(&tail) = log.last() {
                            if pts.last() != Some(&tail) {
                                pts.push(tail);
                            }
                        }
                        pts
                    };
                    Ok((
                        ConvergenceRecord {
                            sigma,
                            run,
                            seed,
                            converged: t.converged,
                            iterations: t.iterations,
                            sq_deviation: last.squared_deviation(&b_star),
                            bids: read_bids(last, spec.readout),
                        },
                        ResidualTrace { sigma, run, points },
                    ))
                };
                attempt().map_err(|e| FailedRun::new(sigma, None, run, seed, &e))
            })
            .collect::<Vec<_>>()
    })?;

    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok((r, t)) => {
                records.push(r);
                traces.push(t);
            }
            Err(f) => failures.push(f),
        }
    }
    let unconverged = records.iter().filter(|r| !r.converged).count();
    if unconverged > 0 {
        meta.warnings.push(format!(
            "{unconverged} runs stopped at max_iter = {} without converging",
            seek_cfg.max_iter
        ));
    }
    let cells = aggregate(&records, &failures, &levels.sigma, &bounds);
    Ok(ConvergenceReport {
        meta,
        equilibrium: b_star,
        spectral_radius: m,
        step_size_bound: step_size_bound(&coeffs, &graph.spectrum()).ok(),
        records,
        traces,
        cells,
        failures,
    })
}

impl ConvergenceReport {
    pub fn cell(&self, sigma: f64) -> Option<&ConvergenceCell> {
        self.cells.iter().find(|c| c.sigma == sigma)
    }

    pub fn audit(&self) -> Result<()> {
        let coeffs = self.meta.config.game()?.coefficients()?;
        let bounds = Bounds {
            coeffs: &coeffs,
            m: self.spectral_radius,
            alpha: self.meta.config.seek.alpha,
        };
        let fresh = aggregate(&self.records, &self.failures, &self.meta.sigma, &bounds);
        audit_eq("convergence cells", &self.cells, &fresh)
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "convergence",
            "meta": self.meta,
            "equilibrium": self.equilibrium,
            "spectral_radius": self.spectral_radius,
            "step_size_bound": self.step_size_bound,
            "cells": self.cells,
            "failed_runs": self.failures.len(),
            "failures": self.failures,
        })
    }

    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let n = self.equilibrium.len();
        let iterations = dir.join("convergence_iterations.csv");
        let mut header = vec![
            "sigma".to_string(),
            "run".into(),
            "seed".into(),
            "converged".into(),
            "iterations".into(),
            "sq_deviation".into(),
        ];
        header.extend((0..n).map(|i| format!("b_{i}")));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            &iterations,
            "convergence_iterations",
            &header_refs,
            self.records.iter().map(|r| {
                let mut row = vec![
                    fmt_g(r.sigma),
                    r.run.to_string(),
                    r.seed.to_string(),
                    r.converged.to_string(),
                    r.iterations.to_string(),
                    fmt_g(r.sq_deviation),
                ];
                row.extend(r.bids.iter().map(|b| fmt_g(*b)));
                row
            }),
        )?;
        let residuals = dir.join("convergence_residuals.csv");
        write_csv(
            &residuals,
            "convergence_residuals",
            &["sigma", "run", "iteration", "log_residual"],
            self.traces.iter().flat_map(|t| {
                t.points.iter().map(move |(k, l)| {
                    vec![fmt_g(t.sigma), t.run.to_string(), k.to_string(), fmt_g(*l)]
                })
            }),
        )?;
        let summary = dir.join("convergence_summary.csv");
        write_csv(
            &summary,
            "convergence_summary",
            &[
                "sigma",
                "runs",
                "failed",
                "converged",
                "mean_iterations",
                "std_iterations",
                "min_iterations",
                "max_iterations",
                "mean_sq_deviation",
                "variance_bound",
                "variance_bound_trace",
            ],
            self.cells.iter().map(|c| {
                vec![
                    fmt_g(c.sigma),
                    c.runs.to_string(),
                    c.failed.to_string(),
                    c.converged.to_string(),
                    fmt_g(c.mean_iterations),
                    fmt_g(c.std_iterations),
                    c.min_iterations.to_string(),
                    c.max_iterations.to_string(),
                    fmt_g(c.mean_sq_deviation),
                    fmt_g(c.variance_bound),
                    fmt_g(c.variance_bound_trace),
                ]
            }),
        )?;
        let failed = dir.join("convergence_failed_runs.csv");
        write_failures(&failed, "convergence_failed_runs", &self.failures)?;
        Ok(vec![iterations, residuals, summary, failed])
    }
}
