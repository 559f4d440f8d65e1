use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::privacy_sweep::write_failures;
use super::{
    audit_eq, equilibrium, mean_and_stderr, read_bids, step_size_warning, with_pool, write_csv,
    Baseline, ExperimentConfig, ExperimentKind, FailedRun, Readout, ReportMeta,
};
use crate::error::{Error, Result};
use crate::game::{
    recover_dispatch, social_optimum, total_cost, BidProfile, Game, GameCoefficients,
};
use crate::network::CommGraph;
use crate::privacy::{mix_seed, LaplaceSpec};
use crate::report::fmt_g;
use crate::seeking::{seek, NoiseRealization, SeekConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub sigma: f64,
    pub a: f64,
    pub run: usize,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
    pub cost_gap: f64,
    pub bids: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityCell {
    pub sigma: f64,
    pub a: f64,
    pub runs: usize,
    pub failed: usize,
    pub mean_gap: f64,
    /// Percentage of runs whose cost fell below the baseline.
    pub negative_gap_pct: f64,
    pub mean_cost: f64,
    pub mean_bids: Vec<f64>,
    pub stderr_bids: Vec<f64>,
}

/// Reference quantities for one market sensitivity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityMarket {
    pub a: f64,
    pub equilibrium: Vec<f64>,
    pub equilibrium_cost: f64,
    pub baseline_cost: f64,
    pub social_optimum_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub meta: ReportMeta,
    pub baseline: Baseline,
    pub readout: Readout,
    pub markets: Vec<FidelityMarket>,
    pub records: Vec<FidelityRecord>,
    pub cells: Vec<FidelityCell>,
    pub failures: Vec<FailedRun>,
}

fn aggregate(
    records: &[FidelityRecord],
    failures: &[FailedRun],
    sigmas: &[f64],
    markets: &[f64],
) -> Vec<FidelityCell> {
    let mut cells = Vec::new();
    for &a in markets {
        for &sigma in sigmas {
            let rs: Vec<&FidelityRecord> = records
                .iter()
                .filter(|r| r.a == a && r.sigma == sigma)
                .collect();
            let n = rs.len() as f64;
            let bids: Vec<&[f64]> = rs.iter().map(|r| r.bids.as_slice()).collect();
            let (mean_bids, stderr_bids) = mean_and_stderr(&bids);
            cells.push(FidelityCell {
                sigma,
                a,
                runs: rs.len(),
                failed: failures
                    .iter()
                    .filter(|f| f.a == Some(a) && f.sigma == sigma)
                    .count(),
                mean_gap: rs.iter().map(|r| r.cost_gap).sum::<f64>() / n,
                negative_gap_pct: 100.0 * rs.iter().filter(|r| r.cost_gap < 0.0).count() as f64 / n,
                mean_cost: rs.iter().map(|r| r.cost).sum::<f64>() / n,
                mean_bids,
                stderr_bids,
            });
        }
    }
    cells
}

struct Market {
    game: Game,
    coeffs: GameCoefficients,
    baseline_cost: f64,
}

fn run_bids(
    market: &Market,
    graph: &CommGraph,
    seek_cfg: &SeekConfig,
    noise: Option<&NoiseRealization>,
    readout: Readout,
) -> Result<(bool, usize, Vec<f64>, f64)> {
    let t = seek(&market.coeffs, graph, seek_cfg, noise, None)?;
    let bids = read_bids(t.final_state(), readout);
    let dispatch = recover_dispatch(
        &BidProfile(bids.clone()),
        &market.game.prosumers,
        &market.game.market,
    )?;
    Ok((
        t.converged,
        t.iterations,
        bids,
        total_cost(&dispatch, &market.game.prosumers),
    ))
}

/// Compares the dispatch cost of noisy equilibria against a reference cost
/// for every `(a, σ)` cell.
pub fn run_fidelity_experiment(config: &ExperimentConfig) -> Result<FidelityReport> {
    config.validate()?;
    let spec = config
        .fidelity
        .clone()
        .ok_or_else(|| Error::Config("fidelity experiment needs a fidelity section".into()))?;
    let levels = config.noise_levels()?;
    let graph = config.graph()?;
    let mut seek_cfg = config.seek;
    seek_cfg.record_every = 0;
    let mut meta = ReportMeta::new(ExperimentKind::Fidelity, config, &levels);

    let mut markets = Vec::new();
    let mut summaries = Vec::new();
    for &a in &spec.market_sensitivities {
        let game = config.game.with_sensitivity(a)?;
        let coeffs = game.coefficients()?;
        if let Some(w) = step_size_warning(&coeffs, &graph, seek_cfg.alpha) {
            meta.warnings.push(format!("a = {a}: {w}"));
        }
        let b_star = equilibrium(&coeffs)?;
        let eq_dispatch =
            recover_dispatch(&BidProfile(b_star.clone()), &game.prosumers, &game.market)?;
        let equilibrium_cost = total_cost(&eq_dispatch, &game.prosumers);
        let social = total_cost(
            &social_optimum(&game.prosumers, &game.market)?,
            &game.prosumers,
        );
        let mut market = Market {
            game,
            coeffs,
            baseline_cost: equilibrium_cost,
        };
        if spec.baseline == Baseline::Noiseless {
            let (converged, _, _, cost) = run_bids(&market, &graph, &seek_cfg, None, spec.readout)?;
            if !converged {
                meta.warnings
                    .push(format!("a = {a}: noiseless baseline run did not converge"));
            }
            market.baseline_cost = cost;
        }
        summaries.push(FidelityMarket {
            a,
            equilibrium: b_star,
            equilibrium_cost,
            baseline_cost: market.baseline_cost,
            social_optimum_cost: social,
        });
        markets.push(market);
    }

    let mut jobs = Vec::new();
    for (ai, _) in spec.market_sensitivities.iter().enumerate() {
        for &sigma in &levels.sigma {
            for run in 0..config.runs {
                jobs.push((ai, sigma, run));
            }
        }
    }
    let n = config.game.prosumers.len();
    let outcomes = with_pool(config.threads, || {
        jobs.par_iter()
            .map(|&(ai, sigma, run)| {
                let a = spec.market_sensitivities[ai];
                let seed = mix_seed(config.seed, ai as u64, run as u64);
                let market = &markets[ai];
                let attempt = || -> Result<FidelityRecord> {
                    let noise = LaplaceSpec::new(sigma, seed)?.realization(n);
                    let (converged, iterations, bids, cost) =
                        run_bids(market, &graph, &seek_cfg, Some(&noise), spec.readout)?;
                    Ok(FidelityRecord {
                        sigma,
                        a,
                        run,
                        seed,
                        converged,
                        iterations,
                        cost,
                        cost_gap: cost - market.baseline_cost,
                        bids,
                    })
                };
                attempt().map_err(|e| FailedRun::new(sigma, Some(a), run, seed, &e))
            })
            .collect::<Vec<_>>()
    })?;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => records.push(r),
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
    let cells = aggregate(
        &records,
        &failures,
        &levels.sigma,
        &spec.market_sensitivities,
    );
    Ok(FidelityReport {
        meta,
        baseline: spec.baseline,
        readout: spec.readout,
        markets: summaries,
        records,
        cells,
        failures,
    })
}

impl FidelityReport {
    pub fn cell(&self, sigma: f64, a: f64) -> Option<&FidelityCell> {
        self.cells.iter().find(|c| c.sigma == sigma && c.a == a)
    }

    pub fn audit(&self) -> Result<()> {
        let markets: Vec<f64> = self.markets.iter().map(|m| m.a).collect();
        let fresh = aggregate(&self.records, &self.failures, &self.meta.sigma, &markets);
        audit_eq("fidelity cells", &self.cells, &fresh)?;
        for r in &self.records {
            let m = self
                .markets
                .iter()
                .find(|m| m.a == r.a)
                .ok_or_else(|| Error::Audit(format!("record for unknown a = {}", r.a)))?;
            if r.cost - m.baseline_cost != r.cost_gap {
                return Err(Error::Audit(format!(
                    "cost gap of run {} at sigma {} does not match cost minus baseline",
                    r.run, r.sigma
                )));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "fidelity",
            "meta": self.meta,
            "baseline": self.baseline,
            "readout": self.readout,
            "markets": self.markets,
            "cells": self.cells,
            "failed_runs": self.failures.len(),
            "failures": self.failures,
        })
    }

    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let runs = dir.join("fidelity_runs.csv");
        write_csv(
            &runs,
            "fidelity_runs",
            &[
                "sigma",
                "a",
                "run",
                "seed",
                "cost",
                "cost_gap",
                "converged",
                "iterations",
            ],
            self.records.iter().map(|r| {
                vec![
                    fmt_g(r.sigma),
                    fmt_g(r.a),
                    r.run.to_string(),
                    r.seed.to_string(),
                    fmt_g(r.cost),
                    fmt_g(r.cost_gap),
                    r.converged.to_string(),
                    r.iterations.to_string(),
                ]
            }),
        )?;
        let summary = dir.join("fidelity_summary.csv");
        write_csv(
            &summary,
            "fidelity_summary",
            &[
                "sigma",
                "a",
                "mean_gap",
                "negative_gap_pct",
                "runs",
                "failed",
                "mean_cost",
            ],
            self.cells.iter().map(|c| {
                vec![
                    fmt_g(c.sigma),
                    fmt_g(c.a),
                    fmt_g(c.mean_gap),
                    fmt_g(c.negative_gap_pct),
                    c.runs.to_string(),
                    c.failed.to_string(),
                    fmt_g(c.mean_cost),
                ]
            }),
        )?;
        let n = self.markets.first().map_or(0, |m| m.equilibrium.len());
        let bids = dir.join("fidelity_bids.csv");
        let mut header = vec!["sigma".to_string(), "a".into(), "run".into()];
        header.extend((0..n).map(|i| format!("b_{i}")));
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            &bids,
            "fidelity_bids",
            &header_refs,
            self.records.iter().map(|r| {
                let mut row = vec![fmt_g(r.sigma), fmt_g(r.a), r.run.to_string()];
                row.extend(r.bids.iter().map(|b| fmt_g(*b)));
                row
            }),
        )?;
        let failed = dir.join("fidelity_failed_runs.csv");
        write_failures(&failed, "fidelity_failed_runs", &self.failures)?;
        Ok(vec![runs, summary, bids, failed])
    }
}
