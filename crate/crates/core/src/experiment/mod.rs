//! Seeded Monte Carlo campaigns: attack sweeps over noise and budget,
//! convergence statistics, and the cost fidelity of noisy equilibria.
//!
//! Every run draws its noise from `mix_seed(root, stream, run)`. The stream
//! never depends on the noise level, so run `r` sees the same standard
//! Laplace draws, scaled by `σ`, in every cell of a sweep.

mod config;
mod convergence;
mod fidelity;
mod output;
mod privacy_sweep;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{nash_equilibrium, GameCoefficients};
use crate::network::CommGraph;
use crate::seeking::{step_size_bound, EstimateState};

pub use config::{
    AttackSpec, Baseline, ConvergenceSpec, ExperimentConfig, ExperimentKind, FidelitySpec,
    GameSpec, GraphSpec, NoiseLevels, NoiseSpec, Readout, Topology,
};
pub use convergence::{
    run_convergence_experiment, ConvergenceCell, ConvergenceRecord, ConvergenceReport,
    ResidualTrace,
};
pub use fidelity::{
    run_fidelity_experiment, FidelityCell, FidelityMarket, FidelityRecord, FidelityReport,
};
pub use output::{write_csv, CSV_SCHEMA_VERSION};
pub use privacy_sweep::{run_privacy_experiment, PrivacyCell, PrivacyRecord, PrivacyReport};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance shared by every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tool: String,
    pub tool_version: String,
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    /// Noise scales actually run.
    pub sigma: Vec<f64>,
    pub warnings: Vec<String>,
}

impl ReportMeta {
    fn new(kind: ExperimentKind, config: &ExperimentConfig, levels: &NoiseLevels) -> Self {
        ReportMeta {
            tool: "dpnash".into(),
            tool_version: TOOL_VERSION.into(),
            kind,
            config: config.clone(),
            sigma: levels.sigma.clone(),
            warnings: levels.warnings.clone(),
        }
    }
}

/// A run that errored; it is excluded from every aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    pub run: usize,
    pub seed: u64,
    pub kind: String,
    pub message: String,
}

impl FailedRun {
    fn new(sigma: f64, a: Option<f64>, run: usize, seed: u64, err: &Error) -> Self {
        FailedRun {
            sigma,
            a,
            run,
            seed,
            kind: err.kind().into(),
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentReport {
    Privacy(PrivacyReport),
    Convergence(ConvergenceReport),
    Fidelity(FidelityReport),
}

impl ExperimentReport {
    pub fn meta(&self) -> &ReportMeta {
        match self {
            ExperimentReport::Privacy(r) => &r.meta,
            ExperimentReport::Convergence(r) => &r.meta,
            ExperimentReport::Fidelity(r) => &r.meta,
        }
    }

    /// Recomputes every aggregate from the per-run records.
    pub fn audit(&self) -> Result<()> {
        match self {
            ExperimentReport::Privacy(r) => r.audit(),
            ExperimentReport::Convergence(r) => r.audit(),
            ExperimentReport::Fidelity(r) => r.audit(),
        }
    }

    /// Writes the CSV files and `summary.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut files = match self {
            ExperimentReport::Privacy(r) => r.write_csv(dir)?,
            ExperimentReport::Convergence(r) => r.write_csv(dir)?,
            ExperimentReport::Fidelity(r) => r.write_csv(dir)?,
        };
        let summary = dir.join("summary.json");
        std::fs::write(&summary, serde_json::to_string_pretty(&self.summary())?)?;
        files.push(summary);
        Ok(files)
    }

    /// Everything except the per-run records.
    pub fn summary(&self) -> serde_json::Value {
        match self {
            ExperimentReport::Privacy(r) => r.summary(),
            ExperimentReport::Convergence(r) => r.summary(),
            ExperimentReport::Fidelity(r) => r.summary(),
        }
    }
}

/// Runs the campaign named by `config.experiment`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    match config.experiment {
        Some(ExperimentKind::Privacy) => {
            run_privacy_experiment(config).map(ExperimentReport::Privacy)
        }
        Some(ExperimentKind::Convergence) => {
            run_convergence_experiment(config).map(ExperimentReport::Convergence)
        }
        Some(ExperimentKind::Fidelity) => {
            run_fidelity_experiment(config).map(ExperimentReport::Fidelity)
        }
        None => Err(Error::Config(
            "config does not name an experiment (privacy, convergence or fidelity)".into(),
        )),
    }
}

/// Runs `f` on a dedicated pool when a thread count is given.
pub(crate) fn with_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

pub(crate) fn read_bids(state: &EstimateState, readout: Readout) -> Vec<f64> {
    match readout {
        Readout::Own => state.own_bids().0,
        Readout::Row(i) => state.row(i).to_vec(),
        Readout::Mean => {
            let n = state.count();
            (0..n)
                .map(|c| (0..n).map(|r| state.row(r)[c]).sum::<f64>() / n as f64)
                .collect()
        }
    }
}

/// Warns when `alpha` exceeds the contraction bound; such runs may diverge
/// and are then recorded as failures.
pub(crate) fn step_size_warning(
    coeffs: &GameCoefficients,
    graph: &CommGraph,
    alpha: f64,
) -> Option<String> {
    match step_size_bound(coeffs, &graph.spectrum()) {
        Ok(bound) if alpha > bound => Some(format!(
            "alpha {alpha} exceeds the step-size bound {bound:.6}; runs may diverge"
        )),
        Ok(_) => None,
        Err(e) => Some(format!("no admissible step size: {e}")),
    }
}

/// Per-coordinate mean and standard error over samples of equal length.
pub(crate) fn mean_and_stderr(samples: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let Some(first) = samples.first() else {
        return (Vec::new(), Vec::new());
    };
    let n = samples.len() as f64;
    let dim = first.len();
    let mean: Vec<f64> = (0..dim)
        .map(|c| samples.iter().map(|s| s[c]).sum::<f64>() / n)
        .collect();
    let se = (0..dim)
        .map(|c| {
            if samples.len() < 2 {
                return f64::NAN;
            }
            let var = samples
                .iter()
                .map(|s| (s[c] - mean[c]) * (s[c] - mean[c]))
                .sum::<f64>()
                / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    (mean, se)
}

pub(crate) fn equilibrium(coeffs: &GameCoefficients) -> Result<Vec<f64>> {
    Ok(nash_equilibrium(coeffs)?.0)
}

/// Compares through JSON so that `nan` fields (single-run cells) compare equal.
pub(crate) fn audit_eq<T: Serialize>(what: &str, stored: &T, fresh: &T) -> Result<()> {
    if serde_json::to_string(stored)? != serde_json::to_string(fresh)? {
        return Err(Error::Audit(format!(
            "{what} does not match its recomputation from the run records"
        )));
    }
    Ok(())
}
