use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Game, MarketParams, ProsumerParams};
use crate::network::CommGraph;
use crate::privacy::{calibrate, sensitivity, PrivacyBudget};
use crate::seeking::SeekConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Privacy,
    Convergence,
    Fidelity,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Privacy => "privacy",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Fidelity => "fidelity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSpec {
    pub market_sensitivity: f64,
    pub prosumers: Vec<ProsumerParams>,
}

impl GameSpec {
    pub fn build(&self) -> Result<Game> {
        Game::new(self.prosumers.clone(), self.market_sensitivity)
    }

    pub fn with_sensitivity(&self, a: f64) -> Result<Game> {
        Game::new(self.prosumers.clone(), a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    FullyConnected,
    Edges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub topology: Topology,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
    pub omega: f64,
}

impl Default for GraphSpec {
    fn default() -> Self {
        GraphSpec {
            topology: Topology::FullyConnected,
            edges: None,
            omega: 0.1,
        }
    }
}

impl GraphSpec {
    pub fn build(&self, count: usize) -> Result<CommGraph> {
        match (self.topology, &self.edges) {
            (Topology::FullyConnected, None) => CommGraph::fully_connected(count, self.omega),
            (Topology::FullyConnected, Some(_)) => Err(Error::Config(
                "graph.edges is only allowed with topology \"edges\"".into(),
            )),
            (Topology::Edges, Some(edges)) => {
                let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (e[0], e[1])).collect();
                CommGraph::from_edges(count, &pairs, self.omega)
            }
            (Topology::Edges, None) => Err(Error::Config(
                "topology \"edges\" requires graph.edges".into(),
            )),
        }
    }
}

/// Noise levels, either as Laplace scales or as privacy budgets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_adj: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default)]
    pub victim: usize,
    /// Numbers of consecutive observed iterations.
    pub budgets: Vec<usize>,
    /// First observed iteration.
    pub start: usize,
}

/// Which estimate row supplies the bids that get dispatched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Each prosumer's estimate of its own bid, `y_ii`.
    #[default]
    Own,
    /// One prosumer's full estimate vector.
    Row(usize),
    /// Average of all rows.
    Mean,
}

/// Reference cost the noisy runs are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Cost at the exact equilibrium from the direct solve.
    #[default]
    Oracle,
    /// Cost of a noiseless run with the same seeking settings and readout.
    Noiseless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelitySpec {
    pub market_sensitivities: Vec<f64>,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default)]
    pub readout: Readout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSpec {
    /// Every n-th log residual goes to the trajectory CSV; 0 disables it.
    #[serde(default = "default_residual_stride")]
    pub residual_stride: usize,
    #[serde(default = "default_convergence_readout")]
    pub readout: Readout,
}

impl Default for ConvergenceSpec {
    fn default() -> Self {
        ConvergenceSpec {
            residual_stride: default_residual_stride(),
            readout: default_convergence_readout(),
        }
    }
}

fn default_residual_stride() -> usize {
    100
}

fn default_convergence_readout() -> Readout {
    Readout::Mean
}

fn default_runs() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentKind>,
    pub game: GameSpec,
    #[serde(default)]
    pub graph: GraphSpec,
    pub seek: SeekConfig,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceSpec>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

/// Noise levels after resolving budgets into scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub sigma: Vec<f64>,
    /// Budget that produced each scale, when scales were calibrated.
    pub epsilon: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn game(&self) -> Result<Game> {
        self.game.build()
    }

    pub fn market(&self) -> MarketParams {
        MarketParams {
            a: self.game.market_sensitivity,
            count: self.game.prosumers.len(),
        }
    }

    pub fn graph(&self) -> Result<CommGraph> {
        self.graph.build(self.game.prosumers.len())
    }

    /// Scales to run. `sigma` wins over `epsilon` when both are present.
    pub fn noise_levels(&self) -> Result<NoiseLevels> {
        let mut warnings = Vec::new();
        match (&self.noise.sigma, &self.noise.epsilon) {
            (Some(sigma), eps) => {
                if eps.is_some() {
                    warnings
                        .push("noise.sigma and noise.epsilon both given; using sigma".to_string());
                }
                if let Some(bad) = sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
                    return Err(Error::Config(format!(
                        "noise.sigma values must be finite and >= 0, got {bad}"
                    )));
                }
                Ok(NoiseLevels {
                    sigma: sigma.clone(),
                    epsilon: None,
                    warnings,
                })
            }
            (None, Some(eps)) => {
                let mu = self
                    .noise
                    .mu_adj
                    .ok_or_else(|| Error::Config("noise.epsilon requires noise.mu_adj".into()))?;
                let game = self.game()?;
                let a = sensitivity(&game.prosumers, &game.market)?;
                let sigma = eps
                    .iter()
                    .map(|&e| Ok(calibrate(&PrivacyBudget::new(e, mu)?, a)?.sigma))
                    .collect::<Result<Vec<_>>>()?;
                Ok(NoiseLevels {
                    sigma,
                    epsilon: Some(eps.clone()),
                    warnings,
                })
            }
            (None, None) => Err(Error::Config(
                "noise section needs sigma or epsilon values".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let game = self.game()?;
        self.graph()?;
        self.seek.validate()?;
        let n = game.count();
        let check_row = |r: Readout| match r {
            Readout::Row(i) if i >= n => Err(Error::Config(format!(
                "readout row {i} out of range for {n} prosumers"
            ))),
            _ => Ok(()),
        };
        if let Some(attack) = &self.attack {
            if attack.victim >= n {
                return Err(Error::Config(format!(
                    "attack.victim {} out of range for {n} prosumers",
                    attack.victim
                )));
            }
            if attack.budgets.is_empty() {
                return Err(Error::Config("attack.budgets is empty".into()));
            }
            if let Some(b) = attack.budgets.iter().find(|&&b| b < 2) {
                return Err(Error::Config(format!(
                    "attack budget {b} too small; need at least 2 observed iterations"
                )));
            }
        }
        if let Some(f) = &self.fidelity {
            if f.market_sensitivities.is_empty() {
                return Err(Error::Config(
                    "fidelity.market_sensitivities is empty".into(),
                ));
            }
            for &a in &f.market_sensitivities {
                self.game.with_sensitivity(a)?;
            }
            check_row(f.readout)?;
        }
        if let Some(c) = &self.convergence {
            check_row(c.readout)?;
        }
        self.noise_levels()?;
        match self.experiment {
            Some(ExperimentKind::Privacy) if self.attack.is_none() => Err(Error::Config(
                "privacy experiment needs an attack section".into(),
            )),
            Some(ExperimentKind::Fidelity) if self.fidelity.is_none() => Err(Error::Config(
                "fidelity experiment needs a fidelity section".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> &'static str {
        r#"{
            "experiment": "privacy",
            "game": {"market_sensitivity": 100, "prosumers": [
                {"c": 0.015, "d": 15}, {"c": 0.03, "d": 18}, {"c": 0.02, "d": 25},
                {"c": 0.015, "d": 20}, {"c": 0.025, "d": 20}, {"c": 0.03, "d": 20}]},
            "graph": {"topology": "fully_connected", "omega": 0.1},
            "seek": {"alpha": 0.4, "tau": 1e-5},
            "noise": {"sigma": [1, 2]},
            "attack": {"victim": 0, "budgets": [4], "start": 100},
            "runs": 10,
            "seed": 7
        }"#
    }

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_json(base()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.noise_levels().unwrap().sigma, vec![1.0, 2.0]);
        assert_eq!(cfg.seek.max_iter, 200_000);
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn sigma_wins_over_epsilon() {
        let mut cfg = ExperimentConfig::from_json(base()).unwrap();
        cfg.noise.epsilon = Some(vec![1.0]);
        cfg.noise.mu_adj = Some(1.0);
        let levels = cfg.noise_levels().unwrap();
        assert_eq!(levels.sigma, vec![1.0, 2.0]);
        assert_eq!(levels.warnings.len(), 1);

        cfg.noise.sigma = None;
        let levels = cfg.noise_levels().unwrap();
        assert!((levels.sigma[0] - 1.125).abs() < 1e-12);
        assert!(levels.warnings.is_empty());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ExperimentConfig::from_json(base()).unwrap();
        cfg.runs = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::from_json(base()).unwrap();
        cfg.attack.as_mut().unwrap().victim = 6;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::from_json(base()).unwrap();
        cfg.noise.sigma = Some(vec![-1.0]);
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::from_json(base()).unwrap();
        cfg.graph.omega = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::WeightBound { .. })));

        let mut cfg = ExperimentConfig::from_json(base()).unwrap();
        cfg.attack = None;
        assert!(cfg.validate().is_err());

        assert!(ExperimentConfig::from_json(&base().replace("\"runs\"", "\"rnus\"")).is_err());
    }

    #[test]
    fn edge_topology() {
        let spec: GraphSpec =
            serde_json::from_str(r#"{"topology":"edges","edges":[[0,1],[1,2]],"omega":0.2}"#)
                .unwrap();
        assert_eq!(spec.build(3).unwrap().max_degree(), 2);
        let spec: GraphSpec = serde_json::from_str(r#"{"topology":"edges","omega":0.2}"#).unwrap();
        assert!(spec.build(3).is_err());
    }

    #[test]
    fn readout_forms() {
        assert_eq!(
            serde_json::from_str::<Readout>(r#""own""#).unwrap(),
            Readout::Own
        );
        assert_eq!(
            serde_json::from_str::<Readout>(r#"{"row":2}"#).unwrap(),
            Readout::Row(2)
        );
        assert_eq!(
            serde_json::from_str::<Readout>(r#""mean""#).unwrap(),
            Readout::Mean
        );
        assert_eq!(
            serde_json::from_str::<Baseline>(r#""noiseless""#).unwrap(),
            Baseline::Noiseless
        );
    }
}
