//! Laplace mechanism: sensitivity, calibration, seeded sampling and the
//! analytic density-ratio check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{MarketParams, ProsumerParams};
use crate::seeking::NoiseRealization;

/// Relative slack on the `ε` comparison, absorbing rounding in `A·μ/σ`.
const RATIO_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    /// Adjacency radius on a single demand (kWh).
    pub mu_adj: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, mu_adj: f64) -> Result<Self> {
        let b = PrivacyBudget { epsilon, mu_adj };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.epsilon.is_nan() {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.mu_adj.is_finite() && self.mu_adj > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mu_adj must be positive, got {}",
                self.mu_adj
            )));
        }
        Ok(())
    }
}

/// Laplace scale `σ` (variance `2σ²`) and RNG seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceSpec {
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LaplaceSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be finite and nonnegative, got {sigma}"
            )));
        }
        Ok(LaplaceSpec { sigma, seed })
    }

    pub fn with_seed(self, seed: u64) -> Self {
        LaplaceSpec { seed, ..self }
    }

    /// One draw per prosumer, packaged for the seeking iteration.
    pub fn realization(&self, count: usize) -> NoiseRealization {
        NoiseRealization {
            gamma: sample_laplace(self, count),
            sigma: self.sigma,
        }
    }
}

/// `A = max_i a·c_i·I / (a·c_i·(I−1) + 1)`, the per-coordinate Lipschitz
/// constant of the demand-to-`β` map.
pub fn sensitivity(prosumers: &[ProsumerParams], market: &MarketParams) -> Result<f64> {
    market.validate()?;
    if prosumers.is_empty() {
        return Err(Error::TooFewProsumers(0));
    }
    let mut a = f64::NEG_INFINITY;
    for p in prosumers {
        p.validate()?;
        a = a.max(market.demand_gain(p.c));
    }
    Ok(a)
}

/// Minimal compliant scale `σ = A·μ/ε`.
pub fn calibrate(budget: &PrivacyBudget, sensitivity: f64) -> Result<LaplaceSpec> {
    budget.validate()?;
    LaplaceSpec::new(sensitivity * budget.mu_adj / budget.epsilon, 0)
}

/// `n` i.i.d. Laplace draws by inverse CDF, deterministic in `spec.seed`.
///
/// Draws for different `σ` under one seed are the same standard draws
/// scaled by `σ`.
pub fn sample_laplace(spec: &LaplaceSpec, n: usize) -> Vec<f64> {
    if spec.sigma == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..n)
        .map(|_| {
            let u = loop {
                let u = rng.random::<f64>() - 0.5;
                if u > -0.5 {
                    break u;
                }
            };
            -spec.sigma * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect()
}

pub fn laplace_cdf(x: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return if x < 0.0 { 0.0 } else { 1.0 };
    }
    if x < 0.0 {
        0.5 * (x / sigma).exp()
    } else {
        1.0 - 0.5 * (-x / sigma).exp()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-run seed `splitmix64(splitmix64(splitmix64(root) ^ stream) ^ run)`.
pub fn mix_seed(root: u64, stream: u64, run: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ stream) ^ run)
}

/// Whether `d` and `d_prime` differ in at most one coordinate, by at most `mu_adj`.
pub fn adjacent(d: &[f64], d_prime: &[f64], mu_adj: f64) -> Result<bool> {
    if d.len() != d_prime.len() {
        return Err(Error::DimensionMismatch {
            expected: d.len(),
            actual: d_prime.len(),
        });
    }
    let mut differing = d.iter().zip(d_prime).filter(|(x, y)| x != y);
    Ok(match (differing.next(), differing.next()) {
        (None, _) => true,
        (Some((x, y)), None) => (x - y).abs() <= mu_adj,
        _ => false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioCheck {
    /// `sup_z p(z; β)/p(z; β') = exp(Σ|β_i − β'_i|/σ)`.
    pub ratio: f64,
    pub log_ratio: f64,
    pub passes: bool,
}

/// Analytic supremum of the Laplace density ratio between two coefficient
/// vectors, checked against `exp(ε)`.
pub fn dp_ratio_check(
    beta: &[f64],
    beta_prime: &[f64],
    sigma: f64,
    epsilon: f64,
) -> Result<RatioCheck> {
    if beta.len() != beta_prime.len() {
        return Err(Error::DimensionMismatch {
            expected: beta.len(),
            actual: beta_prime.len(),
        });
    }
    let l1: f64 = beta
        .iter()
        .zip(beta_prime)
        .map(|(a, b)| (a - b).abs())
        .sum();
    let log_ratio = if l1 == 0.0 {
        0.0
    } else if sigma == 0.0 {
        f64::INFINITY
    } else {
        l1 / sigma
    };
    Ok(RatioCheck {
        ratio: log_ratio.exp(),
        log_ratio,
        passes: log_ratio <= epsilon * (1.0 + RATIO_SLACK),
    })
}
