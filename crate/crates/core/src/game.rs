//! The peer-to-peer trading game.
//!
//! Each prosumer bids the intercept `b_i` of its demand function
//! `q_i = -a·λ + b_i`; the market clears at `Σ q_i = 0`. Substituting the
//! clearing price and the energy balance `p_i + q_i = d_i` into the
//! prosumer's cost turns the generalized game into a plain linear-quadratic
//! Nash game with payoff
//!
//! ```text
//! Γ_i(b) = -½·b_i² + β_i·b_i + Σ_{j≠i} μ_ij·b_i·b_j
//! ```
//!
//! where only `β_i` depends on the private demand `d_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cost coefficient (`$/kWh²`) and demand (`kWh`) of one prosumer.
///
/// `d` is the private quantity the privacy mechanism protects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProsumerParams {
    pub c: f64,
    pub d: f64,
}

impl ProsumerParams {
    pub fn new(c: f64, d: f64) -> Result<Self> {
        let p = ProsumerParams { c, d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "cost coefficient must be positive, got {}",
                self.c
            )));
        }
        if !(self.d.is_finite() && self.d >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "demand must be nonnegative, got {}",
                self.d
            )));
        }
        Ok(())
    }
}

/// Market sensitivity `a` (kWh/$) and number of prosumers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    pub a: f64,
    pub count: usize,
}

impl MarketParams {
    pub fn new(a: f64, count: usize) -> Result<Self> {
        let m = MarketParams { a, count };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::TooFewProsumers(self.count));
        }
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "market sensitivity must be positive, got {}",
                self.a
            )));
        }
        Ok(())
    }

    fn n(&self) -> f64 {
        self.count as f64
    }

    /// `a·c·I / (a·c·(I−1) + 1)`: the factor mapping demand to `β`.
    pub fn demand_gain(&self, c: f64) -> f64 {
        let ac = self.a * c;
        ac * self.n() / (ac * (self.n() - 1.0) + 1.0)
    }

    /// Off-diagonal interaction weight `μ_ij` of a prosumer with cost `c`.
    pub fn interaction(&self, c: f64) -> f64 {
        let n = self.n();
        let ac = self.a * c;
        (2.0 * ac * (n - 1.0) - (n - 2.0)) / (2.0 * (n - 1.0) * (ac * (n - 1.0) + 1.0))
    }
}

/// A full game instance: prosumers plus market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Game {
    pub prosumers: Vec<ProsumerParams>,
    pub market: MarketParams,
}

impl Game {
    pub fn new(prosumers: Vec<ProsumerParams>, a: f64) -> Result<Self> {
        let market = MarketParams::new(a, prosumers.len())?;
        for p in &prosumers {
            p.validate()?;
        }
        Ok(Game { prosumers, market })
    }

    /// The six-prosumer community used throughout the case studies, with `a = 100`.
    pub fn table_one() -> Self {
        Self::table_one_with_sensitivity(100.0)
    }

    pub fn table_one_with_sensitivity(a: f64) -> Self {
        const C: [f64; 6] = [0.015, 0.03, 0.02, 0.015, 0.025, 0.03];
        const D: [f64; 6] = [15.0, 18.0, 25.0, 20.0, 18.0, 20.0];
        let prosumers = C
            .iter()
            .zip(D.iter())
            .map(|(&c, &d)| ProsumerParams { c, d })
            .collect();
        Game {
            prosumers,
            market: MarketParams { a, count: 6 },
        }
    }

    pub fn count(&self) -> usize {
        self.prosumers.len()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.prosumers.iter().map(|p| p.c).collect()
    }

    pub fn demands(&self) -> Vec<f64> {
        self.prosumers.iter().map(|p| p.d).collect()
    }

    pub fn coefficients(&self) -> Result<GameCoefficients> {
        derive_coefficients(&self.prosumers, &self.market)
    }
}

/// Reduced-game coefficients.
///
/// `f` stores the vectors `f_i = e_i − μ_i` as rows, so `f` is exactly
/// `Identity − μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GameCoefficients {
    beta: DVector<f64>,
    mu: DMatrix<f64>,
    f: DMatrix<f64>,
}

impl GameCoefficients {
    /// Assembles coefficients from a `β` vector and a `μ` matrix.
    ///
    /// `μ` must be square with zero diagonal and constant off-diagonal rows.
    pub fn from_parts(beta: Vec<f64>, mu: DMatrix<f64>) -> Result<Self> {
        let n = beta.len();
        if n < 2 {
            return Err(Error::TooFewProsumers(n));
        }
        if mu.nrows() != n || mu.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: mu.nrows().max(mu.ncols()),
            });
        }
        for i in 0..n {
            if mu[(i, i)] != 0.0 {
                return Err(Error::InvalidParameter(format!("mu[{i}][{i}] must be 0")));
            }
            let first = mu[(i, if i == 0 { 1 } else { 0 })];
            if (0..n).any(|j| j != i && mu[(i, j)] != first) {
                return Err(Error::InvalidParameter(format!(
                    "row {i} of mu must be constant off the diagonal"
                )));
            }
        }
        if beta.iter().any(|b| !b.is_finite()) || mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("non-finite coefficient".into()));
        }
        let f = DMatrix::identity(n, n) - &mu;
        Ok(GameCoefficients {
            beta: DVector::from_vec(beta),
            mu,
            f,
        })
    }

    pub fn count(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn mu(&self) -> &DMatrix<f64> {
        &self.mu
    }

    /// Matrix whose row `i` is `f_i`.
    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn f_row(&self, i: usize) -> DVector<f64> {
        self.f.row(i).transpose()
    }

    /// `‖f_i‖²` for every prosumer.
    pub fn f_norms_sq(&self) -> Vec<f64> {
        (0..self.count())
            .map(|i| self.f.row(i).norm_squared())
            .collect()
    }

    /// Same coefficients with `β` replaced, e.g. by `β + γ`.
    pub fn with_beta(&self, beta: &[f64]) -> Result<Self> {
        if beta.len() != self.count() {
            return Err(Error::DimensionMismatch {
                expected: self.count(),
                actual: beta.len(),
            });
        }
        Ok(GameCoefficients {
            beta: DVector::from_column_slice(beta),
            mu: self.mu.clone(),
            f: self.f.clone(),
        })
    }
}

/// Intercept bids, one per prosumer (kWh).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BidProfile(pub Vec<f64>);

impl BidProfile {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Clearing price, traded quantities and self-production.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub lambda: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

fn check_count(prosumers: &[ProsumerParams], market: &MarketParams) -> Result<()> {
    market.validate()?;
    if prosumers.len() != market.count {
        return Err(Error::DimensionMismatch {
            expected: market.count,
            actual: prosumers.len(),
        });
    }
    Ok(())
}

pub fn derive_coefficients(
    prosumers: &[ProsumerParams],
    market: &MarketParams,
) -> Result<GameCoefficients> {
    check_count(prosumers, market)?;
    for p in prosumers {
        p.validate()?;
    }
    let n = market.count;
    let beta: Vec<f64> = prosumers
        .iter()
        .map(|p| market.demand_gain(p.c) * p.d)
        .collect();
    let mu = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            market.interaction(prosumers[i].c)
        }
    });
    GameCoefficients::from_parts(beta, mu)
}

/// Inverse of the demand-to-`β` map for a prosumer with cost `c`.
pub fn beta_to_demand(beta: f64, c: f64, market: &MarketParams) -> f64 {
    let n = market.count as f64;
    let ac = market.a * c;
    beta * (ac * (n - 1.0) + 1.0) / (ac * n)
}

/// Solves the simultaneous first-order conditions `(Identity − μ)·b = β`.
pub fn nash_equilibrium(coeffs: &GameCoefficients) -> Result<BidProfile> {
    let lu = coeffs.f.clone().full_piv_lu();
    let pivots = lu.u().diagonal();
    let scale = pivots.iter().fold(0.0_f64, |m, p| m.max(p.abs()));
    let smallest = pivots.iter().fold(f64::INFINITY, |m, p| m.min(p.abs()));
    if !(scale > 0.0) || smallest <= 1e-12 * scale {
        return Err(Error::SingularSystem(
            "Identity - mu is rank-deficient; the game has no unique equilibrium".into(),
        ));
    }
    let b = lu
        .solve(&coeffs.beta)
        .ok_or_else(|| Error::SingularSystem("Identity - mu is not invertible".into()))?;
    Ok(BidProfile(b.iter().copied().collect()))
}

/// Payoff `Γ_i` of prosumer `i` under `bids`.
pub fn payoff(i: usize, bids: &BidProfile, coeffs: &GameCoefficients) -> f64 {
    let b = bids.as_slice();
    let cross: f64 = (0..b.len())
        .filter(|&j| j != i)
        .map(|j| coeffs.mu[(i, j)] * b[j])
        .sum();
    -0.5 * b[i] * b[i] + coeffs.beta[i] * b[i] + b[i] * cross
}

/// Market clearing for a bid profile.
pub fn recover_dispatch(
    bids: &BidProfile,
    prosumers: &[ProsumerParams],
    market: &MarketParams,
) -> Result<Dispatch> {
    check_count(prosumers, market)?;
    if bids.len() != market.count {
        return Err(Error::DimensionMismatch {
            expected: market.count,
            actual: bids.len(),
        });
    }
    let b = bids.as_slice();
    let lambda = b.iter().sum::<f64>() / (market.count as f64 * market.a);
    let q: Vec<f64> = b.iter().map(|bi| -market.a * lambda + bi).collect();
    let p = prosumers.iter().zip(&q).map(|(pr, qi)| pr.d - qi).collect();
    Ok(Dispatch { lambda, q, p })
}

/// Total self-production cost `Σ c_i·p_i²`.
pub fn total_cost(dispatch: &Dispatch, prosumers: &[ProsumerParams]) -> f64 {
    prosumers
        .iter()
        .zip(&dispatch.p)
        .map(|(pr, p)| pr.c * p * p)
        .sum()
}

/// Cost-minimizing dispatch under aggregate balance `Σ p_i = Σ d_i`.
///
/// Production is split in proportion to `1/c_i`, which equalizes the
/// marginal costs `2·c_i·p_i`; `lambda` carries that common marginal cost.
pub fn social_optimum(prosumers: &[ProsumerParams], market: &MarketParams) -> Result<Dispatch> {
    check_count(prosumers, market)?;
    for p in prosumers {
        p.validate()?;
    }
    let total_demand: f64 = prosumers.iter().map(|p| p.d).sum();
    let inv_sum: f64 = prosumers.iter().map(|p| 1.0 / p.c).sum();
    let p: Vec<f64> = prosumers
        .iter()
        .map(|pr| total_demand * (1.0 / pr.c) / inv_sum)
        .collect();
    let q = prosumers.iter().zip(&p).map(|(pr, pi)| pr.d - pi).collect();
    let lambda = 2.0 * prosumers[0].c * p[0];
    Ok(Dispatch { lambda, q, p })
}
