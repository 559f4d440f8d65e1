//! Inference attack on a victim's private demand from an observed window of
//! its coordination variable.
//!
//! The adversary knows every public quantity (market sensitivity, all cost
//! coefficients, ω, α, the graph) and the coefficients `β_j` of every other
//! prosumer. It fits the unknowns `β̂_i` and the unseen states `z_j(k1)`,
//! `j ≠ i`, so that the simulated dynamics reproduce the observed
//! `ȳ_i(k1+1..k2)` in least squares, with `z_i(k1) = ȳ_i(k1)`. The dynamics
//! are linear in the unknowns, so the fit is a single linear least-squares
//! problem whose design matrix depends only on the public parameters and the
//! window length.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{beta_to_demand, GameCoefficients, MarketParams};
use crate::network::CommGraph;
use crate::seeking::{EstimateState, SeekEngine};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOL: f64 = 1e-8;

/// Design matrices above this condition number carry a warning.
pub const CONDITION_WARNING: f64 = 1e12;

/// `β̂_i` counts as identifiable when `e_0` lies this close to the row space.
const IDENTIFIABILITY_TOL: f64 = 1e-8;

/// What the adversary sees and knows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackObservation {
    pub victim: usize,
    /// First observed iteration.
    pub k1: usize,
    /// Last observed iteration, inclusive.
    pub k2: usize,
    /// `ȳ_i(k)` for `k = k1..=k2`.
    pub observed: Vec<Vec<f64>>,
    /// `β_j` for every `j ≠ victim`; the victim entry is ignored.
    pub known_beta: Vec<Option<f64>>,
    /// Public cost coefficients of all prosumers.
    pub costs: Vec<f64>,
    pub market: MarketParams,
    pub graph: CommGraph,
    pub alpha: f64,
}

impl AttackObservation {
    pub fn count(&self) -> usize {
        self.costs.len()
    }

    pub fn window_len(&self) -> usize {
        self.observed.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        self.market.validate()?;
        if self.market.count != n {
            return Err(Error::DimensionMismatch {
                expected: self.market.count,
                actual: n,
            });
        }
        if self.graph.count() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: self.graph.count(),
            });
        }
        if self.victim >= n {
            return Err(Error::NodeOutOfRange {
                index: self.victim,
                count: n,
            });
        }
        if self.k2 < self.k1 || self.observed.len() != self.k2 - self.k1 + 1 {
            return Err(Error::InvalidParameter(format!(
                "window {}..={} does not match {} observed vectors",
                self.k1,
                self.k2,
                self.observed.len()
            )));
        }
        if self.observed.len() < 2 {
            return Err(Error::WindowTooShort(self.observed.len()));
        }
        if let Some(bad) = self.observed.iter().find(|y| y.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: bad.len(),
            });
        }
        if self.known_beta.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: self.known_beta.len(),
            });
        }
        if let Some(j) = (0..n).find(|&j| j != self.victim && self.known_beta[j].is_none()) {
            return Err(Error::InvalidParameter(format!(
                "beta of prosumer {j} must be known to the adversary"
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Adversary's view of the game, with `β_victim` set to 0.
    pub fn known_coefficients(&self) -> Result<GameCoefficients> {
        let n = self.count();
        let beta = (0..n)
            .map(|j| {
                if j == self.victim {
                    0.0
                } else {
                    self.known_beta[j].unwrap_or(0.0)
                }
            })
            .collect();
        let mu = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                self.market.interaction(self.costs[i])
            }
        });
        GameCoefficients::from_parts(beta, mu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub beta_hat: f64,
    pub d_hat: f64,
    /// Least-squares objective `Σ_k ‖z_i(k) − ȳ_i(k)‖²` at the solution.
    pub residual: f64,
    /// `β̂_i` is uniquely determined by the window.
    pub determined: bool,
    /// The design has full column rank (rarely true: states of the other
    /// prosumers along directions the victim never feels are unobservable).
    pub full_rank: bool,
    pub rank: usize,
    pub unknowns: usize,
    pub condition: f64,
    pub warning: Option<String>,
}

/// Least-squares solver for one victim, window length and set of public
/// parameters. Reusable across observations that share them.
#[derive(Debug, Clone)]
pub struct AttackModel {
    victim: usize,
    window_len: usize,
    n: usize,
    c_victim: f64,
    market: MarketParams,
    /// Response of `z_i(k1+1..k2)` to `ȳ_i(k1)`.
    anchor: DMatrix<f64>,
    /// Response of `z_i(k1+1..k2)` to the known `β_j`.
    forced: DVector<f64>,
    /// Orthonormal basis of the design's column space.
    range: DMatrix<f64>,
    /// First row of the pseudo-inverse: `β̂_i = pinv_row · target`.
    pinv_row: DVector<f64>,
    rank: usize,
    unknowns: usize,
    condition: f64,
    identifiable: bool,
}

impl AttackModel {
    /// `coeffs` carries the adversary's `β` (the victim entry is ignored) and
    /// the public `μ`.
    pub fn new(
        victim: usize,
        window_len: usize,
        coeffs: &GameCoefficients,
        costs: &[f64],
        market: &MarketParams,
        graph: &CommGraph,
        alpha: f64,
    ) -> Result<Self> {
        let n = coeffs.count();
        if victim >= n {
            return Err(Error::NodeOutOfRange {
                index: victim,
                count: n,
            });
        }
        if window_len < 2 {
            return Err(Error::WindowTooShort(window_len));
        }
        if costs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: costs.len(),
            });
        }
        let steps = window_len - 1;
        let rows = steps * n;
        let unknowns = 1 + (n - 1) * n;

        let respond = |beta: &[f64], y0: &EstimateState| -> Result<Vec<f64>> {
            let c = coeffs.with_beta(beta)?;
            let mut engine = SeekEngine::new(&c, graph, alpha, None, Some(y0))?;
            let mut out = Vec::with_capacity(rows);
            for _ in 0..steps {
                engine.step()?;
                out.extend_from_slice(engine.row(victim));
            }
            Ok(out)
        };
        let unit_state = |row: usize, col: usize| {
            let mut y = vec![0.0; n * n];
            y[row * n + col] = 1.0;
            EstimateState::from_row_major(n, y).expect("finite entries")
        };
        let zeros = EstimateState::zeros(n);
        let no_beta = vec![0.0; n];

        let mut design = DMatrix::zeros(rows, unknowns);
        let mut unit_beta = no_beta.clone();
        unit_beta[victim] = 1.0;
        design.set_column(0, &DVector::from_vec(respond(&unit_beta, &zeros)?));
        let mut col = 1;
        for j in (0..n).filter(|&j| j != victim) {
            for c in 0..n {
                let r = respond(&no_beta, &unit_state(j, c))?;
                design.set_column(col, &DVector::from_vec(r));
                col += 1;
            }
        }

        let mut anchor = DMatrix::zeros(rows, n);
        for c in 0..n {
            let r = respond(&no_beta, &unit_state(victim, c))?;
            anchor.set_column(c, &DVector::from_vec(r));
        }
        let mut known = coeffs.beta().iter().copied().collect::<Vec<_>>();
        known[victim] = 0.0;
        let forced = DVector::from_vec(respond(&known, &zeros)?);

        // nalgebra's SVD loses accuracy on these heavily rank-deficient
        // designs, so the factorization goes through faer.
        let svd = faer::Mat::from_fn(rows, unknowns, |r, c| design[(r, c)])
            .thin_svd()
            .map_err(|e| Error::SingularSystem(format!("attack design SVD failed: {e:?}")))?;
        let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());
        let s_max = (0..s.nrows()).map(|k| s[k]).fold(0.0, f64::max);
        let s_min = if rows < unknowns {
            0.0
        } else {
            (0..s.nrows()).map(|k| s[k]).fold(f64::INFINITY, f64::min)
        };
        let keep: Vec<usize> = (0..s.nrows())
            .filter(|&k| s[k] > RANK_TOL * s_max)
            .collect();
        let rank = keep.len();
        let condition = if s_min > 0.0 {
            s_max / s_min
        } else {
            f64::INFINITY
        };

        let mut range = DMatrix::zeros(rows, rank);
        let mut pinv_row = DVector::zeros(rows);
        // Part of e_0 outside the design's row space.
        let mut off_row_space = DVector::zeros(unknowns);
        off_row_space[0] = 1.0;
        for (slot, &k) in keep.iter().enumerate() {
            let uk = DVector::from_fn(rows, |r, _| u[(r, k)]);
            pinv_row.axpy(v[(0, k)] / s[k], &uk, 1.0);
            range.set_column(slot, &uk);
            for c in 0..unknowns {
                off_row_space[c] -= v[(0, k)] * v[(c, k)];
            }
        }

        Ok(AttackModel {
            victim,
            window_len,
            n,
            c_victim: costs[victim],
            market: *market,
            anchor,
            forced,
            range,
            pinv_row,
            rank,
            unknowns,
            condition,
            identifiable: off_row_space.norm() < IDENTIFIABILITY_TOL,
        })
    }

    pub fn for_observation(obs: &AttackObservation) -> Result<Self> {
        obs.validate()?;
        AttackModel::new(
            obs.victim,
            obs.window_len(),
            &obs.known_coefficients()?,
            &obs.costs,
            &obs.market,
            &obs.graph,
            obs.alpha,
        )
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn unknowns(&self) -> usize {
        self.unknowns
    }

    pub fn identifiable(&self) -> bool {
        self.identifiable
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Fits one observed window `ȳ_i(k1..=k2)`.
    pub fn infer<R: AsRef<[f64]>>(&self, observed: &[R]) -> Result<InferenceResult> {
        if observed.len() != self.window_len {
            return Err(Error::DimensionMismatch {
                expected: self.window_len,
                actual: observed.len(),
            });
        }
        let n = self.n;
        if let Some(bad) = observed.iter().find(|y| y.as_ref().len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: bad.as_ref().len(),
            });
        }
        let start = DVector::from_column_slice(observed[0].as_ref());
        let mut target = DVector::zeros((self.window_len - 1) * n);
        for (k, y) in observed[1..].iter().enumerate() {
            target.rows_mut(k * n, n).copy_from_slice(y.as_ref());
        }
        target -= &self.anchor * start + &self.forced;

        let beta_hat = self.pinv_row.dot(&target);
        let fitted = &self.range * (self.range.transpose() * &target);
        let residual = (target - fitted).norm_squared();

        let full_rank = self.rank == self.unknowns;
        let warning = (self.condition > CONDITION_WARNING).then(|| {
            format!(
                "design condition number {:.3e} (rank {} of {} unknowns); minimum-norm solution{}",
                self.condition,
                self.rank,
                self.unknowns,
                if self.identifiable {
                    ""
                } else {
                    ", victim coefficient not identifiable from this window"
                }
            )
        });
        Ok(InferenceResult {
            beta_hat,
            d_hat: beta_to_demand(beta_hat, self.c_victim, &self.market),
            residual,
            determined: self.identifiable,
            full_rank,
            rank: self.rank,
            unknowns: self.unknowns,
            condition: self.condition,
            warning,
        })
    }

    pub fn victim(&self) -> usize {
        self.victim
    }
}

/// Builds the solver for `obs` and fits its window.
pub fn infer(obs: &AttackObservation) -> Result<InferenceResult> {
    AttackModel::for_observation(obs)?.infer(&obs.observed)
}

/// Quality of a batch of inferred demands against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStats {
    pub mse: f64,
    /// Fraction within ±10% of the true demand.
    pub hit_rate: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

pub fn attack_statistics(samples: &[f64], true_d: f64) -> Result<AttackStats> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no attack samples".into()));
    }
    let n = samples.len() as f64;
    let mse = samples
        .iter()
        .map(|d| (d - true_d) * (d - true_d))
        .sum::<f64>()
        / n;
    let hits = samples
        .iter()
        .filter(|d| (*d - true_d).abs() <= 0.1 * true_d.abs())
        .count();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    Ok(AttackStats {
        mse,
        hit_rate: hits as f64 / n,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        mean: samples.iter().sum::<f64>() / n,
        median,
        count: samples.len(),
    })
}
