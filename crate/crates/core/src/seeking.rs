//! Distributed equilibrium seeking: the consensus-plus-gradient iteration in
//! exact and noisy (private) mode, its compact iteration matrix, and the
//! step-size and variance bounds that go with it.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{BidProfile, GameCoefficients};
use crate::network::{CommGraph, GraphSpectrum};
use crate::report::fmt_g;

/// Entries larger than this in magnitude abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

pub const DEFAULT_MAX_ITER: usize = 200_000;

/// Log residuals are clamped from below at this value.
pub const LOG_RESIDUAL_FLOOR: f64 = -16.0;

/// Stacked local estimates. Row `i` is prosumer `i`'s estimate of every bid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateState {
    count: usize,
    y: Vec<f64>,
}

impl EstimateState {
    pub fn zeros(count: usize) -> Self {
        EstimateState {
            count,
            y: vec![0.0; count * count],
        }
    }

    /// Every row set to `bids`.
    pub fn consensus(bids: &[f64]) -> Self {
        let count = bids.len();
        let mut y = Vec::with_capacity(count * count);
        for _ in 0..count {
            y.extend_from_slice(bids);
        }
        EstimateState { count, y }
    }

    /// Builds a state from `count²` row-major entries.
    pub fn from_row_major(count: usize, y: Vec<f64>) -> Result<Self> {
        if y.len() != count * count {
            return Err(Error::DimensionMismatch {
                expected: count * count,
                actual: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite estimate entry".into()));
        }
        Ok(EstimateState { count, y })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.y[i * self.count..(i + 1) * self.count]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.y
    }

    /// Each prosumer's estimate of its own bid, `y_ii`.
    pub fn own_bids(&self) -> BidProfile {
        BidProfile(
            (0..self.count)
                .map(|i| self.y[i * self.count + i])
                .collect(),
        )
    }

    pub fn row_bids(&self, i: usize) -> BidProfile {
        BidProfile(self.row(i).to_vec())
    }

    /// Largest entrywise distance from `1 ⊗ bids`.
    pub fn max_deviation(&self, bids: &[f64]) -> f64 {
        self.y
            .chunks(self.count)
            .flat_map(|row| row.iter().zip(bids).map(|(y, b)| (y - b).abs()))
            .fold(0.0, f64::max)
    }

    /// `‖y − 1 ⊗ bids‖²`.
    pub fn squared_deviation(&self, bids: &[f64]) -> f64 {
        self.y
            .chunks(self.count)
            .flat_map(|row| row.iter().zip(bids).map(|(y, b)| (y - b) * (y - b)))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeekConfig {
    pub alpha: f64,
    pub tau: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Stride for storing states; 0 keeps only the initial and final state.
    #[serde(default)]
    pub record_every: usize,
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

impl SeekConfig {
    pub fn new(alpha: f64, tau: f64) -> Self {
        SeekConfig {
            alpha,
            tau,
            max_iter: DEFAULT_MAX_ITER,
            record_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter(
                "max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One Laplace draw per prosumer, fixed for the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRealization {
    pub gamma: Vec<f64>,
    pub sigma: f64,
}

/// Residuals of a single step `y(k) → y(k+1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResidual {
    /// `Σ_i ‖y_i(k+1) − y_i(k)‖`, the stopping criterion.
    pub sum: f64,
    /// `‖y(k+1) − y(k)‖_F`.
    pub fro: f64,
}

/// Synchronous stepper for the seeking iteration.
///
/// `seek` drives it to convergence; callers that need to observe a fixed
/// number of iterations (the attack experiments) step it directly.
#[derive(Debug, Clone)]
pub struct SeekEngine<'g> {
    graph: &'g CommGraph,
    n: usize,
    alpha: f64,
    f: Vec<f64>,
    target: Vec<f64>,
    y: Vec<f64>,
    next: Vec<f64>,
    iteration: usize,
}

impl<'g> SeekEngine<'g> {
    pub fn new(
        coeffs: &GameCoefficients,
        graph: &'g CommGraph,
        alpha: f64,
        noise: Option<&NoiseRealization>,
        y0: Option<&EstimateState>,
    ) -> Result<Self> {
        let n = coeffs.count();
        if graph.count() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: graph.count(),
            });
        }
        let mut target: Vec<f64> = coeffs.beta().iter().copied().collect();
        if let Some(noise) = noise {
            if noise.gamma.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: noise.gamma.len(),
                });
            }
            for (t, g) in target.iter_mut().zip(&noise.gamma) {
                *t += g;
            }
        }
        let y = match y0 {
            Some(s) if s.count != n => {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: s.count,
                })
            }
            Some(s) => s.y.clone(),
            None => vec![0.0; n * n],
        };
        let f = coeffs.f();
        Ok(SeekEngine {
            graph,
            n,
            alpha,
            f: (0..n * n).map(|k| f[(k / n, k % n)]).collect(),
            target,
            next: vec![0.0; n * n],
            y,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.y[i * self.n..(i + 1) * self.n]
    }

    pub fn state(&self) -> EstimateState {
        EstimateState {
            count: self.n,
            y: self.y.clone(),
        }
    }

    /// Advances every row from the same snapshot `y(k)`.
    pub fn step(&mut self) -> Result<StepResidual> {
        let n = self.n;
        let omega = self.graph.omega();
        let mut sum = 0.0;
        let mut fro_sq = 0.0;
        for i in 0..n {
            let yi = &self.y[i * n..(i + 1) * n];
            let fi = &self.f[i * n..(i + 1) * n];
            let gap = fi.iter().zip(yi).map(|(f, y)| f * y).sum::<f64>() - self.target[i];
            let out = &mut self.next[i * n..(i + 1) * n];
            out.copy_from_slice(yi);
            for &j in self.graph.neighbors(i) {
                let yj = &self.y[j * n..(j + 1) * n];
                for c in 0..n {
                    out[c] -= omega * (yi[c] - yj[c]);
                }
            }
            let mut row_sq = 0.0;
            for c in 0..n {
                out[c] -= self.alpha * fi[c] * gap;
                if !(out[c].abs() <= DIVERGENCE_LIMIT) {
                    return Err(Error::Divergence {
                        iteration: self.iteration + 1,
                    });
                }
                let d = out[c] - yi[c];
                row_sq += d * d;
            }
            sum += row_sq.sqrt();
            fro_sq += row_sq;
        }
        std::mem::swap(&mut self.y, &mut self.next);
        self.iteration += 1;
        Ok(StepResidual {
            sum,
            fro: fro_sq.sqrt(),
        })
    }
}

/// Output of a seeking run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `(k, y(k))` at the recorded iterations, always including the last.
    pub states: Vec<(usize, EstimateState)>,
    /// `residuals[k]` is the sum-of-row-norms residual of step `k → k+1`.
    pub residuals: Vec<f64>,
    pub residuals_fro: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub noise: Option<NoiseRealization>,
}

impl Trajectory {
    pub fn final_state(&self) -> &EstimateState {
        &self
            .states
            .last()
            .expect("trajectory holds at least y(0)")
            .1
    }

    pub fn last_residual(&self) -> Option<f64> {
        self.residuals.last().copied()
    }

    /// Writes `iteration, residual_sum, residual_fro, y_00 .. y_(I−1)(I−1)`.
    ///
    /// The residual columns on a row for iteration `k` belong to the step
    /// that produced `y(k)`; they are `nan` for `k = 0`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.final_state().count();
        write!(w, "iteration,residual_sum,residual_fro")?;
        for i in 0..n {
            for j in 0..n {
                write!(w, ",y_{i}_{j}")?;
            }
        }
        writeln!(w)?;
        for (k, state) in &self.states {
            let (rs, rf) = match k.checked_sub(1) {
                Some(p) => (self.residuals[p], self.residuals_fro[p]),
                None => (f64::NAN, f64::NAN),
            };
            write!(w, "{k},{},{}", fmt_g(rs), fmt_g(rf))?;
            for v in state.as_slice() {
                write!(w, ",{}", fmt_g(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Runs the iteration from `y0` (zeros by default) until the residual drops
/// below `tau` or `max_iter` steps have been taken.
///
/// With `noise`, every update uses `β_i + γ_i` in place of `β_i`.
pub fn seek(
    coeffs: &GameCoefficients,
    graph: &CommGraph,
    config: &SeekConfig,
    noise: Option<&NoiseRealization>,
    y0: Option<&EstimateState>,
) -> Result<Trajectory> {
    config.validate()?;
    let mut engine = SeekEngine::new(coeffs, graph, config.alpha, noise, y0)?;
    let mut states = vec![(0, engine.state())];
    let mut residuals = Vec::new();
    let mut residuals_fro = Vec::new();
    let mut converged = false;
    while engine.iteration() < config.max_iter {
        let r = engine.step()?;
        residuals.push(r.sum);
        residuals_fro.push(r.fro);
        let k = engine.iteration();
        if config.record_every > 0 && k % config.record_every == 0 {
            states.push((k, engine.state()));
        }
        if r.sum < config.tau {
            converged = true;
            break;
        }
    }
    let k = engine.iteration();
    if states.last().map(|s| s.0) != Some(k) {
        states.push((k, engine.state()));
    }
    Ok(Trajectory {
        states,
        residuals,
        residuals_fro,
        converged,
        iterations: k,
        noise: noise.cloned(),
    })
}

/// Reads the `(k, y(k))` rows back from a file written by
/// [`Trajectory::write_csv`].
pub fn read_trajectory_csv<R: BufRead>(reader: R) -> Result<Vec<(usize, EstimateState)>> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty trajectory file".into()))??;
    let columns = header.split(',').count();
    if !header.starts_with("iteration,residual_sum,residual_fro") || columns < 3 {
        return Err(Error::Parse(
            "not a trajectory CSV (unexpected header)".into(),
        ));
    }
    let entries = columns - 3;
    let n = (entries as f64).sqrt().round() as usize;
    if n * n != entries || n < 2 {
        return Err(Error::Parse(format!(
            "trajectory CSV has {entries} state columns, not a square of at least 4"
        )));
    }
    let mut states = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(Error::Parse(format!(
                "line {}: expected {columns} fields, got {}",
                line_no + 2,
                fields.len()
            )));
        }
        let bad = |f: &str| Error::Parse(format!("line {}: bad number {f:?}", line_no + 2));
        let k: usize = fields[0].parse().map_err(|_| bad(fields[0]))?;
        let y = fields[3..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(f)))
            .collect::<Result<Vec<_>>>()?;
        states.push((k, EstimateState::from_row_major(n, y)?));
    }
    Ok(states)
}

/// `(k, log₁₀‖y(k+1) − y(k)‖_F)` for every step, clamped at −16.
pub fn residual_log(trajectory: &Trajectory) -> Vec<(usize, f64)> {
    trajectory
        .residuals_fro
        .iter()
        .enumerate()
        .map(|(k, r)| (k, r.log10().max(LOG_RESIDUAL_FLOOR)))
        .collect()
}

/// Largest step size admitted by the contraction condition.
///
/// `min{(2 − λ̄)/(3·f̄²), λ·f²/(2·(f̄⁴ − f⁴))}` with `f̄`, `f` the largest and
/// smallest `‖f_i‖` and `λ̄`, `λ` the extreme nonzero eigenvalues of `W̃`.
pub fn step_size_bound(coeffs: &GameCoefficients, spectrum: &GraphSpectrum) -> Result<f64> {
    let lambda_max = spectrum.lambda_max();
    if lambda_max >= 2.0 {
        return Err(Error::NoAdmissibleStepSize { lambda_max });
    }
    let norms = coeffs.f_norms_sq();
    let f_max_sq = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let f_min_sq = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let first = (2.0 - lambda_max) / (3.0 * f_max_sq);
    let spread = f_max_sq * f_max_sq - f_min_sq * f_min_sq;
    let second = if spread > 0.0 {
        spectrum.lambda_min() * f_min_sq / (2.0 * spread)
    } else {
        f64::INFINITY
    };
    Ok(first.min(second))
}

/// Compact form `y(k+1) = Q·y(k) + α·F·(β + γ)` of the stacked iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMatrix {
    pub q: DMatrix<f64>,
    /// Spectral radius of `Q`.
    pub m: f64,
}

/// `Q = Identity − W̃ ⊗ Identity − α·F·Fᵀ` with `F` the block-diagonal
/// stacking of the `f_i` columns.
pub fn build_iteration_matrix(
    coeffs: &GameCoefficients,
    graph: &CommGraph,
    alpha: f64,
) -> Result<IterationMatrix> {
    let n = coeffs.count();
    if graph.count() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: graph.count(),
        });
    }
    let laplacian = graph.weighted_laplacian();
    let f = coeffs.f();
    let mut q = DMatrix::identity(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            let w = laplacian[(i, j)];
            if w != 0.0 {
                for c in 0..n {
                    q[(i * n + c, j * n + c)] -= w;
                }
            }
        }
        for r in 0..n {
            for c in 0..n {
                q[(i * n + r, i * n + c)] -= alpha * f[(i, r)] * f[(i, c)];
            }
        }
    }
    let m = SymmetricEigen::<f64, nalgebra::Dyn>::new(q.clone())
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, l: &f64| acc.max(l.abs()));
    Ok(IterationMatrix { q, m })
}

fn check_contractive(m: f64) -> Result<()> {
    if !(m < 1.0) {
        return Err(Error::NotContractive(m));
    }
    Ok(())
}

/// Mean-square deviation bound `2α²·I·σ²·max‖f_i‖² / (1 − m²)`.
pub fn variance_bound(coeffs: &GameCoefficients, m: f64, alpha: f64, sigma: f64) -> Result<f64> {
    check_contractive(m)?;
    let f_max_sq = coeffs
        .f_norms_sq()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let n = coeffs.count() as f64;
    Ok(2.0 * alpha * alpha * n * sigma * sigma * f_max_sq / (1.0 - m * m))
}

/// Tighter trace form `2α²·tr(FᵀF)·σ² / (1 − m²)`.
pub fn variance_bound_trace(
    coeffs: &GameCoefficients,
    m: f64,
    alpha: f64,
    sigma: f64,
) -> Result<f64> {
    check_contractive(m)?;
    let trace: f64 = coeffs.f_norms_sq().into_iter().sum();
    Ok(2.0 * alpha * alpha * trace * sigma * sigma / (1.0 - m * m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{nash_equilibrium, Game, ProsumerParams};

    fn table_one() -> (GameCoefficients, CommGraph, Vec<f64>) {
        let coeffs = Game::table_one().coefficients().unwrap();
        let graph = CommGraph::fully_connected(6, 0.1).unwrap();
        let b = nash_equilibrium(&coeffs).unwrap().0;
        (coeffs, graph, b)
    }

    #[test]
    fn exact_mode_reaches_oracle() {
        let (coeffs, graph, b) = table_one();
        let cfg = SeekConfig::new(0.4, 1e-5);
        let t = seek(&coeffs, &graph, &cfg, None, None).unwrap();
        assert!(t.converged);
        assert!(t.last_residual().unwrap() < 1e-5);
        assert!(t.final_state().max_deviation(&b) < 100.0 * 1e-5);
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let (coeffs, graph, b) = table_one();
        let y0 = EstimateState::consensus(&b);
        let mut engine = SeekEngine::new(&coeffs, &graph, 0.4, None, Some(&y0)).unwrap();
        let r = engine.step().unwrap();
        assert!(r.sum < 1e-9, "{}", r.sum);
    }

    #[test]
    fn zero_noise_matches_exact_bitwise() {
        let (coeffs, graph, _) = table_one();
        let mut cfg = SeekConfig::new(0.4, 1e-5);
        cfg.record_every = 50;
        let exact = seek(&coeffs, &graph, &cfg, None, None).unwrap();
        let noise = NoiseRealization {
            gamma: vec![0.0; 6],
            sigma: 0.0,
        };
        let private = seek(&coeffs, &graph, &cfg, Some(&noise), None).unwrap();
        assert_eq!(exact.states, private.states);
        assert_eq!(exact.residuals, private.residuals);
    }

    #[test]
    fn noisy_run_converges_to_perturbed_equilibrium() {
        let (coeffs, graph, _) = table_one();
        let gamma = vec![1.5, -0.7, 3.2, 0.0, -2.1, 0.4];
        let noise = NoiseRealization {
            gamma: gamma.clone(),
            sigma: 1.0,
        };
        let cfg = SeekConfig::new(0.4, 1e-5);
        let t = seek(&coeffs, &graph, &cfg, Some(&noise), None).unwrap();
        assert!(t.converged);
        let shifted: Vec<f64> = coeffs
            .beta()
            .iter()
            .zip(&gamma)
            .map(|(b, g)| b + g)
            .collect();
        let b_tilde = nash_equilibrium(&coeffs.with_beta(&shifted).unwrap()).unwrap();
        assert!(t.final_state().max_deviation(&b_tilde.0) < 100.0 * 1e-5);
    }

    #[test]
    fn divergence_is_reported() {
        let (coeffs, graph, _) = table_one();
        let cfg = SeekConfig::new(5.0, 1e-5);
        let err = seek(&coeffs, &graph, &cfg, None, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn max_iter_caps_the_run() {
        let (coeffs, graph, _) = table_one();
        let mut cfg = SeekConfig::new(0.4, 1e-5);
        cfg.max_iter = 10;
        let t = seek(&coeffs, &graph, &cfg, None, None).unwrap();
        assert!(!t.converged);
        assert_eq!(t.iterations, 10);
        assert_eq!(t.residuals.len(), 10);
        assert_eq!(t.states.last().unwrap().0, 10);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(SeekConfig::new(0.0, 1e-5).validate().is_err());
        assert!(SeekConfig::new(0.1, 0.0).validate().is_err());
        let mut c = SeekConfig::new(0.1, 1e-5);
        c.max_iter = 0;
        assert!(c.validate().is_err());
        let parsed: SeekConfig = serde_json::from_str(r#"{"alpha":0.4,"tau":1e-5}"#).unwrap();
        assert_eq!(parsed.max_iter, DEFAULT_MAX_ITER);
    }

    #[test]
    fn residual_slope_tracks_spectral_radius() {
        let (coeffs, graph, _) = table_one();
        let cfg = SeekConfig::new(0.4, 1e-9);
        let t = seek(&coeffs, &graph, &cfg, None, None).unwrap();
        let m = build_iteration_matrix(&coeffs, &graph, 0.4).unwrap().m;
        let log = residual_log(&t);
        let (k0, k1) = (2000, 4000);
        let slope = (log[k1].1 - log[k0].1) / (k1 - k0) as f64;
        let expected = m.log10();
        assert!(
            (slope - expected).abs() < 0.02 * expected.abs(),
            "slope {slope} vs {expected}"
        );
    }

    #[test]
    fn residual_log_is_clamped() {
        let (coeffs, graph, b) = table_one();
        let mut cfg = SeekConfig::new(0.4, 1e-5);
        cfg.max_iter = 3;
        let t = seek(
            &coeffs,
            &graph,
            &cfg,
            None,
            Some(&EstimateState::consensus(&b)),
        )
        .unwrap();
        assert!(residual_log(&t)
            .iter()
            .all(|(_, l)| *l >= LOG_RESIDUAL_FLOOR));
    }

    #[test]
    fn step_bound_table_one() {
        let (coeffs, graph, _) = table_one();
        let bound = step_size_bound(&coeffs, &graph.spectrum()).unwrap();
        let f_max_sq = coeffs.f_norms_sq().into_iter().fold(0.0, f64::max);
        assert!((bound - 1.4 / (3.0 * f_max_sq)).abs() < 1e-12);
        assert!((bound - 0.412).abs() < 1e-3);
    }

    #[test]
    fn step_bound_homogeneous_and_degenerate() {
        let game = Game::new(vec![ProsumerParams::new(0.02, 10.0).unwrap(); 4], 50.0).unwrap();
        let coeffs = game.coefficients().unwrap();
        let graph = CommGraph::fully_connected(4, 0.2).unwrap();
        let s = graph.spectrum();
        let f_sq = coeffs.f_norms_sq()[0];
        let bound = step_size_bound(&coeffs, &s).unwrap();
        assert!((bound - (2.0 - s.lambda_max()) / (3.0 * f_sq)).abs() < 1e-12);

        let degenerate = GraphSpectrum {
            eigenvalues: vec![0.0, 2.0, 2.0, 2.0],
        };
        assert!(matches!(
            step_size_bound(&coeffs, &degenerate),
            Err(Error::NoAdmissibleStepSize { .. })
        ));
    }

    #[test]
    fn iteration_matrix_identity_when_idle() {
        let (coeffs, _, _) = table_one();
        let graph = CommGraph::fully_connected(6, 0.0).unwrap();
        let q = build_iteration_matrix(&coeffs, &graph, 0.0).unwrap();
        assert_eq!(q.q, DMatrix::identity(36, 36));
        assert!((q.m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iteration_matrix_fixed_point_and_contraction() {
        let (coeffs, graph, b) = table_one();
        let it = build_iteration_matrix(&coeffs, &graph, 0.05).unwrap();
        assert!(it.m < 1.0 && it.m > 0.0);
        assert!((&it.q - it.q.transpose()).amax() < 1e-12);
        let n = 6;
        let stacked = nalgebra::DVector::from_fn(n * n, |k, _| b[k % n]);
        let mut forcing = nalgebra::DVector::zeros(n * n);
        for i in 0..n {
            for c in 0..n {
                forcing[i * n + c] = 0.05 * coeffs.f()[(i, c)] * coeffs.beta()[i];
            }
        }
        let image = &it.q * &stacked + forcing;
        assert!((image - stacked).amax() < 1e-9);
    }

    #[test]
    fn iteration_matrix_matches_engine() {
        let (coeffs, graph, _) = table_one();
        let it = build_iteration_matrix(&coeffs, &graph, 0.3).unwrap();
        let y0: Vec<f64> = (0..36).map(|k| (k as f64 * 0.37).sin() * 10.0).collect();
        let start = EstimateState::from_row_major(6, y0.clone()).unwrap();
        let mut engine = SeekEngine::new(&coeffs, &graph, 0.3, None, Some(&start)).unwrap();
        engine.step().unwrap();
        let mut expected = &it.q * nalgebra::DVector::from_vec(y0);
        for i in 0..6 {
            for c in 0..6 {
                expected[i * 6 + c] += 0.3 * coeffs.f()[(i, c)] * coeffs.beta()[i];
            }
        }
        let got = engine.state();
        for k in 0..36 {
            assert!((got.as_slice()[k] - expected[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn variance_bound_scaling() {
        let (coeffs, graph, _) = table_one();
        let m = build_iteration_matrix(&coeffs, &graph, 0.05).unwrap().m;
        assert_eq!(variance_bound(&coeffs, m, 0.05, 0.0).unwrap(), 0.0);
        let full = variance_bound(&coeffs, m, 0.05, 0.1).unwrap();
        let half = variance_bound(&coeffs, m, 0.025, 0.1).unwrap();
        assert!((half - full / 4.0).abs() < 1e-12 * full);
        assert!(full.is_finite() && full > 0.0);
        assert!(variance_bound_trace(&coeffs, m, 0.05, 0.1).unwrap() <= full);
        assert!(matches!(
            variance_bound(&coeffs, 1.0, 0.05, 0.1),
            Err(Error::NotContractive(_))
        ));
    }

    #[test]
    fn trajectory_csv_layout() {
        let (coeffs, graph, _) = table_one();
        let mut cfg = SeekConfig::new(0.4, 1e-5);
        cfg.max_iter = 4;
        cfg.record_every = 2;
        let t = seek(&coeffs, &graph, &cfg, None, None).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 3 + 36);
        assert!(lines[1].starts_with("0,nan,nan,0,"));
        assert!(lines[3].starts_with("4,"));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let (coeffs, graph, _) = table_one();
        let mut cfg = SeekConfig::new(0.4, 1e-5);
        cfg.max_iter = 30;
        cfg.record_every = 1;
        let t = seek(&coeffs, &graph, &cfg, None, None).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = read_trajectory_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 31);
        for ((k, s), (k2, s2)) in t.states.iter().zip(&back) {
            assert_eq!(k, k2);
            for (a, b) in s.as_slice().iter().zip(s2.as_slice()) {
                assert!((a - b).abs() <= 1e-11 * a.abs().max(1.0));
            }
        }
        assert!(read_trajectory_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
