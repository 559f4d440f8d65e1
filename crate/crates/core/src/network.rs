//! Prosumer communication topology and the spectrum of its weighted Laplacian.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues below this magnitude count as zero.
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-10;

/// Undirected, connected communication graph with consensus weight `omega`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct CommGraph {
    count: usize,
    omega: f64,
    neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphRepr {
    count: usize,
    omega: f64,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<GraphRepr> for CommGraph {
    type Error = Error;

    fn try_from(r: GraphRepr) -> Result<Self> {
        let edges: Vec<(usize, usize)> = r.edges.iter().map(|e| (e[0], e[1])).collect();
        CommGraph::from_edges(r.count, &edges, r.omega)
    }
}

impl From<CommGraph> for GraphRepr {
    fn from(g: CommGraph) -> Self {
        GraphRepr {
            count: g.count,
            omega: g.omega,
            edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }
}

impl CommGraph {
    /// Complete graph on `count` nodes.
    pub fn fully_connected(count: usize, omega: f64) -> Result<Self> {
        if count < 2 {
            return Err(Error::TooFewProsumers(count));
        }
        let neighbors = (0..count)
            .map(|i| (0..count).filter(|&j| j != i).collect())
            .collect();
        Self::validated(count, omega, neighbors)
    }

    /// Graph from an undirected edge list. Duplicate edges are merged.
    pub fn from_edges(count: usize, edges: &[(usize, usize)], omega: f64) -> Result<Self> {
        if count < 2 {
            return Err(Error::TooFewProsumers(count));
        }
        let mut adjacency = vec![vec![false; count]; count];
        for &(i, j) in edges {
            for index in [i, j] {
                if index >= count {
                    return Err(Error::NodeOutOfRange { index, count });
                }
            }
            if i == j {
                return Err(Error::SelfLoop(i));
            }
            adjacency[i][j] = true;
            adjacency[j][i] = true;
        }
        let neighbors = adjacency
            .iter()
            .map(|row| (0..count).filter(|&j| row[j]).collect())
            .collect();
        Self::validated(count, omega, neighbors)
    }

    fn validated(count: usize, omega: f64, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let graph = CommGraph {
            count,
            omega,
            neighbors,
        };
        if !graph.is_connected() {
            return Err(Error::Disconnected);
        }
        let bound = graph.weight_bound();
        if !(omega.is_finite() && omega >= 0.0) || omega > bound * (1.0 + 1e-12) {
            return Err(Error::WeightBound { omega, bound });
        }
        Ok(graph)
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.count];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Largest admissible consensus weight, `1/(1 + max degree)`.
    pub fn weight_bound(&self) -> f64 {
        1.0 / (1.0 + self.max_degree() as f64)
    }

    pub fn is_fully_connected(&self) -> bool {
        self.neighbors.iter().all(|n| n.len() == self.count - 1)
    }

    /// Edge list with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, ns) in self.neighbors.iter().enumerate() {
            out.extend(ns.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.count, self.count);
        for (i, ns) in self.neighbors.iter().enumerate() {
            for &j in ns {
                w[(i, j)] = 1.0;
            }
        }
        w
    }

    /// `W̃ = ω·(diag(degrees) − adjacency)`.
    pub fn weighted_laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.adjacency();
        for i in 0..self.count {
            l[(i, i)] = self.degree(i) as f64;
        }
        l * self.omega
    }

    pub fn spectrum(&self) -> GraphSpectrum {
        let eig = SymmetricEigen::new(self.weighted_laplacian());
        let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        GraphSpectrum { eigenvalues }
    }
}

/// Eigenvalues of `W̃`, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpectrum {
    pub eigenvalues: Vec<f64>,
}

impl GraphSpectrum {
    /// `max(λ_2..λ_I)`.
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[1..]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `min(λ_2..λ_I)`, the algebraic connectivity scaled by ω.
    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[1..]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn zero_count(&self) -> usize {
        self.eigenvalues
            .iter()
            .filter(|l| l.abs() < ZERO_EIGENVALUE_TOL)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_connected_weight_bound() {
        assert!(CommGraph::fully_connected(6, 0.1).is_ok());
        assert!(matches!(
            CommGraph::fully_connected(6, 0.2),
            Err(Error::WeightBound { .. })
        ));
        assert!(CommGraph::fully_connected(2, 0.5).is_ok());
        assert!(CommGraph::fully_connected(2, -0.1).is_err());
        let g = CommGraph::fully_connected(6, 0.1).unwrap();
        assert!((g.weight_bound() - 1.0 / 6.0).abs() < 1e-15);
        assert!(g.is_fully_connected());
    }

    #[test]
    fn edge_lists() {
        let ring = CommGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)], 0.2).unwrap();
        assert!((0..4).all(|i| ring.degree(i) == 2));

        let star = CommGraph::from_edges(4, &[(0, 1), (0, 2), (0, 3)], 0.2).unwrap();
        assert_eq!(star.max_degree(), 3);
        assert!((star.weight_bound() - 0.25).abs() < 1e-15);

        assert!(matches!(
            CommGraph::from_edges(4, &[(0, 1), (2, 3)], 0.1),
            Err(Error::Disconnected)
        ));
        assert!(matches!(
            CommGraph::from_edges(3, &[(0, 1), (1, 1), (1, 2)], 0.1),
            Err(Error::SelfLoop(1))
        ));
        assert!(matches!(
            CommGraph::from_edges(3, &[(0, 1), (1, 5)], 0.1),
            Err(Error::NodeOutOfRange { index: 5, .. })
        ));
    }

    #[test]
    fn complete_graph_spectrum() {
        // Complete-graph Laplacian has spectrum {0, I (×(I−1))}.
        let s = CommGraph::fully_connected(6, 0.1).unwrap().spectrum();
        assert!(s.eigenvalues[0].abs() < 1e-10);
        for l in &s.eigenvalues[1..] {
            assert!((l - 0.6).abs() < 1e-12);
        }
        assert!((s.lambda_max() - 0.6).abs() < 1e-12);
        assert!((s.lambda_min() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn path_graph_spectrum() {
        // Path on 3 nodes: Laplacian spectrum {0, 1, 3}.
        let s = CommGraph::from_edges(3, &[(0, 1), (1, 2)], 0.25)
            .unwrap()
            .spectrum();
        let expected = [0.0, 0.25, 0.75];
        for (l, e) in s.eigenvalues.iter().zip(expected) {
            assert!((l - e).abs() < 1e-12, "{l} vs {e}");
        }
        assert_eq!(s.zero_count(), 1);
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let g = CommGraph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (1, 3)], 0.2).unwrap();
        let l = g.weighted_laplacian();
        for i in 0..5 {
            assert!(l.row(i).sum().abs() < 1e-12);
        }
        assert_eq!(l, l.transpose());
        let s = g.spectrum();
        assert!(s.eigenvalues[0].abs() < 1e-10);
        assert!(s.eigenvalues[1] > 1e-10);
    }

    #[test]
    fn serde_round_trip_validates() {
        let g = CommGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3)], 0.3).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let back: CommGraph = serde_json::from_str(&json).unwrap();
        assert_eq!(g, back);
        let bad = r#"{"count":4,"omega":0.1,"edges":[[0,1],[2,3]]}"#;
        assert!(serde_json::from_str::<CommGraph>(bad).is_err());
    }
}
