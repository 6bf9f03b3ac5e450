//! Linear combinatorial optimization layers `y*(θ) = argmin_{y∈Y} θᵀy`.
//!
//! Two feasible sets are supported: monotone paths on a grid (minimised) and
//! the multi-dimensional 0/1 knapsack (maximised). Everything downstream works
//! in minimisation form; [`OptLayer::solve_min`] negates rewards for maximising
//! layers so the same formulas apply to both.

mod grid;
mod knapsack;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use grid::GridGraph;
pub use knapsack::{KnapsackGen, KnapsackInstance};

use crate::error::{check_dim, Error, Result};

/// Largest grid side accepted by [`enumerate_solutions`].
pub const MAX_ENUM_GRID: usize = 6;
/// Largest item count accepted by [`enumerate_solutions`].
pub const MAX_ENUM_ITEMS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub y: Vec<u8>,
    /// `θᵀy` under the vector the solver was called with.
    pub objective: f64,
}

impl Solution {
    pub fn new(y: Vec<u8>, theta: &[f64]) -> Self {
        let objective = dot01(theta, &y);
        Self { y, objective }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.y.iter().map(|&b| f64::from(b)).collect()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        dot01(theta, &self.y)
    }
}

/// `θᵀy` for a 0/1 vector, summed in index order.
pub fn dot01(theta: &[f64], y: &[u8]) -> f64 {
    theta
        .iter()
        .zip(y)
        .filter(|(_, &b)| b == 1)
        .map(|(t, _)| *t)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    /// Multiplier taking native-sense vectors to minimisation costs.
    pub fn sign(self) -> f64 {
        match self {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptLayer {
    Grid(GridGraph),
    Knapsack(KnapsackInstance),
}

impl OptLayer {
    /// Number of decision variables `n_y`.
    pub fn dim(&self) -> usize {
        match self {
            OptLayer::Grid(g) => g.num_edges(),
            OptLayer::Knapsack(k) => k.items(),
        }
    }

    pub fn sense(&self) -> Sense {
        match self {
            OptLayer::Grid(_) => Sense::Minimize,
            OptLayer::Knapsack(_) => Sense::Maximize,
        }
    }

    /// Solves in the layer's native sense; `objective` is `θᵀy`.
    pub fn solve(&self, theta: &[f64]) -> Result<Solution> {
        match self {
            OptLayer::Grid(g) => g.shortest_path(theta),
            OptLayer::Knapsack(k) => k.knapsack_max(theta),
        }
    }

    /// Converts native-sense predictions to minimisation costs.
    pub fn to_min_costs(&self, theta: &[f64]) -> Vec<f64> {
        let s = self.sense().sign();
        theta.iter().map(|t| s * t).collect()
    }

    /// `argmin_y costsᵀy`; `objective` is `costsᵀy`.
    pub fn solve_min(&self, costs: &[f64]) -> Result<Solution> {
        match self.sense() {
            Sense::Minimize => self.solve(costs),
            Sense::Maximize => {
                let rewards: Vec<f64> = costs.iter().map(|c| -c).collect();
                let sol = self.solve(&rewards)?;
                Ok(Solution::new(sol.y, costs))
            }
        }
    }

    pub fn is_feasible(&self, y: &[u8]) -> bool {
        match self {
            OptLayer::Grid(g) => g.is_path(y),
            OptLayer::Knapsack(k) => k.is_feasible(y),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

/// Every feasible 0/1 vector of a small layer, each exactly once.
pub fn enumerate_solutions(layer: &OptLayer) -> Result<Box<dyn Iterator<Item = Vec<u8>> + '_>> {
    match layer {
        OptLayer::Grid(g) => {
            if g.side() > MAX_ENUM_GRID {
                return Err(Error::Capacity(format!(
                    "grid side {} exceeds enumeration limit {MAX_ENUM_GRID}",
                    g.side()
                )));
            }
            Ok(Box::new(g.all_paths().into_iter()))
        }
        OptLayer::Knapsack(k) => {
            let m = k.items();
            if m > MAX_ENUM_ITEMS {
                return Err(Error::Capacity(format!(
                    "{m} items exceed enumeration limit {MAX_ENUM_ITEMS}"
                )));
            }
            Ok(Box::new((0u32..(1u32 << m)).filter_map(move |mask| {
                let y: Vec<u8> = (0..m).map(|j| ((mask >> j) & 1) as u8).collect();
                k.is_feasible(&y).then_some(y)
            })))
        }
    }
}

/// Brute-force `min_y costsᵀy` over the enumerated feasible set. Returns the
/// first minimiser in enumeration order.
pub fn enumerate_min(layer: &OptLayer, costs: &[f64]) -> Result<Solution> {
    check_dim("enumeration costs", layer.dim(), costs.len())?;
    let mut best: Option<Solution> = None;
    for y in enumerate_solutions(layer)? {
        let s = Solution::new(y, costs);
        if best.as_ref().is_none_or(|b| s.objective < b.objective) {
            best = Some(s);
        }
    }
    best.ok_or_else(|| Error::Input("layer has no feasible solution".into()))
}
