//! Monotone shortest paths on an `N × N` grid.
//!
//! Nodes are numbered row-major; every node has a "right" edge and a "down"
//! edge when those neighbours exist, giving `2N(N−1)` edges. The graph is a
//! DAG whose topological order is the node order, so a single forward sweep
//! finds the exact minimum for any real-valued costs, negatives included.

use serde::{Deserialize, Serialize};

use super::Solution;
use crate::error::{check_dim, check_finite, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct GridGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    /// Incoming `(from, edge index)` pairs per node, sorted by `from`.
    incoming: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    n: usize,
}

impl TryFrom<GridSpec> for GridGraph {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        GridGraph::new(spec.n)
    }
}

impl From<GridGraph> for GridSpec {
    fn from(g: GridGraph) -> Self {
        GridSpec { n: g.n }
    }
}

impl GridGraph {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Input(format!("grid side must be at least 2, got {n}")));
        }
        let mut edges = Vec::with_capacity(2 * n * (n - 1));
        for r in 0..n {
            for c in 0..n {
                let v = r * n + c;
                if c + 1 < n {
                    edges.push((v, v + 1));
                }
                if r + 1 < n {
                    edges.push((v, v + n));
                }
            }
        }
        let mut incoming = vec![Vec::new(); n * n];
        for (e, &(from, to)) in edges.iter().enumerate() {
            incoming[to].push((from, e));
        }
        for preds in &mut incoming {
            preds.sort_unstable();
        }
        Ok(Self { n, edges, incoming })
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn source(&self) -> usize {
        0
    }

    pub fn target(&self) -> usize {
        self.n * self.n - 1
    }

    /// Edge index of `from → to`, if that edge exists.
    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        self.incoming
            .get(to)?
            .iter()
            .find(|&&(f, _)| f == from)
            .map(|&(_, e)| e)
    }

    /// Minimum-cost path from the upper-left to the lower-right node. Ties are
    /// broken towards the lowest-numbered predecessor, so with uniform costs
    /// the path runs along the top row and then down the right column.
    pub fn shortest_path(&self, costs: &[f64]) -> Result<Solution> {
        check_dim("grid costs", self.num_edges(), costs.len())?;
        check_finite("grid costs", costs)?;
        let nodes = self.n * self.n;
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via: Vec<Option<(usize, usize)>> = vec![None; nodes];
        dist[0] = 0.0;
        for v in 1..nodes {
            for &(from, e) in &self.incoming[v] {
                let cand = dist[from] + costs[e];
                if cand < dist[v] {
                    dist[v] = cand;
                    via[v] = Some((from, e));
                }
            }
        }
        let mut y = vec![0u8; self.num_edges()];
        let mut v = self.target();
        while let Some((from, e)) = via[v] {
            y[e] = 1;
            v = from;
        }
        debug_assert_eq!(v, 0);
        Ok(Solution::new(y, costs))
    }

    /// All monotone source-to-target paths as edge-incidence vectors.
    pub(crate) fn all_paths(&self) -> Vec<Vec<u8>> {
        fn walk(g: &GridGraph, v: usize, y: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
            if v == g.target() {
                out.push(y.clone());
                return;
            }
            let (r, c) = (v / g.n, v % g.n);
            if c + 1 < g.n {
                let e = g.edge_index(v, v + 1).expect("right edge");
                y[e] = 1;
                walk(g, v + 1, y, out);
                y[e] = 0;
            }
            if r + 1 < g.n {
                let e = g.edge_index(v, v + g.n).expect("down edge");
                y[e] = 1;
                walk(g, v + g.n, y, out);
                y[e] = 0;
            }
        }
        let mut out = Vec::new();
        let mut y = vec![0u8; self.num_edges()];
        walk(self, 0, &mut y, &mut out);
        out
    }

    /// Flow conservation check: `y` is a single source-to-target path.
    pub fn is_path(&self, y: &[u8]) -> bool {
        if y.len() != self.num_edges() || y.iter().any(|&b| b > 1) {
            return false;
        }
        let nodes = self.n * self.n;
        let mut balance = vec![0i64; nodes];
        for (e, &(from, to)) in self.edges.iter().enumerate() {
            if y[e] == 1 {
                balance[from] += 1;
                balance[to] -= 1;
            }
        }
        balance.iter().enumerate().all(|(v, &b)| {
            if v == self.source() {
                b == 1
            } else if v == self.target() {
                b == -1
            } else {
                b == 0
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_count_formula() {
        for n in 2..8 {
            assert_eq!(GridGraph::new(n).unwrap().num_edges(), 2 * n * (n - 1));
        }
        assert!(GridGraph::new(1).is_err());
    }

    #[test]
    fn unit_costs_pick_right_then_down() {
        let g = GridGraph::new(2).unwrap();
        let s = g.shortest_path(&[1.0; 4]).unwrap();
        assert_eq!(s.objective, 2.0);
        let right = g.edge_index(0, 1).unwrap();
        let down = g.edge_index(1, 3).unwrap();
        let mut expected = vec![0u8; 4];
        expected[right] = 1;
        expected[down] = 1;
        assert_eq!(s.y, expected);
    }

    #[test]
    fn negative_costs_are_handled() {
        let g = GridGraph::new(3).unwrap();
        let mut c = vec![1.0; g.num_edges()];
        // make the bottom-left route attractive
        c[g.edge_index(0, 3).unwrap()] = -5.0;
        c[g.edge_index(3, 6).unwrap()] = -5.0;
        let s = g.shortest_path(&c).unwrap();
        assert!(g.is_path(&s.y));
        assert_eq!(s.objective, -8.0);
    }

    #[test]
    fn non_finite_costs_rejected() {
        let g = GridGraph::new(2).unwrap();
        assert!(matches!(
            g.shortest_path(&[1.0, f64::NAN, 1.0, 1.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(g.shortest_path(&[1.0; 3]).is_err());
    }

    #[test]
    fn every_enumerated_path_is_feasible() {
        let g = GridGraph::new(4).unwrap();
        let paths = g.all_paths();
        assert_eq!(paths.len(), 20);
        assert!(paths.iter().all(|p| g.is_path(p)));
    }
}
