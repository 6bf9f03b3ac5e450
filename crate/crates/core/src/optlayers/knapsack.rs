//! Exact 0/1 multi-dimensional knapsack.
//!
//! Integer weights are solved by dynamic programming over the discretised
//! remaining-capacity lattice; anything else falls back to depth-first branch
//! and bound with a per-dimension fractional (Dantzig) bound.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Solution;
use crate::error::{check_dim, check_finite, Error, Result};

/// Largest DP table (items × capacity states) attempted before falling back
/// to branch and bound.
const DP_TABLE_LIMIT: usize = 20_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KnapsackSpec", into = "KnapsackSpec")]
pub struct KnapsackInstance {
    items: usize,
    dims: usize,
    /// Row-major `[dims × items]`.
    weights: Vec<f64>,
    capacities: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KnapsackSpec {
    m: usize,
    d: usize,
    weights: Vec<Vec<f64>>,
    capacities: Vec<f64>,
}

impl TryFrom<KnapsackSpec> for KnapsackInstance {
    type Error = Error;

    fn try_from(s: KnapsackSpec) -> Result<Self> {
        check_dim("knapsack weight rows", s.d, s.weights.len())?;
        for row in &s.weights {
            check_dim("knapsack weight row", s.m, row.len())?;
        }
        KnapsackInstance::new(s.m, s.d, s.weights.concat(), s.capacities)
    }
}

impl From<KnapsackInstance> for KnapsackSpec {
    fn from(k: KnapsackInstance) -> Self {
        KnapsackSpec {
            m: k.items,
            d: k.dims,
            weights: k.weights.chunks(k.items).map(<[f64]>::to_vec).collect(),
            capacities: k.capacities,
        }
    }
}

/// Defaults for random instance generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnapsackGen {
    pub items: usize,
    pub dims: usize,
    pub weight_low: u32,
    pub weight_high: u32,
    /// Capacity per dimension as a fraction of that dimension's total weight.
    pub capacity_ratio: f64,
}

impl Default for KnapsackGen {
    fn default() -> Self {
        Self {
            items: 16,
            dims: 2,
            weight_low: 3,
            weight_high: 8,
            capacity_ratio: 0.5,
        }
    }
}

impl KnapsackInstance {
    pub fn new(items: usize, dims: usize, weights: Vec<f64>, capacities: Vec<f64>) -> Result<Self> {
        if items == 0 || dims == 0 {
            return Err(Error::Input("knapsack needs at least one item and one dimension".into()));
        }
        check_dim("knapsack weights", items * dims, weights.len())?;
        check_dim("knapsack capacities", dims, capacities.len())?;
        check_finite("knapsack weights", &weights)?;
        check_finite("knapsack capacities", &capacities)?;
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Input("knapsack weights must be nonnegative".into()));
        }
        if capacities.iter().any(|&c| c <= 0.0) {
            return Err(Error::Input("knapsack capacities must be positive".into()));
        }
        Ok(Self {
            items,
            dims,
            weights,
            capacities,
        })
    }

    /// Integer weights uniform in `[weight_low, weight_high]`, capacity
    /// `capacity_ratio × Σ weights` per dimension.
    pub fn random<R: Rng + ?Sized>(spec: &KnapsackGen, rng: &mut R) -> Result<Self> {
        if spec.weight_low > spec.weight_high {
            return Err(Error::Input("knapsack weight range is empty".into()));
        }
        let weights: Vec<f64> = (0..spec.items * spec.dims)
            .map(|_| f64::from(rng.random_range(spec.weight_low..=spec.weight_high)))
            .collect();
        let capacities = weights
            .chunks(spec.items.max(1))
            .map(|row| spec.capacity_ratio * row.iter().sum::<f64>())
            .collect();
        Self::new(spec.items, spec.dims, weights, capacities)
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn weight(&self, dim: usize, item: usize) -> f64 {
        self.weights[dim * self.items + item]
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    pub fn is_feasible(&self, y: &[u8]) -> bool {
        y.len() == self.items
            && y.iter().all(|&b| b <= 1)
            && (0..self.dims).all(|k| {
                let load: f64 = (0..self.items)
                    .filter(|&j| y[j] == 1)
                    .map(|j| self.weight(k, j))
                    .sum();
                load <= self.capacities[k]
            })
    }

    /// Maximises `rewardsᵀy` subject to `W y ≤ capacities`. Items with
    /// nonpositive reward are never selected.
    pub fn knapsack_max(&self, rewards: &[f64]) -> Result<Solution> {
        check_dim("knapsack rewards", self.items, rewards.len())?;
        check_finite("knapsack rewards", rewards)?;
        let candidates: Vec<usize> = (0..self.items)
            .filter(|&j| rewards[j] > 0.0 && (0..self.dims).all(|k| self.weight(k, j) <= self.capacities[k]))
            .collect();
        let chosen = match self.dp_lattice() {
            Some(lattice) if lattice.states.saturating_mul(candidates.len() + 1) <= DP_TABLE_LIMIT => {
                self.solve_dp(rewards, &candidates, &lattice)
            }
            _ => self.solve_branch_and_bound(rewards, &candidates),
        };
        let mut y = vec![0u8; self.items];
        for j in chosen {
            y[j] = 1;
        }
        Ok(Solution::new(y, rewards))
    }

    fn dp_lattice(&self) -> Option<Lattice> {
        if self.weights.iter().any(|w| w.fract() != 0.0) {
            return None;
        }
        let caps: Vec<usize> = self.capacities.iter().map(|c| c.floor() as usize).collect();
        let mut strides = Vec::with_capacity(self.dims);
        let mut states: usize = 1;
        for &c in &caps {
            strides.push(states);
            states = states.checked_mul(c + 1)?;
        }
        Some(Lattice {
            caps,
            strides,
            states,
        })
    }

    fn solve_dp(&self, rewards: &[f64], candidates: &[usize], lat: &Lattice) -> Vec<usize> {
        let n = candidates.len();
        let s_count = lat.states;
        // value[i][s]: best reward from candidates i.. with remaining capacity s
        let mut value = vec![0.0f64; (n + 1) * s_count];
        let residual = |s: usize, k: usize| (s / lat.strides[k]) % (lat.caps[k] + 1);
        let shift: Vec<usize> = candidates
            .iter()
            .map(|&j| (0..self.dims).map(|k| self.weight(k, j) as usize * lat.strides[k]).sum())
            .collect();
        for i in (0..n).rev() {
            let j = candidates[i];
            let (head, tail) = value.split_at_mut((i + 1) * s_count);
            let next = &tail[..s_count];
            let cur = &mut head[i * s_count..];
            for s in 0..s_count {
                let skip = next[s];
                let fits = (0..self.dims).all(|k| residual(s, k) >= self.weight(k, j) as usize);
                cur[s] = if fits {
                    let take = rewards[j] + next[s - shift[i]];
                    if take > skip {
                        take
                    } else {
                        skip
                    }
                } else {
                    skip
                };
            }
        }
        let mut s = s_count - 1;
        let mut chosen = Vec::new();
        for (i, &j) in candidates.iter().enumerate() {
            let next = &value[(i + 1) * s_count..(i + 2) * s_count];
            let fits = (0..self.dims).all(|k| residual(s, k) >= self.weight(k, j) as usize);
            if fits && rewards[j] + next[s - shift[i]] > next[s] {
                chosen.push(j);
                s -= shift[i];
            }
        }
        chosen
    }

    fn solve_branch_and_bound(&self, rewards: &[f64], candidates: &[usize]) -> Vec<usize> {
        // per dimension: candidate positions sorted by decreasing reward/weight
        let orders: Vec<Vec<usize>> = (0..self.dims)
            .map(|k| {
                let mut idx: Vec<usize> = (0..candidates.len()).collect();
                let ratio = |p: usize| {
                    let j = candidates[p];
                    let w = self.weight(k, j);
                    if w == 0.0 {
                        f64::INFINITY
                    } else {
                        rewards[j] / w
                    }
                };
                idx.sort_by(|&a, &b| ratio(b).total_cmp(&ratio(a)).then(a.cmp(&b)));
                idx
            })
            .collect();
        let mut search = BranchAndBound {
            inst: self,
            rewards,
            candidates,
            orders,
            remaining: self.capacities.clone(),
            current: Vec::new(),
            best_value: 0.0,
            best: Vec::new(),
        };
        search.dfs(0, 0.0);
        search.best
    }
}

struct Lattice {
    caps: Vec<usize>,
    strides: Vec<usize>,
    states: usize,
}

struct BranchAndBound<'a> {
    inst: &'a KnapsackInstance,
    rewards: &'a [f64],
    candidates: &'a [usize],
    orders: Vec<Vec<usize>>,
    remaining: Vec<f64>,
    current: Vec<usize>,
    best_value: f64,
    best: Vec<usize>,
}

impl BranchAndBound<'_> {
    /// Minimum over dimensions of the fractional single-constraint bound on
    /// the undecided candidates `depth..`.
    fn bound(&self, depth: usize) -> f64 {
        let mut best = f64::INFINITY;
        for (k, order) in self.orders.iter().enumerate() {
            let mut cap = self.remaining[k];
            let mut total = 0.0;
            for &p in order {
                if p < depth {
                    continue;
                }
                let j = self.candidates[p];
                let w = self.inst.weight(k, j);
                if w <= cap {
                    cap -= w;
                    total += self.rewards[j];
                } else {
                    total += self.rewards[j] * cap / w;
                    break;
                }
            }
            best = best.min(total);
        }
        best
    }

    fn dfs(&mut self, depth: usize, value: f64) {
        if value > self.best_value {
            self.best_value = value;
            self.best = self.current.clone();
        }
        if depth == self.candidates.len() || value + self.bound(depth) <= self.best_value {
            return;
        }
        let j = self.candidates[depth];
        let fits = (0..self.inst.dims).all(|k| self.inst.weight(k, j) <= self.remaining[k]);
        if fits {
            for k in 0..self.inst.dims {
                self.remaining[k] -= self.inst.weight(k, j);
            }
            self.current.push(j);
            self.dfs(depth + 1, value + self.rewards[j]);
            self.current.pop();
            for k in 0..self.inst.dims {
                self.remaining[k] += self.inst.weight(k, j);
            }
        }
        self.dfs(depth + 1, value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute(inst: &KnapsackInstance, r: &[f64]) -> f64 {
        let m = inst.items();
        let mut best = 0.0f64;
        for mask in 0u32..(1 << m) {
            let y: Vec<u8> = (0..m).map(|j| ((mask >> j) & 1) as u8).collect();
            if inst.is_feasible(&y) {
                let v: f64 = (0..m).filter(|&j| y[j] == 1).map(|j| r[j]).sum();
                best = best.max(v);
            }
        }
        best
    }

    #[test]
    fn nonpositive_rewards_select_nothing() {
        let inst = KnapsackInstance::new(3, 1, vec![1.0, 1.0, 1.0], vec![2.0]).unwrap();
        let s = inst.knapsack_max(&[-1.0, 0.0, -3.0]).unwrap();
        assert_eq!(s.y, vec![0, 0, 0]);
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn loose_capacity_selects_everything() {
        let inst = KnapsackInstance::new(4, 2, vec![1.0; 8], vec![10.0, 10.0]).unwrap();
        let s = inst.knapsack_max(&[1.0, 2.0, 0.5, 3.0]).unwrap();
        assert_eq!(s.y, vec![1, 1, 1, 1]);
    }

    #[test]
    fn dp_and_branch_and_bound_agree_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..30 {
            let inst = KnapsackInstance::random(&KnapsackGen { items: 10, ..Default::default() }, &mut rng).unwrap();
            let r: Vec<f64> = (0..10).map(|_| rng.random_range(-0.5..2.0)).collect();
            let dp = inst.knapsack_max(&r).unwrap();
            assert!(inst.is_feasible(&dp.y));
            let cands: Vec<usize> = (0..10).filter(|&j| r[j] > 0.0).collect();
            let mut y = vec![0u8; 10];
            for j in inst.solve_branch_and_bound(&r, &cands) {
                y[j] = 1;
            }
            let bb = Solution::new(y, &r);
            let oracle = brute(&inst, &r);
            assert!((dp.objective - oracle).abs() < 1e-12);
            assert!((bb.objective - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn fractional_weights_use_branch_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..24).map(|_| rng.random_range(0.5..3.0)).collect();
        let inst = KnapsackInstance::new(12, 2, w, vec![8.3, 9.1]).unwrap();
        let r: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = inst.knapsack_max(&r).unwrap();
        assert!(inst.is_feasible(&s.y));
        assert!((s.objective - brute(&inst, &r)).abs() < 1e-12);
    }

    #[test]
    fn invalid_instances_rejected() {
        assert!(KnapsackInstance::new(2, 1, vec![-1.0, 1.0], vec![1.0]).is_err());
        assert!(KnapsackInstance::new(2, 1, vec![1.0, 1.0], vec![0.0]).is_err());
        let inst = KnapsackInstance::new(2, 1, vec![1.0, 1.0], vec![1.0]).unwrap();
        assert!(inst.knapsack_max(&[f64::INFINITY, 1.0]).is_err());
    }
}
