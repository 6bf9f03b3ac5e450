//! Synthetic contextual data for shortest-path and knapsack pipelines.
//!
//! Contexts are standard Gaussian. Costs (or rewards) follow
//!
//! ```text
//! θ_j = [ (1/3.5⁴) ((B x)_j / √n_x + 3)⁴ + 1 ] · ε_j,   ε_j ~ U(low, high)
//! ```
//!
//! with `B ∈ {0,1}^{n_y × n_x}` drawn once per dataset, entries Bernoulli(½).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::optlayers::{GridGraph, KnapsackGen, KnapsackInstance, OptLayer};

const DATASET_FORMAT: &str = "cfopt-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerGen {
    Grid { n: usize },
    Knapsack(KnapsackGen),
}

impl Default for LayerGen {
    fn default() -> Self {
        LayerGen::Grid { n: 5 }
    }
}

impl LayerGen {
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<OptLayer> {
        match self {
            LayerGen::Grid { n } => Ok(OptLayer::Grid(GridGraph::new(*n)?)),
            LayerGen::Knapsack(spec) => Ok(OptLayer::Knapsack(KnapsackInstance::random(spec, rng)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n_x: usize,
    pub layer: LayerGen,
    pub samples: usize,
    pub seed: u64,
    pub noise_low: f64,
    pub noise_high: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_x: 10,
            layer: LayerGen::default(),
            samples: 2000,
            seed: 0,
            noise_low: 0.5,
            noise_high: 1.5,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 {
            return Err(Error::Input("n_x must be positive".into()));
        }
        if !(self.noise_low > 0.0 && self.noise_low <= self.noise_high && self.noise_high.is_finite()) {
            return Err(Error::Input(format!(
                "noise bounds must satisfy 0 < low ≤ high, got [{}, {}]",
                self.noise_low, self.noise_high
            )));
        }
        Ok(())
    }
}

/// The feature-to-cost map with its fixed Bernoulli matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub n_x: usize,
    pub n_y: usize,
    /// Row-major `[n_y × n_x]`, entries 0 or 1.
    pub b: Vec<u8>,
    pub noise_low: f64,
    pub noise_high: f64,
}

impl CostModel {
    pub fn sample<R: Rng + ?Sized>(n_x: usize, n_y: usize, noise_low: f64, noise_high: f64, rng: &mut R) -> Self {
        let b = (0..n_x * n_y).map(|_| u8::from(rng.random_bool(0.5))).collect();
        Self {
            n_x,
            n_y,
            b,
            noise_low,
            noise_high,
        }
    }

    /// Costs for context `x` with the multiplicative noise given explicitly.
    pub fn costs_with_noise(&self, x: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
        check_dim("cost model context", self.n_x, x.len())?;
        check_dim("cost model noise", self.n_y, noise.len())?;
        let scale = 1.0 / (self.n_x as f64).sqrt();
        let denom = 3.5f64.powi(4);
        Ok(self
            .b
            .chunks_exact(self.n_x)
            .zip(noise)
            .map(|(row, eps)| {
                let bx: f64 = row.iter().zip(x).filter(|(&b, _)| b == 1).map(|(_, xi)| xi).sum();
                ((scale * bx + 3.0).powi(4) / denom + 1.0) * eps
            })
            .collect())
    }

    pub fn gen_costs<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let noise: Vec<f64> = (0..self.n_y)
            .map(|_| rng.random_range(self.noise_low..=self.noise_high))
            .collect();
        self.costs_with_noise(x, &noise)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub contexts: Vec<Vec<f64>>,
    pub costs: Vec<Vec<f64>>,
    /// Optimal decisions under the true costs, in the layer's native sense.
    pub solutions: Option<Vec<Vec<u8>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.contexts.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, layer: &OptLayer) -> Result<()> {
        check_dim("dataset cost rows", self.contexts.len(), self.costs.len())?;
        let n_x = self.n_x();
        for x in &self.contexts {
            check_dim("dataset context width", n_x, x.len())?;
        }
        for c in &self.costs {
            check_dim("dataset cost width", layer.dim(), c.len())?;
        }
        if let Some(sols) = &self.solutions {
            check_dim("dataset solution rows", self.contexts.len(), sols.len())?;
            if let Some(bad) = sols.iter().position(|y| !layer.is_feasible(y)) {
                return Err(Error::Input(format!("stored solution {bad} is infeasible")));
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            contexts: idx.iter().map(|&i| self.contexts[i].clone()).collect(),
            costs: idx.iter().map(|&i| self.costs[i].clone()).collect(),
            solutions: self
                .solutions
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i].clone()).collect()),
        }
    }

    /// First `n` rows and the remainder.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Fills in missing optimal solutions from the stored costs.
    pub fn with_solutions(mut self, layer: &OptLayer) -> Result<Dataset> {
        if self.solutions.is_none() {
            let sols = self
                .costs
                .iter()
                .map(|c| layer.solve(c).map(|s| s.y))
                .collect::<Result<Vec<_>>>()?;
            self.solutions = Some(sols);
        }
        Ok(self)
    }
}

/// A generated dataset together with everything needed to regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub spec: GenSpec,
    pub layer: OptLayer,
    pub model: CostModel,
    pub data: Dataset,
}

/// Draws the layer instance, the Bernoulli matrix, then each sample's context
/// and noise, all from one seeded stream.
pub fn generate(spec: &GenSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layer = spec.layer.build(&mut rng)?;
    let model = CostModel::sample(spec.n_x, layer.dim(), spec.noise_low, spec.noise_high, &mut rng);
    let mut data = Dataset {
        contexts: Vec::with_capacity(spec.samples),
        costs: Vec::with_capacity(spec.samples),
        solutions: None,
    };
    for _ in 0..spec.samples {
        let x: Vec<f64> = (0..spec.n_x).map(|_| rng.sample(StandardNormal)).collect();
        let c = model.gen_costs(&x, &mut rng)?;
        data.contexts.push(x);
        data.costs.push(c);
    }
    let data = data.with_solutions(&layer)?;
    Ok(Generated {
        spec: spec.clone(),
        layer,
        model,
        data,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    version: u32,
    spec: GenSpec,
    n_x: usize,
    n_y: usize,
    rows: usize,
    layer_file: String,
    contexts_file: String,
    costs_file: String,
    solutions_file: String,
    cost_model: CostModel,
}

pub(crate) fn write_matrix<T: ToString>(path: &Path, prefix: &str, rows: &[Vec<T>], width: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    let header: Vec<String> = (0..width).map(|j| format!("{prefix}{j}")).collect();
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(ToString::to_string))
            .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_matrix<T: std::str::FromStr>(path: &Path, width: usize) -> Result<Vec<Vec<T>>>
where
    T::Err: std::fmt::Display,
{
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        if rec.len() != width {
            return Err(Error::format(path, format!("expected {width} columns, found {}", rec.len())));
        }
        let row = rec
            .iter()
            .map(|s| s.parse::<T>().map_err(|e| Error::format(path, e)))
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

impl Generated {
    /// Writes `manifest.json`, `layer.json` and the three CSV matrices.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            spec: self.spec.clone(),
            n_x: self.model.n_x,
            n_y: self.model.n_y,
            rows: self.data.len(),
            layer_file: "layer.json".into(),
            contexts_file: "contexts.csv".into(),
            costs_file: "costs.csv".into(),
            solutions_file: "solutions.csv".into(),
            cost_model: self.model.clone(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.layer.save(&dir.join(&manifest.layer_file))?;
        write_matrix(&dir.join(&manifest.contexts_file), "x", &self.data.contexts, manifest.n_x)?;
        write_matrix(&dir.join(&manifest.costs_file), "theta", &self.data.costs, manifest.n_y)?;
        let sols = self.data.solutions.clone().unwrap_or_default();
        write_matrix(&dir.join(&manifest.solutions_file), "y", &sols, manifest.n_y)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
            return Err(Error::format(&path, format!("unsupported dataset {} v{}", m.format, m.version)));
        }
        let layer = OptLayer::load(&dir.join(&m.layer_file))?;
        let contexts = read_matrix::<f64>(&dir.join(&m.contexts_file), m.n_x)?;
        let costs = read_matrix::<f64>(&dir.join(&m.costs_file), m.n_y)?;
        let sols = read_matrix::<u8>(&dir.join(&m.solutions_file), m.n_y)?;
        let data = Dataset {
            contexts,
            costs,
            solutions: if sols.is_empty() { None } else { Some(sols) },
        };
        check_dim("dataset rows", m.rows, data.len())?;
        data.validate(&layer)?;
        Ok(Self {
            spec: m.spec,
            layer,
            model: m.cost_model,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_spec(samples: usize, seed: u64) -> GenSpec {
        GenSpec {
            n_x: 5,
            layer: LayerGen::Grid { n: 3 },
            samples,
            seed,
            ..GenSpec::default()
        }
    }

    #[test]
    fn zero_context_unit_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CostModel::sample(4, 6, 0.5, 1.5, &mut rng);
        let c = model.costs_with_noise(&[0.0; 4], &[1.0; 6]).unwrap();
        let expected = 3f64.powi(4) / 3.5f64.powi(4) + 1.0;
        for v in c {
            assert!((v - expected).abs() < 1e-15);
            assert!((v - 1.5398).abs() < 1e-4);
        }
    }

    #[test]
    fn costs_increase_with_projection() {
        let model = CostModel {
            n_x: 1,
            n_y: 1,
            b: vec![1],
            noise_low: 0.5,
            noise_high: 1.5,
        };
        let mut last = f64::NEG_INFINITY;
        for i in -2..10 {
            let x = i as f64 * 0.3;
            let c = model.costs_with_noise(&[x], &[1.0]).unwrap()[0];
            assert!(c > last);
            last = c;
        }
    }

    #[test]
    fn generation_is_reproducible_and_positive() {
        let a = generate(&grid_spec(50, 9)).unwrap();
        let b = generate(&grid_spec(50, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate(&grid_spec(50, 10)).unwrap();
        assert_ne!(a.data.costs, c.data.costs);
        assert!(a.data.costs.iter().flatten().all(|&v| v >= 0.5));
        a.data.validate(&a.layer).unwrap();
    }

    #[test]
    fn bernoulli_matrix_is_binary_and_mixed() {
        let g = generate(&grid_spec(1, 3)).unwrap();
        assert!(g.model.b.iter().all(|&v| v <= 1));
        let ones = g.model.b.iter().filter(|&&v| v == 1).count();
        assert!(ones > 0 && ones < g.model.b.len());
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = grid_spec(1, 0);
        s.noise_low = 0.0;
        assert!(generate(&s).is_err());
        s.noise_low = 2.0;
        s.noise_high = 1.0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate(&GenSpec {
            layer: LayerGen::Knapsack(KnapsackGen { items: 6, ..Default::default() }),
            samples: 20,
            ..GenSpec::default()
        })
        .unwrap();
        g.save(dir.path()).unwrap();
        let back = Generated::load(dir.path()).unwrap();
        assert_eq!(back, g);
    }
}
