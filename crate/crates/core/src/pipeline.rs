//! Predict-then-optimize pipelines `x → φ(x) → y*(φ(x))` and SPO+ training.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, DenseNet, NetGrad};
use crate::optlayers::{OptLayer, Sense, Solution};

const BUNDLE_FORMAT: &str = "cfopt-pipeline";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub predictor: DenseNet,
    pub layer: OptLayer,
}

impl Pipeline {
    pub fn new(predictor: DenseNet, layer: OptLayer) -> Result<Self> {
        check_dim("predictor output vs layer", layer.dim(), predictor.output_dim())?;
        Ok(Self { predictor, layer })
    }

    pub fn sense(&self) -> Sense {
        self.layer.sense()
    }

    pub fn n_x(&self) -> usize {
        self.predictor.input_dim()
    }

    pub fn n_y(&self) -> usize {
        self.layer.dim()
    }

    /// `φ(x)` in the layer's native sense.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.predictor.forward(x)
    }

    /// `φ(x)` converted to minimisation costs.
    pub fn min_costs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.layer.to_min_costs(&self.predict(x)?))
    }

    /// `(θ, y*(θ))` with `θ = φ(x)`; the solution objective is in native sense.
    pub fn decide(&self, x: &[f64]) -> Result<(Vec<f64>, Solution)> {
        let theta = self.predict(x)?;
        let sol = self.layer.solve(&theta)?;
        Ok((theta, sol))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = PipelineManifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            sense: self.sense(),
            predictor_file: "predictor.json".into(),
            layer_file: "layer.json".into(),
        };
        self.predictor.save(&dir.join(&manifest.predictor_file))?;
        self.layer.save(&dir.join(&manifest.layer_file))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: PipelineManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        if m.format != BUNDLE_FORMAT || m.version != BUNDLE_VERSION {
            return Err(Error::format(&path, format!("unsupported pipeline {} v{}", m.format, m.version)));
        }
        let p = Self::new(
            DenseNet::load(&dir.join(&m.predictor_file))?,
            OptLayer::load(&dir.join(&m.layer_file))?,
        )?;
        if p.sense() != m.sense {
            return Err(Error::format(&path, "manifest sense disagrees with layer"));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineManifest {
    format: String,
    version: u32,
    sense: Sense,
    predictor_file: String,
    layer_file: String,
}

/// Layer widths for a depth-`L` predictor: `L − 1` hidden layers of width
/// `n_x`, then the output layer of width `n_y`.
pub fn predictor_widths(n_x: usize, n_y: usize, depth: usize) -> Vec<usize> {
    let mut w = vec![n_x; depth.max(1)];
    w.push(n_y);
    w
}

pub fn init_predictor(n_x: usize, n_y: usize, depth: usize, seed: u64) -> Result<DenseNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseNet::mlp(&predictor_widths(n_x, n_y, depth), Activation::Relu, Activation::Identity, &mut rng)
}

/// SPO+ surrogate in minimisation form:
///
/// `ℓ = −min_y (2ĉ − c)ᵀy + 2ĉᵀy_true − cᵀy_true`, subgradient
/// `2 (y_true − y*(2ĉ − c))` with respect to `ĉ`.
pub fn spo_plus_loss(
    predicted: &[f64],
    truth: &[f64],
    y_true: &[u8],
    layer: &OptLayer,
) -> Result<(f64, Vec<f64>)> {
    let n = layer.dim();
    check_dim("spo+ predicted costs", n, predicted.len())?;
    check_dim("spo+ true costs", n, truth.len())?;
    check_dim("spo+ true solution", n, y_true.len())?;
    let shifted: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| 2.0 * p - t).collect();
    let inner = layer.solve_min(&shifted)?;
    let loss = -inner.objective + 2.0 * crate::optlayers::dot01(predicted, y_true)
        - crate::optlayers::dot01(truth, y_true);
    let grad = y_true
        .iter()
        .zip(&inner.y)
        .map(|(&a, &b)| 2.0 * (f64::from(a) - f64::from(b)))
        .collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpoTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub early_stopping: Option<EarlyStopping>,
}

impl Default for SpoTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            learning_rate: 3e-4,
            batch_size: Some(32),
            seed: 0,
            early_stopping: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean SPO+ loss over the training rows seen in each epoch.
    pub train_loss: Vec<f64>,
    /// Mean validation SPO+ loss per epoch, when early stopping is on.
    pub val_loss: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

fn mean_spo_loss(p: &Pipeline, data: &Dataset, sols: &[Vec<u8>], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let pred = p.min_costs(&data.contexts[i])?;
        let truth = p.layer.to_min_costs(&data.costs[i]);
        total += spo_plus_loss(&pred, &truth, &sols[i], &p.layer)?.0;
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Trains the predictor with Adam on the mean SPO+ subgradient over shuffled
/// minibatches. With early stopping, a seeded random hold-out is scored each
/// epoch and the best parameters are restored at the end.
pub fn train_spo(mut p: Pipeline, data: &Dataset, cfg: &SpoTrainConfig) -> Result<(Pipeline, TrainTrace)> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Input("learning rate must be positive".into()));
    }
    check_dim("training contexts", p.n_x(), data.n_x())?;
    let data = data.clone().with_solutions(&p.layer)?;
    data.validate(&p.layer)?;
    let sols = data.solutions.as_ref().expect("solutions filled");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut all: Vec<usize> = (0..data.len()).collect();
    let (mut train_idx, val_idx) = match cfg.early_stopping {
        Some(es) if data.len() >= 2 => {
            all.shuffle(&mut rng);
            let n_val = ((data.len() as f64 * es.val_fraction).round() as usize).clamp(1, data.len() - 1);
            let val = all.split_off(data.len() - n_val);
            (all, val)
        }
        _ => (all, Vec::new()),
    };

    let sign = p.sense().sign();
    let mut adam = AdamState::new(&p.predictor, AdamConfig::with_lr(cfg.learning_rate));
    let batch = cfg.batch_size.unwrap_or(train_idx.len()).max(1);
    let mut trace = TrainTrace::default();
    let mut best_val = f64::INFINITY;
    let mut best_params = p.predictor.clone();
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(batch) {
            let mut grad = NetGrad::zeros_like(&p.predictor);
            for &i in chunk {
                let x = &data.contexts[i];
                let pred = p.min_costs(x)?;
                let truth = p.layer.to_min_costs(&data.costs[i]);
                let (loss, sub) = spo_plus_loss(&pred, &truth, &sols[i], &p.layer)?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        reason: "non-finite SPO+ loss".into(),
                    });
                }
                epoch_loss += loss;
                let upstream: Vec<f64> = sub.iter().map(|g| sign * g).collect();
                grad.add_scaled(&p.predictor.grad_params(x, &upstream)?, 1.0);
            }
            grad.scale(1.0 / chunk.len() as f64);
            adam.step(&mut p.predictor, &grad).map_err(|e| Error::Training {
                epoch,
                reason: e.to_string(),
            })?;
        }
        trace.train_loss.push(epoch_loss / train_idx.len() as f64);
        trace.best_epoch = epoch;

        if let Some(es) = cfg.early_stopping.filter(|_| !val_idx.is_empty()) {
            let v = mean_spo_loss(&p, &data, sols, &val_idx)?;
            if !v.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "non-finite validation loss".into(),
                });
            }
            trace.val_loss.push(v);
            if v < best_val {
                best_val = v;
                best_params = p.predictor.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= es.patience {
                    break;
                }
            }
        }
    }
    if !trace.val_loss.is_empty() {
        let best = trace
            .val_loss
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        trace.best_epoch = best.0 + 1;
        p.predictor = best_params;
    }
    Ok((p, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenSpec, LayerGen};
    use crate::optlayers::{enumerate_min, GridGraph, KnapsackInstance};
    use rand::Rng;

    fn small_grid() -> OptLayer {
        OptLayer::Grid(GridGraph::new(3).unwrap())
    }

    #[test]
    fn identity_predictor_on_unit_costs() {
        let layer = OptLayer::Grid(GridGraph::new(2).unwrap());
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let p = Pipeline::new(DenseNet::linear(w, vec![0.0; 4]).unwrap(), layer).unwrap();
        let (_, sol) = p.decide(&[1.0; 4]).unwrap();
        assert_eq!(sol.objective, 2.0);
    }

    #[test]
    fn constant_predictor_gives_constant_decision() {
        let layer = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bias: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..2.0)).collect();
        let p = Pipeline::new(DenseNet::linear(vec![0.0; 12 * 3], bias).unwrap(), layer).unwrap();
        let first = p.decide(&[0.0, 0.0, 0.0]).unwrap().1;
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_eq!(p.decide(&x).unwrap().1.y, first.y);
        }
    }

    #[test]
    fn mismatched_predictor_rejected() {
        let net = DenseNet::linear(vec![0.0; 10], vec![0.0; 5]).unwrap();
        assert!(Pipeline::new(net, small_grid()).is_err());
    }

    #[test]
    fn spo_plus_vanishes_at_perfect_prediction() {
        let layer = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let c: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
            let y = layer.solve_min(&c).unwrap().y;
            let (loss, grad) = spo_plus_loss(&c, &c, &y, &layer).unwrap();
            assert!(loss.abs() < 1e-12);
            assert!(grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn spo_plus_bounds_regret() {
        let layer = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let c: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
            let chat: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..2.0)).collect();
            let y_true = enumerate_min(&layer, &c).unwrap();
            let (loss, _) = spo_plus_loss(&chat, &c, &y_true.y, &layer).unwrap();
            let decided = enumerate_min(&layer, &chat).unwrap();
            let regret = decided.value(&c) - y_true.objective;
            assert!(loss >= regret - 1e-9, "loss {loss} < regret {regret}");
            assert!(loss >= -1e-9);
        }
    }

    #[test]
    fn spo_plus_inner_term_on_substitution() {
        // ĉ = c makes 2ĉ − c = c, so the inner minimum is min cᵀy
        let layer = small_grid();
        let c: Vec<f64> = (0..12).map(|i| 1.0 + 0.1 * i as f64).collect();
        let y = vec![0u8; 12];
        let (loss, _) = spo_plus_loss(&c, &c, &y, &layer).unwrap();
        let min = enumerate_min(&layer, &c).unwrap().objective;
        assert!((loss + min).abs() < 1e-12);
    }

    #[test]
    fn knapsack_spo_plus_uses_min_form() {
        let inst = KnapsackInstance::new(4, 1, vec![1.0; 4], vec![2.0]).unwrap();
        let layer = OptLayer::Knapsack(inst);
        let rewards = [1.0, 3.0, 2.0, 0.5];
        let c = layer.to_min_costs(&rewards);
        let y = layer.solve(&rewards).unwrap().y;
        let (loss, grad) = spo_plus_loss(&c, &c, &y, &layer).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    fn grid_data(samples: usize, seed: u64) -> (OptLayer, Dataset) {
        let g = generate(&GenSpec {
            n_x: 5,
            layer: LayerGen::Grid { n: 3 },
            samples,
            seed,
            ..GenSpec::default()
        })
        .unwrap();
        (g.layer, g.data)
    }

    #[test]
    fn zero_epochs_keep_parameters() {
        let (layer, data) = grid_data(20, 2);
        let p = Pipeline::new(init_predictor(5, 12, 1, 3).unwrap(), layer).unwrap();
        let cfg = SpoTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (q, trace) = train_spo(p.clone(), &data, &cfg).unwrap();
        assert_eq!(q, p);
        assert!(trace.train_loss.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (layer, data) = grid_data(64, 5);
        let p = Pipeline::new(init_predictor(5, 12, 2, 6).unwrap(), layer).unwrap();
        let cfg = SpoTrainConfig {
            epochs: 5,
            learning_rate: 1e-2,
            early_stopping: Some(EarlyStopping::default()),
            ..Default::default()
        };
        let a = train_spo(p.clone(), &data, &cfg).unwrap();
        let b = train_spo(p, &data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn trained_decisions_match_enumeration() {
        let (layer, data) = grid_data(200, 7);
        let (train, test) = data.split_at(150);
        let p = Pipeline::new(init_predictor(5, 12, 1, 1).unwrap(), layer).unwrap();
        let cfg = SpoTrainConfig {
            epochs: 10,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let (p, trace) = train_spo(p, &train, &cfg).unwrap();
        assert!(trace.train_loss.last().unwrap() < &trace.train_loss[0]);
        for x in &test.contexts {
            let (theta, sol) = p.decide(x).unwrap();
            let oracle = enumerate_min(&p.layer, &theta).unwrap();
            assert_eq!(sol.objective, oracle.objective);
        }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(init_predictor(4, 12, 2, 9).unwrap(), small_grid()).unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(Pipeline::load(dir.path()).unwrap(), p);
    }

    #[test]
    fn predictor_architecture() {
        assert_eq!(predictor_widths(10, 40, 1), vec![10, 40]);
        assert_eq!(predictor_widths(10, 40, 3), vec![10, 10, 10, 40]);
    }
}
