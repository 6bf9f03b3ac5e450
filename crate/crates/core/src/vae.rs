//! Fully-connected Gaussian VAE with closed-form KL and cost-aware training.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, DenseNet, NetGrad};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

const BUNDLE_FORMAT: &str = "cfopt-vae";
const BUNDLE_VERSION: u32 = 1;

/// Layer sizes: the encoder trunk maps `n_x` through `hidden`, the decoder
/// mirrors it from `n_z` back to `n_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeArch {
    pub n_x: usize,
    pub n_z: usize,
    pub hidden: Vec<usize>,
}

impl VaeArch {
    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_z == 0 {
            return Err(Error::Input("VAE dimensions must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Input("VAE needs at least one non-empty hidden layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub trunk: DenseNet,
    pub head_mu: DenseNet,
    pub head_logvar: DenseNet,
    pub decoder: DenseNet,
    pub n_z: usize,
}

fn clamp_logvar(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX)).collect()
}

impl Vae {
    pub fn new(trunk: DenseNet, head_mu: DenseNet, head_logvar: DenseNet, decoder: DenseNet) -> Result<Self> {
        let n_z = head_mu.output_dim();
        check_dim("mu head input", trunk.output_dim(), head_mu.input_dim())?;
        check_dim("logvar head input", trunk.output_dim(), head_logvar.input_dim())?;
        check_dim("logvar head output", n_z, head_logvar.output_dim())?;
        check_dim("decoder input", n_z, decoder.input_dim())?;
        check_dim("decoder output", trunk.input_dim(), decoder.output_dim())?;
        Ok(Self {
            trunk,
            head_mu,
            head_logvar,
            decoder,
            n_z,
        })
    }

    pub fn init<R: Rng + ?Sized>(arch: &VaeArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut trunk_w = vec![arch.n_x];
        trunk_w.extend(&arch.hidden);
        let last = *arch.hidden.last().expect("validated");
        let mut dec_w = vec![arch.n_z];
        dec_w.extend(arch.hidden.iter().rev());
        dec_w.push(arch.n_x);
        let trunk = DenseNet::mlp(&trunk_w, Activation::Relu, Activation::Relu, rng)?;
        let head_mu = DenseNet::mlp(&[last, arch.n_z], Activation::Identity, Activation::Identity, rng)?;
        let head_logvar = DenseNet::mlp(&[last, arch.n_z], Activation::Identity, Activation::Identity, rng)?;
        let decoder = DenseNet::mlp(&dec_w, Activation::Relu, Activation::Identity, rng)?;
        Self::new(trunk, head_mu, head_logvar, decoder)
    }

    pub fn n_x(&self) -> usize {
        self.trunk.input_dim()
    }

    /// `(μ(x), log σ²(x))`, the latter clamped.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.trunk.forward(x)?;
        let mu = self.head_mu.forward(&h)?;
        let lv = clamp_logvar(&self.head_logvar.forward(&h)?);
        Ok((mu, lv))
    }

    pub fn encode_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.head_mu.forward(&self.trunk.forward(x)?)
    }

    /// `μ + σ ⊙ ε` with `ε ~ N(0, I)`.
    pub fn sample_latent<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let (mu, lv) = self.encode(x)?;
        Ok(mu
            .iter()
            .zip(&lv)
            .map(|(m, l)| m + (0.5 * l).exp() * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(z)
    }

    /// Decoder output for the encoder mean.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode_mean(x)?)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.trunk.params_flat();
        p.extend(self.head_mu.params_flat());
        p.extend(self.head_logvar.params_flat());
        p.extend(self.decoder.params_flat());
        p
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = VaeManifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            n_x: self.n_x(),
            n_z: self.n_z,
            logvar_clamp: [LOGVAR_MIN, LOGVAR_MAX],
        };
        self.trunk.save(&dir.join("trunk.json"))?;
        self.head_mu.save(&dir.join("head_mu.json"))?;
        self.head_logvar.save(&dir.join("head_logvar.json"))?;
        self.decoder.save(&dir.join("decoder.json"))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::format(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: VaeManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e))?;
        if m.format != BUNDLE_FORMAT || m.version != BUNDLE_VERSION {
            return Err(Error::format(&path, format!("unsupported VAE bundle {} v{}", m.format, m.version)));
        }
        let v = Self::new(
            DenseNet::load(&dir.join("trunk.json"))?,
            DenseNet::load(&dir.join("head_mu.json"))?,
            DenseNet::load(&dir.join("head_logvar.json"))?,
            DenseNet::load(&dir.join("decoder.json"))?,
        )?;
        if v.n_x() != m.n_x || v.n_z != m.n_z {
            return Err(Error::format(&path, "manifest dimensions disagree with networks"));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VaeManifest {
    format: String,
    version: u32,
    n_x: usize,
    n_z: usize,
    logvar_clamp: [f64; 2],
}

/// `KL(N(μ, diag e^lv) ‖ N(0, I)) = −½ Σ (1 + lv − e^lv − μ²)`.
pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    check_dim("kl logvar", mu.len(), logvar.len())?;
    check_finite("kl mean", mu)?;
    check_finite("kl log-variance", logvar)?;
    let s: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(m, l)| 1.0 + l - l.exp() - m * m)
        .sum();
    Ok((-0.5 * s).max(0.0))
}

/// Per-datum ELBO pieces; `total = recon − kl − α·cost_recon` is maximised.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `−½‖x − x̃‖²`.
    pub recon: f64,
    pub kl: f64,
    /// `‖φ(x) − φ(x̃)‖²`.
    pub cost_recon: f64,
    pub total: f64,
}

impl ElboTerms {
    fn add(&mut self, o: &ElboTerms) {
        self.recon += o.recon;
        self.kl += o.kl;
        self.cost_recon += o.cost_recon;
        self.total += o.total;
    }

    fn scaled(mut self, f: f64) -> Self {
        self.recon *= f;
        self.kl *= f;
        self.cost_recon *= f;
        self.total *= f;
        self
    }
}

/// Gradient of `total` for each of the four networks.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrad {
    pub trunk: NetGrad,
    pub head_mu: NetGrad,
    pub head_logvar: NetGrad,
    pub decoder: NetGrad,
}

impl VaeGrad {
    pub fn zeros_like(v: &Vae) -> Self {
        Self {
            trunk: NetGrad::zeros_like(&v.trunk),
            head_mu: NetGrad::zeros_like(&v.head_mu),
            head_logvar: NetGrad::zeros_like(&v.head_logvar),
            decoder: NetGrad::zeros_like(&v.decoder),
        }
    }

    pub fn add_scaled(&mut self, o: &VaeGrad, s: f64) {
        self.trunk.add_scaled(&o.trunk, s);
        self.head_mu.add_scaled(&o.head_mu, s);
        self.head_logvar.add_scaled(&o.head_logvar, s);
        self.decoder.add_scaled(&o.decoder, s);
    }

    /// Concatenated in the same order as [`Vae::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut g = self.trunk.flat();
        g.extend(self.head_mu.flat());
        g.extend(self.head_logvar.flat());
        g.extend(self.decoder.flat());
        g
    }
}

/// Cost-aware ELBO with the reparameterisation noise `eps` given explicitly,
/// and its gradient with respect to every VAE parameter. The predictor is
/// frozen; `alpha = 0` gives the plain ELBO.
pub fn cost_aware_elbo_with_noise(
    v: &Vae,
    predictor: &DenseNet,
    x: &[f64],
    alpha: f64,
    eps: &[f64],
) -> Result<(ElboTerms, VaeGrad)> {
    if !(alpha >= 0.0) {
        return Err(Error::Input(format!("alpha must be non-negative, got {alpha}")));
    }
    check_dim("predictor input vs VAE features", v.n_x(), predictor.input_dim())?;
    check_dim("reparameterisation noise", v.n_z, eps.len())?;

    let h = v.trunk.forward(x)?;
    let mu = v.head_mu.forward(&h)?;
    let lv_raw = v.head_logvar.forward(&h)?;
    let lv = clamp_logvar(&lv_raw);
    let sigma: Vec<f64> = lv.iter().map(|l| (0.5 * l).exp()).collect();
    let z: Vec<f64> = mu.iter().zip(&sigma).zip(eps).map(|((m, s), e)| m + s * e).collect();
    let xr = v.decoder.forward(&z)?;

    let diff: Vec<f64> = x.iter().zip(&xr).map(|(a, b)| a - b).collect();
    let recon = -0.5 * diff.iter().map(|d| d * d).sum::<f64>();
    let kl = kl_closed_form(&mu, &lv)?;

    let mut g_xr = diff;
    let px = predictor.forward(x)?;
    let pr = predictor.forward(&xr)?;
    let cdiff: Vec<f64> = pr.iter().zip(&px).map(|(a, b)| a - b).collect();
    let cost_recon = cdiff.iter().map(|d| d * d).sum();
    if alpha > 0.0 {
        let back = predictor.vjp_input(&xr, &cdiff)?;
        for (g, b) in g_xr.iter_mut().zip(back) {
            *g -= 2.0 * alpha * b;
        }
    }
    let total = recon - kl - alpha * cost_recon;

    let (g_dec, g_z) = v.decoder.backward(&z, &g_xr)?;
    let g_mu: Vec<f64> = g_z.iter().zip(&mu).map(|(g, m)| g - m).collect();
    let g_lv: Vec<f64> = (0..v.n_z)
        .map(|k| {
            if lv_raw[k] < LOGVAR_MIN || lv_raw[k] > LOGVAR_MAX {
                0.0
            } else {
                0.5 * g_z[k] * eps[k] * sigma[k] + 0.5 * (1.0 - lv[k].exp())
            }
        })
        .collect();
    let (g_hmu, up_mu) = v.head_mu.backward(&h, &g_mu)?;
    let (g_hlv, up_lv) = v.head_logvar.backward(&h, &g_lv)?;
    let up: Vec<f64> = up_mu.iter().zip(&up_lv).map(|(a, b)| a + b).collect();
    let g_trunk = v.trunk.grad_params(x, &up)?;

    let terms = ElboTerms {
        recon,
        kl,
        cost_recon,
        total,
    };
    if !terms.total.is_finite() {
        return Err(Error::NonFinite("cost-aware ELBO"));
    }
    Ok((
        terms,
        VaeGrad {
            trunk: g_trunk,
            head_mu: g_hmu,
            head_logvar: g_hlv,
            decoder: g_dec,
        },
    ))
}

/// Single-sample Monte Carlo estimate of the cost-aware ELBO; the same latent
/// sample feeds the feature and cost reconstruction terms.
pub fn cost_aware_elbo<R: Rng + ?Sized>(
    v: &Vae,
    predictor: &DenseNet,
    x: &[f64],
    alpha: f64,
    rng: &mut R,
) -> Result<(ElboTerms, VaeGrad)> {
    let eps: Vec<f64> = (0..v.n_z).map(|_| rng.sample(StandardNormal)).collect();
    cost_aware_elbo_with_noise(v, predictor, x, alpha, &eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeEarlyStopping {
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for VaeEarlyStopping {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stopping: Option<VaeEarlyStopping>,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
            early_stopping: Some(VaeEarlyStopping::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VaeTrace {
    /// Mean training terms per epoch.
    pub train: Vec<ElboTerms>,
    /// Mean validation terms per epoch, when early stopping is on.
    pub val: Vec<ElboTerms>,
    pub best_epoch: usize,
}

/// Mean terms over `data` with the noise drawn from `rng`.
pub fn mean_elbo<R: Rng + ?Sized>(
    v: &Vae,
    predictor: &DenseNet,
    data: &[Vec<f64>],
    alpha: f64,
    rng: &mut R,
) -> Result<ElboTerms> {
    let mut acc = ElboTerms::default();
    for x in data {
        acc.add(&cost_aware_elbo(v, predictor, x, alpha, rng)?.0);
    }
    Ok(acc.scaled(1.0 / data.len().max(1) as f64))
}

struct VaeAdam([AdamState; 4]);

impl VaeAdam {
    fn new(v: &Vae, cfg: AdamConfig) -> Self {
        Self([
            AdamState::new(&v.trunk, cfg),
            AdamState::new(&v.head_mu, cfg),
            AdamState::new(&v.head_logvar, cfg),
            AdamState::new(&v.decoder, cfg),
        ])
    }

    /// Descent on `−total`, i.e. ascent along `g`.
    fn ascend(&mut self, v: &mut Vae, g: &VaeGrad) -> Result<()> {
        let neg = |n: &NetGrad| {
            let mut n = n.clone();
            n.scale(-1.0);
            n
        };
        let [a, b, c, d] = &mut self.0;
        a.step(&mut v.trunk, &neg(&g.trunk))?;
        b.step(&mut v.head_mu, &neg(&g.head_mu))?;
        c.step(&mut v.head_logvar, &neg(&g.head_logvar))?;
        d.step(&mut v.decoder, &neg(&g.decoder))
    }
}

/// Adam ascent on the mean cost-aware ELBO over shuffled minibatches. With
/// early stopping, a seeded hold-out is scored each epoch (fixed noise per
/// epoch) and the best parameters are restored.
pub fn train_vae(
    mut v: Vae,
    data: &[Vec<f64>],
    predictor: &DenseNet,
    cfg: &VaeTrainConfig,
) -> Result<(Vae, VaeTrace)> {
    if data.is_empty() {
        return Err(Error::Input("VAE training set is empty".into()));
    }
    if !(cfg.learning_rate > 0.0) || !(cfg.alpha >= 0.0) {
        return Err(Error::Input("VAE training needs lr > 0 and alpha ≥ 0".into()));
    }
    for x in data {
        check_dim("VAE training row", v.n_x(), x.len())?;
    }
    check_dim("predictor input vs VAE features", v.n_x(), predictor.input_dim())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let (mut train_idx, val_idx) = match cfg.early_stopping {
        Some(es) if data.len() >= 2 => {
            idx.shuffle(&mut rng);
            let n_val = ((data.len() as f64 * es.val_fraction).round() as usize).clamp(1, data.len() - 1);
            let val = idx.split_off(data.len() - n_val);
            (idx, val)
        }
        _ => (idx, Vec::new()),
    };
    let val_rows: Vec<Vec<f64>> = val_idx.iter().map(|&i| data[i].clone()).collect();

    let mut adam = VaeAdam::new(&v, AdamConfig::with_lr(cfg.learning_rate));
    let batch = cfg.batch_size.max(1);
    let mut trace = VaeTrace::default();
    let mut best = (f64::NEG_INFINITY, v.clone());
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let fail = |e: Error| Error::Training {
            epoch,
            reason: e.to_string(),
        };
        train_idx.shuffle(&mut rng);
        let mut acc = ElboTerms::default();
        for chunk in train_idx.chunks(batch) {
            let mut grad = VaeGrad::zeros_like(&v);
            for &i in chunk {
                let (t, g) = cost_aware_elbo(&v, predictor, &data[i], cfg.alpha, &mut rng).map_err(fail)?;
                acc.add(&t);
                grad.add_scaled(&g, 1.0 / chunk.len() as f64);
            }
            adam.ascend(&mut v, &grad).map_err(fail)?;
        }
        trace.train.push(acc.scaled(1.0 / train_idx.len() as f64));
        trace.best_epoch = epoch;

        if let Some(es) = cfg.early_stopping.filter(|_| !val_rows.is_empty()) {
            let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000 ^ epoch as u64);
            let t = mean_elbo(&v, predictor, &val_rows, cfg.alpha, &mut vrng).map_err(fail)?;
            trace.val.push(t);
            if t.total > best.0 {
                best = (t.total, v.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= es.patience {
                    break;
                }
            }
        }
    }
    if !trace.val.is_empty() {
        let (i, _) = trace
            .val
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, t)| if t.total > acc.1 { (i, t.total) } else { acc });
        trace.best_epoch = i + 1;
        v = best.1;
    }
    Ok((v, trace))
}
