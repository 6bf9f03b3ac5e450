//! Command-line front end: argument parsing, config files, and the `cmd_*`
//! entry points behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{generate, Dataset, GenSpec, Generated, LayerGen};
use crate::error::{Error, Result};
use crate::explain::{
    cf_opt_feature, cf_opt_latent, verify_with_oracle, ExplanationKind, ExplanationResult, ExplanationTask,
    Improvement, MdmmConfig, Proximity, DEFAULT_FEAS_TOL,
};
use crate::metrics::{
    batch_explain, reconstruction_error, sample_tasks, summarize, write_csv, BenchSetting, SearchSpace, SummaryRow,
    TaskRow,
};
use crate::optlayers::KnapsackGen;
use crate::pipeline::{init_predictor, train_spo, EarlyStopping, Pipeline, SpoTrainConfig, TrainTrace};
use crate::plausibility::{
    chi_mean, default_kappas, mass_table, verify_optimal_region, MassRow, RegionSearch, RegularizerKind,
    RegularizerSpec,
};
use crate::vae::{train_vae, Vae, VaeArch, VaeEarlyStopping, VaeTrace, VaeTrainConfig};

pub const DEFAULT_OUT_DIR: &str = "cfopt-out";

#[derive(Debug, Parser)]
#[command(name = "cfopt", version, about = "Counterfactual explanations for predict-then-optimize pipelines")]
pub struct Cli {
    /// Master seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "CFOPT_OUT_DIR")]
    pub out: Option<PathBuf>,
    /// TOML file with the subcommand's settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate a synthetic contextual dataset.
    Gen(GenArgs),
    /// Train a predictor with the SPO+ loss.
    Train(TrainArgs),
    /// Train a (cost-aware) VAE on a dataset's contexts.
    TrainVae(TrainVaeArgs),
    /// Compute one counterfactual explanation.
    Explain(ExplainArgs),
    /// Run batches of explanations and write CSV result tables.
    Bench(BenchArgs),
    /// Grid-search the optimal latent plausibility region.
    VerifyRegion(RegionArgs),
    /// Prior and empirical latent mass in hypersphere bands.
    Table1(Table1Args),
}

fn parse_kind(s: &str) -> std::result::Result<ExplanationKind, String> {
    match s {
        "relative" => Ok(ExplanationKind::Relative),
        "absolute" => Ok(ExplanationKind::Absolute),
        "epsilon" => Ok(ExplanationKind::Epsilon),
        _ => Err(format!("unknown explanation kind `{s}` (relative, absolute, epsilon)")),
    }
}

fn parse_space(s: &str) -> std::result::Result<SearchSpace, String> {
    match s {
        "feature" => Ok(SearchSpace::Feature),
        "latent" => Ok(SearchSpace::Latent),
        _ => Err(format!("unknown search space `{s}` (feature, latent)")),
    }
}

fn parse_proximity(s: &str) -> std::result::Result<Proximity, String> {
    match s {
        "feature" => Ok(Proximity::Feature),
        "latent" => Ok(Proximity::Latent),
        _ => Err(format!("unknown proximity `{s}` (feature, latent)")),
    }
}

fn parse_reg(s: &str) -> std::result::Result<RegularizerKind, String> {
    match s {
        "none" => Ok(RegularizerKind::None),
        "hypersphere" => Ok(RegularizerKind::Hypersphere),
        "loglik" => Ok(RegularizerKind::Loglik),
        _ => Err(format!("unknown regularizer `{s}` (none, hypersphere, loglik)")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n_x: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Use an N×N grid shortest-path layer.
    #[arg(long, conflicts_with = "knapsack")]
    pub grid_n: Option<usize>,
    /// Use a random multi-dimensional knapsack layer.
    #[arg(long)]
    pub knapsack: bool,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub noise_low: Option<f64>,
    #[arg(long)]
    pub noise_high: Option<f64>,
}

impl GenArgs {
    pub fn apply(&self, cfg: &mut GenSpec) {
        set(&mut cfg.n_x, self.n_x);
        set(&mut cfg.samples, self.samples);
        set(&mut cfg.noise_low, self.noise_low);
        set(&mut cfg.noise_high, self.noise_high);
        if let Some(n) = self.grid_n {
            cfg.layer = LayerGen::Grid { n };
        }
        if self.knapsack || self.items.is_some() || self.dims.is_some() {
            let mut k = match &cfg.layer {
                LayerGen::Knapsack(k) => *k,
                LayerGen::Grid { .. } => KnapsackGen::default(),
            };
            set(&mut k.items, self.items);
            set(&mut k.dims, self.dims);
            cfg.layer = LayerGen::Knapsack(k);
        }
    }
}

/// Predictor training settings shared by `train` and on-the-fly `bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// The first `train_rows` rows of the dataset are used for training.
    pub train_rows: usize,
    /// 1 is a linear model; each extra layer adds a ReLU layer of width n_x.
    pub depth: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// 0 trains full-batch.
    pub batch_size: usize,
    /// Early stopping patience; absent trains for all epochs.
    pub patience: Option<usize>,
    pub val_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            train_rows: 1000,
            depth: 1,
            epochs: 70,
            learning_rate: 3e-4,
            batch_size: 32,
            patience: None,
            val_fraction: 0.1,
        }
    }
}

impl TrainSection {
    fn spo(&self, seed: u64) -> SpoTrainConfig {
        SpoTrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            seed,
            early_stopping: self.patience.map(|patience| EarlyStopping {
                val_fraction: self.val_fraction,
                patience,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Dataset directory written by `gen`.
    pub data: Option<PathBuf>,
    pub train: TrainSection,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub train_rows: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if self.data.is_some() {
            cfg.data.clone_from(&self.data);
        }
        let t = &mut cfg.train;
        set(&mut t.train_rows, self.train_rows);
        set(&mut t.depth, self.depth);
        set(&mut t.epochs, self.epochs);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.batch_size, self.batch_size);
        if self.patience.is_some() {
            t.patience = self.patience;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub train_rows: usize,
    pub n_z: usize,
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: Option<usize>,
    pub val_fraction: f64,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            train_rows: 1000,
            n_z: 8,
            hidden: vec![32],
            alpha: 0.0,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 64,
            patience: Some(10),
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainVaeConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    /// Pipeline bundle whose predictor defines the cost-reconstruction term.
    pub pipeline: Option<PathBuf>,
    pub vae: VaeSection,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainVaeArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long)]
    pub train_rows: Option<usize>,
    #[arg(long)]
    pub n_z: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Weight of the cost-reconstruction term.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Train for all epochs without a validation split.
    #[arg(long)]
    pub no_early_stopping: bool,
}

impl TrainVaeArgs {
    pub fn apply(&self, cfg: &mut TrainVaeConfig) {
        if self.data.is_some() {
            cfg.data.clone_from(&self.data);
        }
        if self.pipeline.is_some() {
            cfg.pipeline.clone_from(&self.pipeline);
        }
        let v = &mut cfg.vae;
        set(&mut v.train_rows, self.train_rows);
        set(&mut v.n_z, self.n_z);
        set(&mut v.hidden, self.hidden.clone());
        set(&mut v.alpha, self.alpha);
        set(&mut v.epochs, self.epochs);
        set(&mut v.learning_rate, self.lr);
        set(&mut v.batch_size, self.batch_size);
        if self.patience.is_some() {
            v.patience = self.patience;
        }
        if self.no_early_stopping {
            v.patience = None;
        }
    }
}

/// MDMM settings shared by `explain` and `bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub gamma: f64,
    pub rho: f64,
    pub max_iter: usize,
    pub c_max: usize,
    pub u: f64,
    pub feas_tol: f64,
    pub regularizer: RegularizerKind,
    pub beta: f64,
    pub proximity: Proximity,
}

impl Default for SolverSection {
    fn default() -> Self {
        let m = MdmmConfig::default();
        Self {
            gamma: m.gamma,
            rho: m.rho,
            max_iter: m.max_iter,
            c_max: m.c_max,
            u: m.u,
            feas_tol: m.feas_tol,
            regularizer: RegularizerKind::None,
            beta: 1.0,
            proximity: m.proximity,
        }
    }
}

impl SolverSection {
    /// `n_z` is needed for the hypersphere radius.
    pub fn mdmm(&self, n_z: Option<usize>, record_trace: bool) -> Result<MdmmConfig> {
        let reg = match self.regularizer {
            RegularizerKind::None => RegularizerSpec::none(),
            RegularizerKind::Loglik => RegularizerSpec::loglik(self.beta)?,
            RegularizerKind::Hypersphere => {
                let n_z = n_z.ok_or_else(|| Error::Input("hypersphere regularizer requires a VAE".into()))?;
                RegularizerSpec::hypersphere(self.beta, n_z)?
            }
        };
        let cfg = MdmmConfig {
            gamma: self.gamma,
            rho: self.rho,
            max_iter: self.max_iter,
            c_max: self.c_max,
            u: self.u,
            reg,
            proximity: self.proximity,
            feas_tol: self.feas_tol,
            record_trace,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SolverArgs {
    /// Step size.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Damping of the quadratic constraint penalty.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Maximum number of iterations.
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Maximum number of consecutive non-improving feasible iterations.
    #[arg(long)]
    pub c_max: Option<usize>,
    /// Update tolerance in (0, 1).
    #[arg(long)]
    pub u: Option<f64>,
    #[arg(long)]
    pub feas_tol: Option<f64>,
    /// none, hypersphere or loglik.
    #[arg(long, value_parser = parse_reg)]
    pub regularizer: Option<RegularizerKind>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// feature or latent.
    #[arg(long, value_parser = parse_proximity)]
    pub proximity: Option<Proximity>,
}

impl SolverArgs {
    pub fn apply(&self, s: &mut SolverSection) {
        set(&mut s.gamma, self.gamma);
        set(&mut s.rho, self.rho);
        set(&mut s.max_iter, self.max_iter);
        set(&mut s.c_max, self.c_max);
        set(&mut s.u, self.u);
        set(&mut s.feas_tol, self.feas_tol);
        set(&mut s.regularizer, self.regularizer);
        set(&mut s.beta, self.beta);
        set(&mut s.proximity, self.proximity);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub seed: u64,
    pub pipeline: Option<PathBuf>,
    pub vae: Option<PathBuf>,
    /// Dataset supplying `row` and `alt_row`.
    pub data: Option<PathBuf>,
    pub row: Option<usize>,
    /// Explicit initial context (instead of `row`).
    pub context: Option<Vec<f64>>,
    pub kind: ExplanationKind,
    /// Alternative decision taken from this row's stored solution.
    pub alt_row: Option<usize>,
    /// Explicit alternative decision (instead of `alt_row`).
    pub y_alt: Option<Vec<u8>>,
    pub eps: f64,
    pub space: SearchSpace,
    /// Also write the per-iteration trace.
    pub trace: bool,
    pub solver: SolverSection,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline: None,
            vae: None,
            data: None,
            row: None,
            context: None,
            kind: ExplanationKind::Relative,
            alt_row: None,
            y_alt: None,
            eps: 1.0,
            space: SearchSpace::Feature,
            trace: false,
            solver: SolverSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Row of the dataset used as the initial context.
    #[arg(long)]
    pub row: Option<usize>,
    /// Initial context, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub context: Option<Vec<f64>>,
    /// relative, absolute or epsilon.
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<ExplanationKind>,
    #[arg(long)]
    pub alt_row: Option<usize>,
    /// Alternative decision as comma-separated 0/1 entries.
    #[arg(long, value_delimiter = ',')]
    pub y_alt: Option<Vec<u8>>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// feature or latent.
    #[arg(long, value_parser = parse_space)]
    pub space: Option<SearchSpace>,
    #[arg(long)]
    pub trace: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
}

impl ExplainArgs {
    pub fn apply(&self, cfg: &mut ExplainConfig) {
        for (slot, v) in [
            (&mut cfg.pipeline, &self.pipeline),
            (&mut cfg.vae, &self.vae),
            (&mut cfg.data, &self.data),
        ] {
            if v.is_some() {
                slot.clone_from(v);
            }
        }
        if self.row.is_some() {
            cfg.row = self.row;
            cfg.context = None;
        }
        if self.context.is_some() {
            cfg.context.clone_from(&self.context);
            cfg.row = None;
        }
        if self.alt_row.is_some() {
            cfg.alt_row = self.alt_row;
            cfg.y_alt = None;
        }
        if self.y_alt.is_some() {
            cfg.y_alt.clone_from(&self.y_alt);
            cfg.alt_row = None;
        }
        set(&mut cfg.kind, self.kind);
        set(&mut cfg.eps, self.eps);
        set(&mut cfg.space, self.space);
        cfg.trace |= self.trace;
        self.solver.apply(&mut cfg.solver);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Number of contextual features.
    NX,
    /// Predictor depth.
    Depth,
    /// Grid side length.
    GridN,
    /// Knapsack item count.
    Items,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            Self::NX => "n_x",
            Self::Depth => "depth",
            Self::GridN => "grid_n",
            Self::Items => "items",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seed: u64,
    /// With `pipeline`: the dataset whose last `test_rows` rows supply tasks.
    pub data: Option<PathBuf>,
    /// Trained pipeline; when absent, data is generated and a predictor
    /// trained for every sweep value.
    pub pipeline: Option<PathBuf>,
    pub vae: Option<PathBuf>,
    pub test_rows: usize,
    /// Tasks per explanation kind.
    pub tasks: usize,
    pub kinds: Vec<ExplanationKind>,
    /// ε values; every value is run on the same ε tasks.
    pub eps: Vec<f64>,
    pub spaces: Vec<SearchSpace>,
    pub solver: SolverSection,
    pub gen: GenSpec,
    pub train: TrainSection,
    pub sweep: Option<Sweep>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            pipeline: None,
            vae: None,
            test_rows: 1000,
            tasks: 100,
            kinds: vec![ExplanationKind::Relative, ExplanationKind::Absolute, ExplanationKind::Epsilon],
            eps: vec![1.0],
            spaces: vec![SearchSpace::Feature],
            solver: SolverSection::default(),
            gen: GenSpec::default(),
            train: TrainSection::default(),
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub test_rows: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Explanation kinds, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub kinds: Option<Vec<ExplanationKind>>,
    /// ε values, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Search spaces, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_space)]
    pub spaces: Option<Vec<SearchSpace>>,
    /// Sweep `param=v1,v2,...` with param one of n_x, depth, grid_n, items.
    #[arg(long)]
    pub sweep: Option<String>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub gen: GenArgs,
    #[arg(long)]
    pub train_rows: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

pub fn parse_sweep(s: &str) -> Result<Sweep> {
    let (name, vals) = s
        .split_once('=')
        .ok_or_else(|| Error::Input(format!("sweep `{s}` is not of the form param=v1,v2")))?;
    let param = match name.trim() {
        "n_x" => SweepParam::NX,
        "depth" => SweepParam::Depth,
        "grid_n" => SweepParam::GridN,
        "items" => SweepParam::Items,
        other => return Err(Error::Input(format!("unknown sweep parameter `{other}`"))),
    };
    let values = vals
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Input(format!("bad sweep value `{v}`")))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(Sweep { param, values })
}

impl BenchArgs {
    pub fn apply(&self, cfg: &mut BenchConfig) -> Result<()> {
        for (slot, v) in [
            (&mut cfg.data, &self.data),
            (&mut cfg.pipeline, &self.pipeline),
            (&mut cfg.vae, &self.vae),
        ] {
            if v.is_some() {
                slot.clone_from(v);
            }
        }
        set(&mut cfg.test_rows, self.test_rows);
        set(&mut cfg.tasks, self.tasks);
        set(&mut cfg.kinds, self.kinds.clone());
        set(&mut cfg.eps, self.eps.clone());
        set(&mut cfg.spaces, self.spaces.clone());
        if let Some(s) = &self.sweep {
            cfg.sweep = Some(parse_sweep(s)?);
        }
        self.solver.apply(&mut cfg.solver);
        self.gen.apply(&mut cfg.gen);
        set(&mut cfg.train.train_rows, self.train_rows);
        set(&mut cfg.train.depth, self.depth);
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.learning_rate, self.lr);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub n_z: usize,
    /// Weight of the region volume.
    pub eta: f64,
    pub grid_points: usize,
    pub radius_max: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            n_z: 64,
            eta: 1e-16,
            grid_points: 1001,
            radius_max: 10.0,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RegionArgs {
    #[arg(long)]
    pub n_z: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub radius_max: Option<f64>,
}

impl RegionArgs {
    pub fn apply(&self, cfg: &mut RegionConfig) {
        set(&mut cfg.n_z, self.n_z);
        set(&mut cfg.eta, self.eta);
        set(&mut cfg.grid_points, self.grid_points);
        set(&mut cfg.radius_max, self.radius_max);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Table1Config {
    pub seed: u64,
    /// Latent dimension for the prior column; taken from the VAE when given.
    pub n_z: usize,
    pub kappas: Vec<f64>,
    /// VAE bundle and dataset for the empirical column.
    pub vae: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Number of leading dataset rows to encode.
    pub rows: usize,
}

impl Default for Table1Config {
    fn default() -> Self {
        Self {
            seed: 0,
            n_z: 64,
            kappas: default_kappas(),
            vae: None,
            data: None,
            rows: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Table1Args {
    #[arg(long)]
    pub n_z: Option<usize>,
    /// Band half-widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub kappas: Option<Vec<f64>>,
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<usize>,
}

impl Table1Args {
    pub fn apply(&self, cfg: &mut Table1Config) {
        set(&mut cfg.n_z, self.n_z);
        set(&mut cfg.kappas, self.kappas.clone());
        if self.vae.is_some() {
            cfg.vae.clone_from(&self.vae);
        }
        if self.data.is_some() {
            cfg.data.clone_from(&self.data);
        }
        set(&mut cfg.rows, self.rows);
    }
}

/// Reads a TOML config, or the defaults when no file is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::format(p, e.to_string().trim_end()))
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a T,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `run.json` with the fully resolved configuration.
pub fn write_run_manifest<T: Serialize>(out: &Path, command: &str, config: &T) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join("run.json"),
        &RunManifest {
            tool: "cfopt",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
        },
    )
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Input(format!("missing {what} (set it in the config file or pass --{what})")))
}

fn train_rows(data: &Dataset, n: usize) -> Result<Dataset> {
    if n == 0 || n > data.len() {
        return Err(Error::Input(format!(
            "train_rows = {n} but the dataset has {} rows",
            data.len()
        )));
    }
    Ok(data.split_at(n).0)
}

fn last_rows(data: &Dataset, n: usize) -> Result<Dataset> {
    if n == 0 || n > data.len() {
        return Err(Error::Input(format!(
            "test_rows = {n} but the dataset has {} rows",
            data.len()
        )));
    }
    Ok(data.split_at(data.len() - n).1)
}

/// Generates a dataset into `out`.
pub fn cmd_gen(cfg: &GenSpec, out: &Path) -> Result<Generated> {
    let g = generate(cfg)?;
    g.save(out)?;
    write_run_manifest(out, "gen", cfg)?;
    Ok(g)
}

#[derive(Debug, Clone, Serialize)]
struct TraceCsvRow {
    epoch: usize,
    train_loss: f64,
    val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: Option<f64>,
    /// Mean relative regret on the rows not used for training.
    pub heldout_regret: Option<f64>,
    pub heldout_rows: usize,
}

fn mean_regret(p: &Pipeline, data: &Dataset) -> Result<Option<f64>> {
    if data.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (x, c) in data.contexts.iter().zip(&data.costs) {
        let y = p.decide(x)?.1.y;
        total += crate::metrics::relative_regret(&y, c, &p.layer)?;
    }
    Ok(Some(total / data.len() as f64))
}

/// Trains a pipeline on the leading rows of a dataset and writes the bundle,
/// its loss trace and a held-out regret summary into `out`.
pub fn cmd_train(cfg: &TrainConfig, out: &Path) -> Result<(Pipeline, TrainTrace, TrainSummary)> {
    let g = Generated::load(require(&cfg.data, "data")?)?;
    let train = train_rows(&g.data, cfg.train.train_rows)?;
    let rest = g.data.split_at(cfg.train.train_rows).1;
    let p = Pipeline::new(
        init_predictor(g.model.n_x, g.layer.dim(), cfg.train.depth.max(1), cfg.seed)?,
        g.layer.clone(),
    )?;
    let (p, trace) = train_spo(p, &train, &cfg.train.spo(cfg.seed))?;
    let summary = TrainSummary {
        epochs_run: trace.train_loss.len(),
        best_epoch: trace.best_epoch,
        final_train_loss: trace.train_loss.last().copied(),
        heldout_regret: mean_regret(&p, &rest)?,
        heldout_rows: rest.len(),
    };
    p.save(out)?;
    let rows: Vec<TraceCsvRow> = trace
        .train_loss
        .iter()
        .enumerate()
        .map(|(i, &l)| TraceCsvRow {
            epoch: i + 1,
            train_loss: l,
            val_loss: trace.val_loss.get(i).copied(),
        })
        .collect();
    write_csv(&out.join("train_trace.csv"), &rows)?;
    write_json(&out.join("summary.json"), &summary)?;
    write_run_manifest(out, "train", cfg)?;
    Ok((p, trace, summary))
}

#[derive(Debug, Clone, Serialize)]
struct VaeTraceRow {
    epoch: usize,
    recon: f64,
    kl: f64,
    cost_recon: f64,
    total: f64,
    val_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Means over rows not used for training, with encoder-mean
    /// reconstructions.
    pub heldout_reconstruction_error: Option<f64>,
    pub heldout_cost_reconstruction_error: Option<f64>,
    pub heldout_rows: usize,
}

/// Mean `‖φ(x) − φ(x̃)‖²` with `x̃` the encoder-mean reconstruction.
pub fn mean_cost_reconstruction(vae: &Vae, p: &Pipeline, xs: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for x in xs {
        let a = p.predict(x)?;
        let b = p.predict(&vae.reconstruct(x)?)?;
        total += a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    }
    Ok(total / xs.len().max(1) as f64)
}

/// Trains a VAE on the leading dataset rows against a frozen pipeline.
pub fn cmd_train_vae(cfg: &TrainVaeConfig, out: &Path) -> Result<(Vae, VaeTrace, VaeSummary)> {
    let g = Generated::load(require(&cfg.data, "data")?)?;
    let p = Pipeline::load(require(&cfg.pipeline, "pipeline")?)?;
    let v = &cfg.vae;
    let train = train_rows(&g.data, v.train_rows)?;
    let rest = g.data.split_at(v.train_rows).1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = VaeArch {
        n_x: g.model.n_x,
        n_z: v.n_z,
        hidden: v.hidden.clone(),
    };
    let vae = Vae::init(&arch, &mut rng)?;
    let tc = VaeTrainConfig {
        alpha: v.alpha,
        epochs: v.epochs,
        learning_rate: v.learning_rate,
        batch_size: v.batch_size,
        seed: cfg.seed,
        early_stopping: v.patience.map(|patience| VaeEarlyStopping {
            val_fraction: v.val_fraction,
            patience,
        }),
    };
    let (vae, trace) = train_vae(vae, &train.contexts, &p.predictor, &tc)?;
    let summary = VaeSummary {
        epochs_run: trace.train.len(),
        best_epoch: trace.best_epoch,
        heldout_reconstruction_error: if rest.is_empty() {
            None
        } else {
            let s: f64 = rest
                .contexts
                .iter()
                .map(|x| reconstruction_error(&vae, x))
                .sum::<Result<f64>>()?;
            Some(s / rest.len() as f64)
        },
        heldout_cost_reconstruction_error: if rest.is_empty() {
            None
        } else {
            Some(mean_cost_reconstruction(&vae, &p, &rest.contexts)?)
        },
        heldout_rows: rest.len(),
    };
    vae.save(out)?;
    let rows: Vec<VaeTraceRow> = trace
        .train
        .iter()
        .enumerate()
        .map(|(i, t)| VaeTraceRow {
            epoch: i + 1,
            recon: t.recon,
            kl: t.kl,
            cost_recon: t.cost_recon,
            total: t.total,
            val_total: trace.val.get(i).map(|v| v.total),
        })
        .collect();
    write_csv(&out.join("vae_trace.csv"), &rows)?;
    write_json(&out.join("summary.json"), &summary)?;
    write_run_manifest(out, "train-vae", cfg)?;
    Ok((vae, trace, summary))
}

/// The persisted outcome of `explain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub kind: ExplanationKind,
    pub space: SearchSpace,
    pub eps: Option<f64>,
    pub x0: Vec<f64>,
    pub y0: Vec<u8>,
    pub y_alt: Option<Vec<u8>>,
    pub feasible: bool,
    /// Exact re-check by enumeration; absent for layers too large to enumerate.
    pub valid: Option<bool>,
    pub x_best: Option<Vec<f64>>,
    pub z_best: Option<Vec<f64>>,
    pub loss_best: Option<f64>,
    pub h_best: Option<f64>,
    pub sq_distance: Option<f64>,
    /// Pipeline decision at `x_best`.
    pub y_best: Option<Vec<u8>>,
    pub iterations: usize,
    pub final_lambda: f64,
    pub improvements: Vec<Improvement>,
}

fn build_task(cfg: &ExplainConfig, p: &Pipeline) -> Result<ExplanationTask> {
    let data = match &cfg.data {
        Some(d) => Some(Generated::load(d)?.data),
        None => None,
    };
    let row = |i: usize, what: &str| -> Result<usize> {
        let d = data
            .as_ref()
            .ok_or_else(|| Error::Input(format!("{what} needs --data")))?;
        if i >= d.len() {
            return Err(Error::Input(format!("{what} {i} out of range (dataset has {} rows)", d.len())));
        }
        Ok(i)
    };
    let x0 = match (&cfg.context, cfg.row) {
        (Some(x), _) => x.clone(),
        (None, Some(i)) => data.as_ref().expect("checked").contexts[row(i, "row")?].clone(),
        (None, None) => return Err(Error::Input("give an initial context with --row or --context".into())),
    };
    match cfg.kind {
        ExplanationKind::Epsilon => ExplanationTask::epsilon(p, x0, cfg.eps),
        kind => {
            let y_alt = match (&cfg.y_alt, cfg.alt_row) {
                (Some(y), _) => y.clone(),
                (None, Some(j)) => {
                    let j = row(j, "alt_row")?;
                    let d = data.as_ref().expect("checked").clone().with_solutions(&p.layer)?;
                    d.solutions.expect("filled")[j].clone()
                }
                (None, None) => {
                    return Err(Error::Input(format!(
                        "{kind} explanation needs --alt-row or --y-alt"
                    )))
                }
            };
            if kind == ExplanationKind::Relative {
                ExplanationTask::relative(p, x0, y_alt)
            } else {
                ExplanationTask::absolute(p, x0, y_alt)
            }
        }
    }
}

/// Computes one explanation and writes `explanation.json` (plus
/// `trace.csv` when requested) into `out`.
pub fn cmd_explain(cfg: &ExplainConfig, out: &Path) -> Result<(ExplanationRecord, ExplanationResult)> {
    let p = Pipeline::load(require(&cfg.pipeline, "pipeline")?)?;
    let vae = match &cfg.vae {
        Some(v) => Some(Vae::load(v)?),
        None => None,
    };
    let task = build_task(cfg, &p)?;
    let mdmm = cfg.solver.mdmm(vae.as_ref().map(|v| v.n_z), cfg.trace)?;
    let res = match (cfg.space, &vae) {
        (SearchSpace::Feature, _) => cf_opt_feature(&task, &p, &mdmm)?,
        (SearchSpace::Latent, Some(v)) => cf_opt_latent(&task, &p, v, &mdmm)?,
        (SearchSpace::Latent, None) => return Err(Error::Input("latent search needs --vae".into())),
    };
    let valid = match &res.x_best {
        None => None,
        Some(x) => match verify_with_oracle(&task, &p, x, DEFAULT_FEAS_TOL.max(mdmm.feas_tol)) {
            Ok(v) => Some(v),
            Err(Error::Capacity(_)) => None,
            Err(e) => return Err(e),
        },
    };
    let y_best = match &res.x_best {
        Some(x) => Some(p.decide(x)?.1.y),
        None => None,
    };
    let record = ExplanationRecord {
        kind: task.kind,
        space: cfg.space,
        eps: task.eps,
        x0: task.x0.clone(),
        y0: task.y0.clone(),
        y_alt: task.y_alt.clone(),
        feasible: res.feasible,
        valid,
        x_best: res.x_best.clone(),
        z_best: res.z_best.clone(),
        loss_best: res.feasible.then_some(res.loss_best),
        h_best: res.h_best,
        sq_distance: res
            .x_best
            .as_ref()
            .map(|x| x.iter().zip(&task.x0).map(|(a, b)| (a - b) * (a - b)).sum()),
        y_best,
        iterations: res.iterations_run,
        final_lambda: res.final_lambda,
        improvements: res.improvements.clone(),
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("explanation.json"), &record)?;
    if let Some(t) = &res.trace {
        write_csv(&out.join("trace.csv"), t)?;
    }
    write_run_manifest(out, "explain", cfg)?;
    Ok((record, res))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutput {
    pub rows: Vec<TaskRow>,
    pub summary: Vec<SummaryRow>,
    /// Rows whose run ended in an error.
    pub failures: usize,
}

struct BenchUnit {
    label: String,
    pipeline: Pipeline,
    test: Dataset,
}

fn bench_units(cfg: &BenchConfig) -> Result<Vec<BenchUnit>> {
    if let Some(path) = &cfg.pipeline {
        if cfg.sweep.is_some() {
            return Err(Error::Input("a sweep trains its own pipelines; drop `pipeline`".into()));
        }
        let g = Generated::load(require(&cfg.data, "data")?)?;
        return Ok(vec![BenchUnit {
            label: "pipeline".into(),
            pipeline: Pipeline::load(path)?,
            test: last_rows(&g.data, cfg.test_rows)?,
        }]);
    }
    let values: Vec<Option<(SweepParam, usize)>> = match &cfg.sweep {
        None => vec![None],
        Some(s) => s.values.iter().map(|&v| Some((s.param, v))).collect(),
    };
    let mut units = Vec::new();
    for v in values {
        let mut gen = cfg.gen.clone();
        gen.seed = cfg.seed;
        let mut train = cfg.train.clone();
        let label = match v {
            None => "default".to_string(),
            Some((param, value)) => {
                match param {
                    SweepParam::NX => gen.n_x = value,
                    SweepParam::Depth => train.depth = value,
                    SweepParam::GridN => gen.layer = LayerGen::Grid { n: value },
                    SweepParam::Items => {
                        let mut k = match &gen.layer {
                            LayerGen::Knapsack(k) => *k,
                            LayerGen::Grid { .. } => KnapsackGen::default(),
                        };
                        k.items = value;
                        gen.layer = LayerGen::Knapsack(k);
                    }
                }
                format!("{}={value}", param.name())
            }
        };
        let g = generate(&gen)?;
        if train.train_rows + cfg.test_rows > g.data.len() {
            return Err(Error::Input(format!(
                "train_rows + test_rows = {} exceeds the {} generated samples",
                train.train_rows + cfg.test_rows,
                g.data.len()
            )));
        }
        let p = Pipeline::new(
            init_predictor(gen.n_x, g.layer.dim(), train.depth.max(1), cfg.seed)?,
            g.layer.clone(),
        )?;
        let (p, _) = train_spo(p, &train_rows(&g.data, train.train_rows)?, &train.spo(cfg.seed))?;
        units.push(BenchUnit {
            label,
            pipeline: p,
            test: last_rows(&g.data, cfg.test_rows)?,
        });
    }
    Ok(units)
}

fn kind_salt(k: ExplanationKind) -> u64 {
    match k {
        ExplanationKind::Relative => 0x7265_6c00,
        ExplanationKind::Absolute => 0x6162_7300,
        ExplanationKind::Epsilon => 0x6570_7300,
    }
}

fn fmt_eps(e: Option<f64>) -> String {
    e.map_or_else(|| "-".to_string(), |e| format!("{e}"))
}

/// Runs the configured explanation batches and writes `rows.csv` and
/// `summary.csv` into `out`. Per-task failures are recorded, not fatal.
pub fn cmd_bench(cfg: &BenchConfig, out: &Path) -> Result<BenchOutput> {
    if cfg.tasks == 0 || cfg.kinds.is_empty() || cfg.spaces.is_empty() {
        return Err(Error::Input("bench needs at least one task, kind and space".into()));
    }
    if cfg.kinds.contains(&ExplanationKind::Epsilon) && cfg.eps.is_empty() {
        return Err(Error::Input("epsilon tasks need at least one ε value".into()));
    }
    let vae = match &cfg.vae {
        Some(v) => Some(Vae::load(v)?),
        None => None,
    };
    let n_z = vae.as_ref().map(|v| v.n_z);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for unit in bench_units(cfg)? {
        for &kind in &cfg.kinds {
            let seed = cfg.seed ^ kind_salt(kind);
            let first_eps = (kind == ExplanationKind::Epsilon).then(|| cfg.eps[0]);
            let base = sample_tasks(&unit.pipeline, &unit.test, kind, first_eps, cfg.tasks, seed)?;
            let eps_values: Vec<Option<f64>> = if kind == ExplanationKind::Epsilon {
                cfg.eps.iter().map(|&e| Some(e)).collect()
            } else {
                vec![None]
            };
            for eps in eps_values {
                let tasks: Vec<ExplanationTask> = base
                    .iter()
                    .map(|t| ExplanationTask { eps, ..t.clone() })
                    .collect();
                for t in &tasks {
                    t.validate(&unit.pipeline)?;
                }
                let settings = cfg
                    .spaces
                    .iter()
                    .map(|&space| {
                        Ok(BenchSetting {
                            label: format!("{}|{}|eps={}|{}", unit.label, kind, fmt_eps(eps), space_name(space)),
                            space,
                            cfg: cfg.solver.mdmm(n_z, false)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let batch = batch_explain(&tasks, &settings, &unit.pipeline, vae.as_ref());
                for s in &settings {
                    let mine: Vec<TaskRow> = batch.iter().filter(|r| r.setting == s.label).cloned().collect();
                    summary.extend(summarize(&mine).into_iter().map(|r| SummaryRow::new(&s.label, r)));
                }
                rows.extend(batch);
            }
        }
    }
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_csv(&out.join("rows.csv"), &rows)?;
    write_csv(&out.join("summary.csv"), &summary)?;
    write_run_manifest(out, "bench", cfg)?;
    Ok(BenchOutput {
        rows,
        summary,
        failures,
    })
}

fn space_name(s: SearchSpace) -> &'static str {
    match s {
        SearchSpace::Feature => "feature",
        SearchSpace::Latent => "latent",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub n_z: usize,
    pub eta: f64,
    pub chi_mean: f64,
    pub inner: f64,
    pub outer: f64,
    pub objective: f64,
    pub step: f64,
}

/// Grid search for the optimal annulus; writes `region.json`.
pub fn cmd_verify_region(cfg: &RegionConfig, out: &Path) -> Result<RegionReport> {
    let RegionSearch {
        inner,
        outer,
        objective,
        step,
    } = verify_optimal_region(cfg.n_z, cfg.eta, cfg.grid_points, cfg.radius_max)?;
    let report = RegionReport {
        n_z: cfg.n_z,
        eta: cfg.eta,
        chi_mean: chi_mean(cfg.n_z)?,
        inner,
        outer,
        objective,
        step,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("region.json"), &report)?;
    write_run_manifest(out, "verify-region", cfg)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
struct MassCsvRow {
    kappa: f64,
    prior_pct: f64,
    empirical_pct: Option<f64>,
}

/// Prior mass per band and, given a VAE and data, the share of sampled
/// latents inside each band; writes `table1.csv`.
pub fn cmd_table1(cfg: &Table1Config, out: &Path) -> Result<Vec<MassRow>> {
    let (n_z, latents) = match (&cfg.vae, &cfg.data) {
        (Some(v), Some(d)) => {
            let vae = Vae::load(v)?;
            let g = Generated::load(d)?;
            let rows = train_rows(&g.data, cfg.rows)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let z = rows
                .contexts
                .iter()
                .map(|x| vae.sample_latent(x, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            (vae.n_z, Some(z))
        }
        (None, None) => (cfg.n_z, None),
        _ => return Err(Error::Input("the empirical column needs both vae and data".into())),
    };
    let table = mass_table(n_z, &cfg.kappas, latents.as_deref())?;
    let rows: Vec<MassCsvRow> = table
        .iter()
        .map(|r| MassCsvRow {
            kappa: r.kappa,
            prior_pct: 100.0 * r.prior,
            empirical_pct: r.empirical.map(|e| 100.0 * e),
        })
        .collect();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_csv(&out.join("table1.csv"), &rows)?;
    write_run_manifest(out, "table1", cfg)?;
    Ok(table)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

/// Dispatches a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Input(format!("cannot configure {n} threads: {e}")))?;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let cfg_path = cli.config.as_deref();
    match &cli.command {
        Command::Gen(a) => {
            let mut cfg: GenSpec = load_config(cfg_path)?;
            a.apply(&mut cfg);
            set(&mut cfg.seed, cli.seed);
            let g = cmd_gen(&cfg, &out)?;
            println!(
                "wrote {} samples (n_x = {}, n_y = {}) to {}",
                g.data.len(),
                g.model.n_x,
                g.model.n_y,
                out.display()
            );
        }
        Command::Train(a) => {
            let mut cfg: TrainConfig = load_config(cfg_path)?;
            a.apply(&mut cfg);
            set(&mut cfg.seed, cli.seed);
            let (_, _, s) = cmd_train(&cfg, &out)?;
            println!(
                "trained {} epochs; held-out relative regret {} over {} rows; bundle in {}",
                s.epochs_run,
                s.heldout_regret.map_or("-".into(), |r| format!("{r:.4}")),
                s.heldout_rows,
                out.display()
            );
        }
        Command::TrainVae(a) => {
            let mut cfg: TrainVaeConfig = load_config(cfg_path)?;
            a.apply(&mut cfg);
            set(&mut cfg.seed, cli.seed);
            let (_, _, s) = cmd_train_vae(&cfg, &out)?;
            println!(
                "trained {} epochs (best {}); held-out reconstruction {} cost reconstruction {}; bundle in {}",
                s.epochs_run,
                s.best_epoch,
                s.heldout_reconstruction_error.map_or("-".into(), |r| format!("{r:.4}")),
                s.heldout_cost_reconstruction_error.map_or("-".into(), |r| format!("{r:.4}")),
                out.display()
            );
        }
        Command::Explain(a) => {
            let mut cfg: ExplainConfig = load_config(cfg_path)?;
            a.apply(&mut cfg);
            set(&mut cfg.seed, cli.seed);
            let (rec, _) = cmd_explain(&cfg, &out)?;
            match (rec.feasible, rec.sq_distance) {
                (true, Some(d)) => println!(
                    "{} explanation found after {} iterations: squared distance {d:.6}, valid = {}",
                    rec.kind,
                    rec.iterations,
                    rec.valid.map_or("unchecked".into(), |v| v.to_string())
                ),
                _ => println!("no {} explanation found in {} iterations", rec.kind, rec.iterations),
            }
            if rec.valid == Some(false) {
                return Ok(1);
            }
        }
        Command::Bench(a) => {
            let mut cfg: BenchConfig = load_config(cfg_path)?;
            a.apply(&mut cfg)?;
            set(&mut cfg.seed, cli.seed);
            let o = cmd_bench(&cfg, &out)?;
            println!("{:<48} {:>6} {:>10} {:>12}", "setting", "tasks", "feasible", "iterations");
            let find = |label: &str, metric: &str| {
                o.summary
                    .iter()
                    .find(|s| s.setting == label && s.metric == metric)
                    .map(|s| s.mean)
            };
            let mut seen: Vec<&str> = Vec::new();
            for r in &o.rows {
                if seen.contains(&r.setting.as_str()) {
                    continue;
                }
                seen.push(&r.setting);
                let n = o.rows.iter().filter(|x| x.setting == r.setting).count();
                println!(
                    "{:<48} {:>6} {:>10} {:>12}",
                    r.setting,
                    n,
                    find(&r.setting, "feasible").map_or("-".into(), |v| format!("{:.2}", v)),
                    find(&r.setting, "iterations").map_or("-".into(), |v| format!("{:.1}", v)),
                );
            }
            println!("rows and summary written to {}", out.display());
            if o.failures > 0 {
                eprintln!("{} task(s) failed; see the error column of rows.csv", o.failures);
                return Ok(2);
            }
        }
        Command::VerifyRegion(a) => {
            let mut cfg: RegionConfig = load_config(cfg_path)?;
            a.apply(&mut cfg);
            let r = cmd_verify_region(&cfg, &out)?;
            println!(
                "n_z = {}, eta = {:e}: a* = {:.4}, b* = {:.4}, objective {:.6} (grid step {:.4}); C = {:.4}",
                r.n_z, r.eta, r.inner, r.outer, r.objective, r.step, r.chi_mean
            );
        }
        Command::Table1(a) => {
            let mut cfg: Table1Config = load_config(cfg_path)?;
            a.apply(&mut cfg);
            set(&mut cfg.seed, cli.seed);
            let rows = cmd_table1(&cfg, &out)?;
            println!("{:>6} {:>10} {:>14}", "kappa", "prior %", "empirical %");
            for r in rows {
                println!("{:>6} {:>10} {:>14}", r.kappa, pct(Some(r.prior)), pct(r.empirical));
            }
        }
    }
    Ok(0)
}
