//! The three experiment recipes: width sweep on spectral targets, the
//! temporal-order comparison and attention-graph recovery on gravity data.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::records::{config_hash, ExperimentRecord, TimingRecord};
use super::{train, evaluate_mse, Result, Rnn, RnnConfig, TrainConfig, TrainError, TrainOutcome};
use crate::datasets::{
    apply_permutation, gen_gravity, gen_linear_functional, gen_target_form_dataset, gravity_graph, Dataset,
    FilterKind, GravityConfig, LinearFunctionalConfig, Permutation,
};
use crate::target::{Rank, TargetSpec};
use crate::tensor::{Activation, Tensor};
use crate::transformer::{FfResidual, ModelBudget, ModelOptions, Positional, Transformer};

/// Records plus the wall-clock side channel of one recipe run.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub records: Vec<ExperimentRecord>,
    pub timings: Vec<TimingRecord>,
}

impl RunOutput {
    fn extend(&mut self, other: RunOutput) {
        self.records.extend(other.records);
        self.timings.extend(other.timings);
    }
}

/// Thread count from `ATRL_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("ATRL_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Pearson correlation of two equally long samples; zero when either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Pearson correlation over the off-diagonal entries of two square matrices.
pub fn off_diagonal_pearson(a: &Tensor, b: &Tensor) -> f64 {
    let tau = a.shape()[0];
    let pick = |m: &Tensor| -> Vec<f64> {
        (0..tau * tau)
            .filter(|i| i / tau != i % tau)
            .map(|i| m.data()[i])
            .collect()
    };
    pearson(&pick(a), &pick(b))
}

fn timing(experiment: &str, hash: &str, seed: Option<u64>, labels: &BTreeMap<String, String>, start: Instant) -> TimingRecord {
    TimingRecord {
        experiment: experiment.into(),
        config_hash: hash.into(),
        seed,
        labels: labels.clone(),
        wall_seconds: start.elapsed().as_secs_f64(),
    }
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

// ---------------------------------------------------------------------------
// Width sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub ranks: Vec<Rank>,
    pub m_h: Vec<usize>,
    pub seeds: Vec<u64>,
    pub tau: usize,
    pub n: usize,
    pub m_v: usize,
    /// `m_ff = ff_per_head * m_h`.
    pub ff_per_head: usize,
    pub activation: Activation,
    pub ff_residual: FfResidual,
    pub positional: Positional,
    /// Seeds the coefficients of `F`.
    pub target_seed: u64,
    pub data_seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    /// Inclusive `m_h` range used for the slope fit on infinite-rank curves.
    pub slope_window: (usize, usize),
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.55, 1.0],
            ranks: vec![Rank::Finite(2), Rank::Finite(6), Rank::Infinite],
            m_h: vec![1, 2, 4, 8, 16],
            seeds: vec![0, 1, 2],
            tau: 8,
            n: 32,
            m_v: 8,
            ff_per_head: 16,
            activation: Activation::Sigmoid,
            ff_residual: FfResidual::All,
            positional: Positional::None,
            target_seed: 0,
            data_seed: 1,
            train_count: 10_000,
            test_count: 1000,
            slope_window: (2, 16),
            train: TrainConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn budget(&self, m_h: usize) -> ModelBudget {
        ModelBudget {
            n: self.n,
            h: 1,
            m_h,
            m_v: self.m_v,
            m_ff: self.ff_per_head * m_h,
            l: 2,
            tau: self.tau,
            d: 1,
            d_out: 1,
        }
    }

    pub fn options(&self) -> ModelOptions {
        ModelOptions {
            activation: self.activation,
            ff_residual: self.ff_residual.clone(),
            positional: self.positional,
            scale_scores: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.ranks.is_empty() || self.m_h.is_empty() || self.seeds.is_empty() {
            return Err(TrainError::Config("sweep grids must be non-empty".into()));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(TrainError::Config("sweep needs train and test samples".into()));
        }
        for &m in &self.m_h {
            self.budget(m).validate()?;
        }
        self.train.validate()
    }
}

fn alpha_label(alpha: f64) -> String {
    format!("{alpha}")
}

struct SweepCell {
    alpha: f64,
    rank: Rank,
    m_h: usize,
    seed: u64,
}

/// Trains one two-layer model per `(alpha, r, m_h, seed)` cell and records
/// best train MSE and final test MSE. For infinite rank, a `slope` record
/// (seed-median errors, fitted over `slope_window`) is added per alpha.
pub fn sweep_mh(cfg: &SweepConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = config_hash(cfg)?;
    let mut datasets = Vec::new();
    for &alpha in &cfg.alphas {
        for &rank in &cfg.ranks {
            let spec = TargetSpec::sweep_default(alpha, rank, cfg.tau, cfg.target_seed)?;
            let all = gen_target_form_dataset(&spec, cfg.train_count + cfg.test_count, cfg.data_seed)?;
            let train_set = all.slice(0..cfg.train_count);
            let test_set = all.slice(cfg.train_count..cfg.train_count + cfg.test_count);
            datasets.push(((alpha_label(alpha), rank), (train_set, test_set)));
        }
    }
    let data: BTreeMap<_, _> = datasets.into_iter().collect();

    let mut cells = Vec::new();
    for &alpha in &cfg.alphas {
        for &rank in &cfg.ranks {
            for &m_h in &cfg.m_h {
                for &seed in &cfg.seeds {
                    cells.push(SweepCell { alpha, rank, m_h, seed });
                }
            }
        }
    }
    let results: Vec<Result<(RunOutput, f64)>> = with_pool(|| {
        cells
            .par_iter()
            .map(|c| {
                let (train_set, test_set) = &data[&(alpha_label(c.alpha), c.rank)];
                sweep_cell(cfg, &hash, c, train_set, test_set)
            })
            .collect()
    })?;

    let mut out = RunOutput::default();
    let mut errors: BTreeMap<(String, Rank, usize), Vec<f64>> = BTreeMap::new();
    for (c, r) in cells.iter().zip(results) {
        let (cell_out, best) = r?;
        out.extend(cell_out);
        errors.entry((alpha_label(c.alpha), c.rank, c.m_h)).or_default().push(best);
    }
    for &alpha in &cfg.alphas {
        if !cfg.ranks.contains(&Rank::Infinite) {
            continue;
        }
        let (lo, hi) = cfg.slope_window;
        let pts: Vec<(f64, f64)> = cfg
            .m_h
            .iter()
            .filter(|&&m| m >= lo && m <= hi)
            .map(|&m| (m as f64, median(&errors[&(alpha_label(alpha), Rank::Infinite, m)])))
            .collect();
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        out.records.push(
            ExperimentRecord::new("sweep", &hash, None, "slope", log_log_slope(&x, &y))
                .label("alpha", alpha_label(alpha))
                .label("r", Rank::Infinite.label()),
        );
    }
    Ok(out)
}

fn sweep_cell(
    cfg: &SweepConfig,
    hash: &str,
    c: &SweepCell,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(RunOutput, f64)> {
    let start = Instant::now();
    let mut model = Transformer::new(cfg.budget(c.m_h), cfg.options(), c.seed)?;
    let outcome = train(&mut model, train_set, Some(test_set), &with_seed(&cfg.train, c.seed))?;
    let best = outcome.best_train_mse();
    let rec = |metric: &str, value: f64| {
        ExperimentRecord::new("sweep", hash, Some(c.seed), metric, value)
            .label("alpha", alpha_label(c.alpha))
            .label("r", c.rank.label())
            .label("m_h", c.m_h)
    };
    let records = vec![
        rec("train_mse", best),
        rec("test_mse", outcome.last().test_mse.unwrap_or(f64::NAN)),
    ];
    let t = timing("sweep", hash, Some(c.seed), &records[0].labels, start);
    log::info!(
        "sweep alpha={} r={} m_h={} seed={} train={best:e}",
        c.alpha,
        c.rank.label(),
        c.m_h,
        c.seed
    );
    Ok((RunOutput { records, timings: vec![t] }, best))
}

// ---------------------------------------------------------------------------
// Temporal-order comparison

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    pub tau: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub data_seed: u64,
    pub model_seed: u64,
    /// Left rotation applied to every input sequence for the permuted cells.
    pub rotate: usize,
    pub rnn: RnnConfig,
    pub transformer: ModelBudget,
    pub transformer_options: ModelOptions,
    pub train: TrainConfig,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            tau: 32,
            train_count: 10_000,
            test_count: 1000,
            data_seed: 0,
            model_seed: 0,
            rotate: 10,
            rnn: RnnConfig::default(),
            transformer: ModelBudget {
                n: 128,
                h: 4,
                m_h: 32,
                m_v: 32,
                m_ff: 128,
                l: 2,
                tau: 32,
                d: 1,
                d_out: 1,
            },
            transformer_options: ModelOptions::default(),
            train: TrainConfig {
                plateau: Some(super::Plateau::default()),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rnn,
    Transformer,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Transformer => "transformer",
        }
    }
}

pub fn order_label(kind: FilterKind) -> &'static str {
    match kind {
        FilterKind::Exponential => "with_order",
        FilterKind::Random => "without_order",
    }
}

/// Eight test-MSE records: `{rnn, transformer} x {with, without order} x
/// {original, permuted}`, each with `model`, `order`, `variant` labels.
pub fn run_temporal_order(cfg: &TemporalConfig) -> Result<RunOutput> {
    cfg.train.validate()?;
    if cfg.transformer.tau != cfg.tau || cfg.transformer.d != 1 || cfg.transformer.d_out != 1 {
        return Err(TrainError::Config("transformer budget must match (tau, 1, 1)".into()));
    }
    if cfg.rnn.d != 1 || cfg.rnn.d_out != 1 {
        return Err(TrainError::Config("rnn must map scalars to scalars".into()));
    }
    let hash = config_hash(cfg)?;
    let perm = Permutation::rotate_left(cfg.tau, cfg.rotate % cfg.tau.max(1));
    let mut jobs = Vec::new();
    for kind in [FilterKind::Exponential, FilterKind::Random] {
        let all = gen_linear_functional(&LinearFunctionalConfig {
            kind,
            tau: cfg.tau,
            count: cfg.train_count + cfg.test_count,
            seed: cfg.data_seed,
        })?;
        let permuted = apply_permutation(&all, &perm)?;
        for (variant, data) in [("original", all), ("permuted", permuted)] {
            let train_set = data.slice(0..cfg.train_count);
            let test_set = data.slice(cfg.train_count..cfg.train_count + cfg.test_count);
            for model in [ModelKind::Rnn, ModelKind::Transformer] {
                jobs.push((model, kind, variant, train_set.clone(), test_set.clone()));
            }
        }
    }
    let results: Vec<Result<RunOutput>> = with_pool(|| {
        jobs.par_iter()
            .map(|(model, kind, variant, train_set, test_set)| {
                let start = Instant::now();
                let tc = with_seed(&cfg.train, cfg.model_seed);
                let outcome: TrainOutcome = match model {
                    ModelKind::Rnn => {
                        let mut m = Rnn::new(cfg.rnn.clone(), cfg.model_seed)?;
                        train(&mut m, train_set, Some(test_set), &tc)?
                    }
                    ModelKind::Transformer => {
                        let mut m = Transformer::new(cfg.transformer, cfg.transformer_options.clone(), cfg.model_seed)?;
                        train(&mut m, train_set, Some(test_set), &tc)?
                    }
                };
                let last = outcome.last();
                let rec = |metric: &str, value: f64| {
                    ExperimentRecord::new("table1", &hash, Some(cfg.model_seed), metric, value)
                        .label("model", model.label())
                        .label("order", order_label(*kind))
                        .label("variant", variant)
                };
                let records = vec![
                    rec("test_mse", last.test_mse.unwrap_or(f64::NAN)),
                    rec("train_mse", last.train_mse),
                    rec("epochs", outcome.epochs_run as f64),
                ];
                log::info!(
                    "table1 {} {} {variant}: test {:e} after {} epochs",
                    model.label(),
                    order_label(*kind),
                    records[0].value,
                    outcome.epochs_run
                );
                let t = timing("table1", &hash, Some(cfg.model_seed), &records[0].labels, start);
                Ok(RunOutput { records, timings: vec![t] })
            })
            .collect()
    })?;
    let mut out = RunOutput::default();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gravity graph recovery

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GravityRecipe {
    pub data: GravityConfig,
    pub test_count: usize,
    pub test_seed: u64,
    pub model_seed: u64,
    pub budget: ModelBudget,
    pub options: ModelOptions,
    pub train: TrainConfig,
    pub layer: usize,
    pub head: usize,
    /// Number of held-out samples whose graphs are stored for heatmaps.
    pub heatmap_samples: usize,
}

impl Default for GravityRecipe {
    fn default() -> Self {
        Self {
            data: GravityConfig {
                count: 10_000,
                ..GravityConfig::default()
            },
            test_count: 100,
            test_seed: 1,
            model_seed: 0,
            budget: ModelBudget {
                n: 32,
                h: 1,
                m_h: 8,
                m_v: 8,
                m_ff: 64,
                l: 2,
                tau: 5,
                d: 3,
                d_out: 2,
            },
            options: ModelOptions {
                positional: Positional::None,
                ..ModelOptions::default()
            },
            train: TrainConfig {
                epochs: 200,
                ..TrainConfig::default()
            },
            layer: 1,
            head: 0,
            heatmap_samples: 3,
        }
    }
}

/// Mean off-diagonal correlation between model and gravity graphs over
/// every sample of `data`.
pub fn graph_agreement(model: &Transformer, data: &Dataset, eps: f64, layer: usize, head: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..data.count() {
        let truth = gravity_graph(data.x_of(i), data.tau, eps)?;
        let learned = model.attention_graph(&data.x_tensor(i), layer, head)?;
        total += off_diagonal_pearson(&truth, &learned);
    }
    Ok(total / data.count() as f64)
}

fn graph_records<'a>(
    hash: &'a str,
    seed: u64,
    metric: &str,
    sample: usize,
    g: &Tensor,
) -> impl Iterator<Item = ExperimentRecord> + 'a {
    let tau = g.shape()[0];
    let metric = metric.to_string();
    let values = g.data().to_vec();
    (0..tau * tau).map(move |i| {
        ExperimentRecord::new("gravity", hash, Some(seed), &metric, values[i])
            .label("sample", sample)
            .label("row", i / tau)
            .label("col", i % tau)
    })
}

/// Trains on gravity data and scores attention-graph recovery on held-out
/// samples against the inverse-square graph. Also scores the untrained
/// initialization and stores a few graphs for heatmaps.
pub fn run_gravity(cfg: &GravityRecipe) -> Result<(RunOutput, Transformer)> {
    cfg.train.validate()?;
    let b = cfg.budget;
    if b.tau != cfg.data.tau || b.d != 3 || b.d_out != 2 {
        return Err(TrainError::Config("gravity budget must be (tau, d=3, d_out=2)".into()));
    }
    let hash = config_hash(cfg)?;
    let start = Instant::now();
    let train_set = gen_gravity(&cfg.data)?;
    let test_set = gen_gravity(&GravityConfig {
        count: cfg.test_count,
        seed: cfg.test_seed,
        ..cfg.data.clone()
    })?;
    let mut model = Transformer::new(b, cfg.options.clone(), cfg.model_seed)?;
    let untrained = model.clone();
    let outcome = train(&mut model, &train_set, Some(&test_set), &with_seed(&cfg.train, cfg.model_seed))?;
    let eps = cfg.data.eps;
    let seed = cfg.model_seed;
    let mut records = vec![
        ExperimentRecord::new("gravity", &hash, Some(seed), "train_mse", outcome.last().train_mse),
        ExperimentRecord::new("gravity", &hash, Some(seed), "test_mse", outcome.last().test_mse.unwrap_or(f64::NAN)),
        ExperimentRecord::new("gravity", &hash, Some(seed), "target_variance", test_set.target_variance()),
    ];
    for (state, m) in [("trained", &model), ("untrained", &untrained)] {
        let a = graph_agreement(m, &test_set, eps, cfg.layer, cfg.head)?;
        records.push(
            ExperimentRecord::new("gravity", &hash, Some(seed), "agreement", a)
                .label("model", state)
                .label("layer", cfg.layer)
                .label("head", cfg.head),
        );
    }
    for layer in 0..b.l {
        for head in 0..b.h {
            let a = graph_agreement(&model, &test_set, eps, layer, head)?;
            records.push(
                ExperimentRecord::new("gravity", &hash, Some(seed), "agreement_by_head", a)
                    .label("layer", layer)
                    .label("head", head),
            );
        }
    }
    for i in 0..cfg.heatmap_samples.min(test_set.count()) {
        let truth = gravity_graph(test_set.x_of(i), b.tau, eps)?;
        let learned = model.attention_graph(&test_set.x_tensor(i), cfg.layer, cfg.head)?;
        records.extend(graph_records(&hash, seed, "truth_graph", i, &truth));
        records.extend(graph_records(&hash, seed, "learned_graph", i, &learned));
    }
    log::info!(
        "gravity: test mse {:e}, agreement {:.3} (untrained {:.3})",
        records[1].value,
        records[3].value,
        records[4].value
    );
    let t = timing("gravity", &hash, Some(seed), &BTreeMap::new(), start);
    Ok((RunOutput { records, timings: vec![t] }, model))
}

/// Test MSE of a trained model, for callers evaluating outside a recipe.
pub fn test_mse(model: &impl super::SequenceModel, data: &Dataset) -> Result<f64> {
    evaluate_mse(model, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [2.0, 4.0, 8.0, 16.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.1)).collect();
        assert!((log_log_slope(&x, &y) + 1.1).abs() < 1e-12);
    }

    #[test]
    fn pearson_limits() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 5.0]), 0.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
