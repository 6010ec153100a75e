//! Mini-batch training, the recurrent baseline and the experiment recipes.

mod adam;
pub mod experiments;
pub mod records;
mod rnn;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use rnn::{Rnn, RnnConfig};

use crate::datasets::{DataError, Dataset};
use crate::params::ParamStore;
use crate::pod::PodError;
use crate::target::TargetError;
use crate::tensor::{Tape, TensorError, Var};
use crate::transformer::{ModelError, Transformer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss diverged at epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<ParamStore> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Pod(#[from] PodError),
    #[error("record store: {0}")]
    Records(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// A model mapping `(batch, tau, d)` to `(batch, tau, d_out)` on a tape.
pub trait SequenceModel {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward_batch(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var>;
}

impl SequenceModel for Transformer {
    fn params(&self) -> &ParamStore {
        Transformer::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        Transformer::params_mut(self)
    }

    fn forward_batch(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward(tape, vars, x)?.output)
    }
}

/// Stop once the best epoch loss has not improved by a relative `rel_tol`
/// for `window` consecutive epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Plateau {
    pub window: usize,
    pub rel_tol: f64,
}

impl Default for Plateau {
    fn default() -> Self {
        Self {
            window: 100,
            rel_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the shuffling stream.
    pub seed: u64,
    /// Full train/test evaluation every this many epochs (and after the last).
    pub eval_every: usize,
    pub plateau: Option<Plateau>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 2000,
            batch_size: 32,
            seed: 0,
            eval_every: 10,
            plateau: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be finite and >= 0", a.lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(TrainError::Config("adam betas must lie in [0, 1) and eps > 0".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(TrainError::Config("batch_size and eval_every must be positive".into()));
        }
        if let Some(p) = self.plateau {
            if p.window == 0 || !(p.rel_tol >= 0.0) {
                return Err(TrainError::Config("plateau window must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Entry at epoch 0 (before any update), then at each evaluation point.
    pub history: Vec<HistoryEntry>,
    pub epochs_run: usize,
    pub plateaued: bool,
}

impl TrainOutcome {
    pub fn last(&self) -> &HistoryEntry {
        self.history.last().expect("history holds the initial entry")
    }

    pub fn best_train_mse(&self) -> f64 {
        self.history.iter().map(|h| h.train_mse).fold(f64::INFINITY, f64::min)
    }
}

const EVAL_CHUNK: usize = 256;

fn check_data(model: &impl SequenceModel, data: &Dataset) -> Result<()> {
    data.validate()?;
    if data.count() == 0 {
        return Err(TrainError::Shape("dataset is empty".into()));
    }
    let probe = data.x_batch(&[0]);
    let mut tape = Tape::new();
    let vars = bind_constants(model.params(), &mut tape);
    let x = tape.constant(probe);
    let y = model.forward_batch(&mut tape, &vars, x)?;
    let shape = tape.shape(y);
    if shape != [1, data.tau, data.d_out] {
        return Err(TrainError::Shape(format!(
            "model output {shape:?} does not match targets (1, {}, {})",
            data.tau, data.d_out
        )));
    }
    Ok(())
}

fn bind_constants(params: &ParamStore, tape: &mut Tape) -> Vec<Var> {
    params.iter().map(|p| tape.constant(p.value.clone())).collect()
}

/// Mean squared error over every sample, time step and output dimension.
pub fn evaluate_mse(model: &impl SequenceModel, data: &Dataset) -> Result<f64> {
    let count = data.count();
    if count == 0 {
        return Err(TrainError::Shape("dataset is empty".into()));
    }
    let mut total = 0.0;
    for start in (0..count).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(count)).collect();
        let mut tape = Tape::new();
        let vars = bind_constants(model.params(), &mut tape);
        let x = tape.constant(data.x_batch(&idx));
        let y = model.forward_batch(&mut tape, &vars, x)?;
        let target = data.y_batch(&idx);
        total += tape
            .value(y)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / data.y.len() as f64)
}

fn is_divergence(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Tensor(TensorError::NonFinite { .. }) | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Trains `model` in place with shuffled mini-batches and Adam.
///
/// The outcome is a pure function of the initial parameters, the data and
/// `cfg`. A non-finite loss aborts with the parameters from the start of the
/// failing epoch.
pub fn train(
    model: &mut impl SequenceModel,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(model, train_set)?;
    if let Some(t) = test_set {
        check_data(model, t)?;
    }
    let eval = |m: &dyn Fn(&Dataset) -> Result<f64>, epoch| -> Result<HistoryEntry> {
        Ok(HistoryEntry {
            epoch,
            train_mse: m(train_set)?,
            test_mse: test_set.map(m).transpose()?,
        })
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam, model.params());
    let mut order: Vec<usize> = (0..train_set.count()).collect();
    let mut history = vec![eval(&|d| evaluate_mse(model, d), 0)?];
    let mut best = f64::INFINITY;
    let mut last_improvement = 0;
    let mut plateaued = false;
    let mut epoch = 0;

    while epoch < cfg.epochs {
        epoch += 1;
        let snapshot = model.params().clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            match step(model, &mut opt, train_set, chunk) {
                Ok(loss) => loss_sum += loss * chunk.len() as f64,
                Err(e) if is_divergence(&e) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        last_good: Box::new(snapshot),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let epoch_loss = loss_sum / order.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                last_good: Box::new(snapshot),
            });
        }
        if let Some(p) = cfg.plateau {
            if epoch_loss < best * (1.0 - p.rel_tol) {
                last_improvement = epoch;
            }
            best = best.min(epoch_loss);
            if epoch - last_improvement >= p.window {
                plateaued = true;
            }
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs || plateaued {
            history.push(eval(&|d| evaluate_mse(model, d), epoch)?);
        }
        if plateaued {
            break;
        }
    }
    log::debug!("trained {epoch} epochs, final {:?}", history.last());
    Ok(TrainOutcome {
        history,
        epochs_run: epoch,
        plateaued,
    })
}

fn step(model: &mut impl SequenceModel, opt: &mut Adam, data: &Dataset, idx: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let x = tape.constant(data.x_batch(idx));
    let target = tape.constant(data.y_batch(idx));
    let y = model.forward_batch(&mut tape, &vars, x)?;
    let loss = tape.mse(y, target)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item();
    let grads: Vec<_> = vars.iter().map(|&v| tape.grad(v)).collect();
    opt.step(model.params_mut(), &grads);
    Ok(value)
}
