//! One-layer recurrent baseline `h(t) = act(W_in x(t) + W_rec h(t-1) + b)`,
//! `y(t) = W_out h(t) + b_out`, with `h(0) = 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SequenceModel, TrainError};
use crate::params::ParamStore;
use crate::tensor::{Activation, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RnnConfig {
    pub hidden: usize,
    pub d: usize,
    pub d_out: usize,
    pub activation: Activation,
    /// Standard deviation of `W_rec` entries times `sqrt(hidden)`, roughly
    /// the initial spectral radius.
    pub recurrent_scale: f64,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            d: 1,
            d_out: 1,
            activation: Activation::Identity,
            recurrent_scale: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rnn {
    cfg: RnnConfig,
    params: ParamStore,
}

const W_IN: usize = 0;
const W_REC: usize = 1;
const B: usize = 2;
const W_OUT: usize = 3;
const B_OUT: usize = 4;

impl Rnn {
    pub fn new(cfg: RnnConfig, seed: u64) -> Result<Self, TrainError> {
        if cfg.hidden == 0 || cfg.d == 0 || cfg.d_out == 0 {
            return Err(TrainError::Config("rnn widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| dist.sample(&mut rng))
        };
        let h = cfg.hidden;
        let mut params = ParamStore::new();
        params.push("rnn.W_in", normal(&[h, cfg.d], 1.0 / (cfg.d as f64).sqrt()), true);
        params.push("rnn.W_rec", normal(&[h, h], cfg.recurrent_scale / (h as f64).sqrt()), true);
        params.push("rnn.b", Tensor::zeros(&[h]), true);
        params.push("rnn.W_out", normal(&[cfg.d_out, h], 1.0 / (h as f64).sqrt()), true);
        params.push("rnn.b_out", Tensor::zeros(&[cfg.d_out]), true);
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &RnnConfig {
        &self.cfg
    }

    /// Forward pass for `(batch, tau, d)` input, returning
    /// `(batch, tau, d_out)`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, TrainError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.d {
            return Err(TrainError::Shape(format!(
                "rnn expects (batch, tau, {}), got {shape:?}",
                self.cfg.d
            )));
        }
        let tau = shape[1];
        let mut h: Option<Var> = None;
        let mut outs = Vec::with_capacity(tau);
        for t in 0..tau {
            let xt = tape.select(x, 1, t)?;
            let mut a = tape.linear(xt, vars[W_IN])?;
            if let Some(prev) = h {
                let r = tape.linear(prev, vars[W_REC])?;
                a = tape.add(a, r)?;
            }
            a = tape.add_broadcast(a, vars[B])?;
            let ht = if self.cfg.activation == Activation::Identity {
                a
            } else {
                tape.activation(a, self.cfg.activation)?
            };
            let y = tape.linear(ht, vars[W_OUT])?;
            outs.push(tape.add_broadcast(y, vars[B_OUT])?);
            h = Some(ht);
        }
        Ok(tape.stack(&outs, 1)?)
    }
}

impl SequenceModel for Rnn {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward_batch(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, TrainError> {
        self.forward(tape, vars, x)
    }
}
