//! The simplified transformer: multi-head attention with a residual term,
//! pointwise feed-forward blocks, a linear lift with optional per-timestep
//! offsets, and a per-timestep linear readout.
//!
//! Attention at time `t` is
//! `h(t) + sum_i W_o^i sum_s softmax_s[(W_Q^i h(t)) . (W_K^i h(s))] W_V^i h(s)`,
//! with no score scaling unless [`ModelOptions::scale_scores`] is set.
//!
//! Batches are time-major: inputs are `(batch, tau, d)` and outputs
//! `(batch, tau, d_out)`.

mod checkpoint;
mod skeleton;

pub use skeleton::{build_kolmogorov_skeleton, SkeletonOptions, SkeletonShape};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::EnvelopeError;
use crate::params::ParamStore;
use crate::tensor::{Activation, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("input shape {got:?} does not match expected {expected}")]
    InputShape { expected: String, got: Vec<usize> },
    #[error("{what} index {index} out of range (have {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("parameter {name}: {reason}")]
    BadParam { name: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Envelope(#[from] EnvelopeError),
    #[error("checkpoint options: {0}")]
    Options(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Widths and lengths that fix the hypothesis space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBudget {
    /// Hidden width.
    pub n: usize,
    /// Heads per attention block.
    pub h: usize,
    /// Query/key width.
    pub m_h: usize,
    /// Value width.
    pub m_v: usize,
    /// Feed-forward width.
    pub m_ff: usize,
    /// Number of blocks.
    pub l: usize,
    pub tau: usize,
    pub d: usize,
    pub d_out: usize,
}

impl ModelBudget {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n", self.n),
            ("h", self.h),
            ("m_h", self.m_h),
            ("m_v", self.m_v),
            ("m_ff", self.m_ff),
            ("l", self.l),
            ("tau", self.tau),
            ("d", self.d),
            ("d_out", self.d_out),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::InvalidBudget(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub(crate) fn as_array(&self) -> [usize; 9] {
        [
            self.n, self.h, self.m_h, self.m_v, self.m_ff, self.l, self.tau, self.d, self.d_out,
        ]
    }

    pub(crate) fn from_array(a: [usize; 9]) -> Self {
        Self {
            n: a[0],
            h: a[1],
            m_h: a[2],
            m_v: a[3],
            m_ff: a[4],
            l: a[5],
            tau: a[6],
            d: a[7],
            d_out: a[8],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    /// Inputs are only lifted by `A`; the model is permutation equivariant.
    None,
    /// Trainable per-timestep offset `e(t)`.
    #[default]
    Trainable,
    /// Fixed sinusoidal offsets.
    Sinusoidal,
}

/// Which feed-forward blocks add their input back.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfResidual {
    #[default]
    None,
    All,
    PerLayer(Vec<bool>),
}

impl FfResidual {
    pub fn at(&self, layer: usize) -> bool {
        match self {
            FfResidual::None => false,
            FfResidual::All => true,
            FfResidual::PerLayer(v) => v.get(layer).copied().unwrap_or(false),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub activation: Activation,
    pub ff_residual: FfResidual,
    pub positional: Positional,
    /// Divide scores by sqrt(m_h).
    pub scale_scores: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            activation: Activation::Sigmoid,
            ff_residual: FfResidual::None,
            positional: Positional::Trainable,
            scale_scores: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct HeadSlots {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub heads: Vec<HeadSlots>,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub embed: usize,
    pub pos: Option<usize>,
    pub layers: Vec<LayerSlots>,
    pub readout: usize,
    pub readout_bias: usize,
}

/// Parameter name of one attention matrix, e.g. `layer1.head0.W_Q`.
pub fn head_name(layer: usize, head: usize, which: &str) -> String {
    format!("layer{layer}.head{head}.{which}")
}

pub fn ff_name(layer: usize, which: &str) -> String {
    format!("layer{layer}.ff.{which}")
}

impl Layout {
    /// Resolves every parameter by name and checks its shape.
    fn resolve(budget: &ModelBudget, store: &ParamStore) -> Result<Self> {
        let b = budget;
        let find = |name: &str, shape: &[usize]| -> Result<usize> {
            let slot = store.slot(name).ok_or_else(|| ModelError::BadParam {
                name: name.to_string(),
                reason: "missing".into(),
            })?;
            let got = store.get(slot).value.shape();
            if got != shape {
                return Err(ModelError::BadParam {
                    name: name.to_string(),
                    reason: format!("shape {got:?}, expected {shape:?}"),
                });
            }
            Ok(slot)
        };
        let embed = find("embed.A", &[b.n, b.d])?;
        let pos = match store.slot("embed.e") {
            Some(_) => Some(find("embed.e", &[b.tau, b.n])?),
            None => None,
        };
        let mut layers = Vec::with_capacity(b.l);
        for li in 0..b.l {
            let heads = (0..b.h)
                .map(|hi| {
                    Ok(HeadSlots {
                        wq: find(&head_name(li, hi, "W_Q"), &[b.m_h, b.n])?,
                        wk: find(&head_name(li, hi, "W_K"), &[b.m_h, b.n])?,
                        wv: find(&head_name(li, hi, "W_V"), &[b.m_v, b.n])?,
                        wo: find(&head_name(li, hi, "W_o"), &[b.n, b.m_v])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerSlots {
                heads,
                w1: find(&ff_name(li, "W1"), &[b.m_ff, b.n])?,
                b1: find(&ff_name(li, "b1"), &[b.m_ff])?,
                w2: find(&ff_name(li, "W2"), &[b.n, b.m_ff])?,
                b2: find(&ff_name(li, "b2"), &[b.n])?,
            });
        }
        Ok(Self {
            embed,
            pos,
            layers,
            readout: find("readout.c", &[b.d_out, b.n])?,
            readout_bias: find("readout.b", &[b.d_out])?,
        })
    }
}

/// Tape handles for one attention head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Tape handles for one feed-forward block `W2 act(W1 h + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct FfVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Multi-head attention with the residual term. `h` is `(batch, tau, n)`.
/// Returns the block output and the post-softmax matrix of each head,
/// shaped `(batch, tau, tau)` with rows indexed by `t`.
pub fn attention_forward(
    tape: &mut Tape,
    heads: &[HeadVars],
    h: Var,
    scale_scores: bool,
) -> Result<(Var, Vec<Var>)> {
    let mut out = h;
    let mut probs = Vec::with_capacity(heads.len());
    for head in heads {
        let q = tape.linear(h, head.wq)?;
        let k = tape.linear(h, head.wk)?;
        let v = tape.linear(h, head.wv)?;
        let mut scores = tape.matmul_ext(q, k, false, true)?;
        if scale_scores {
            let m_h = *tape.shape(q).last().unwrap() as f64;
            scores = tape.scale(scores, 1.0 / m_h.sqrt())?;
        }
        let p = tape.softmax(scores)?;
        let pooled = tape.matmul(p, v)?;
        let z = tape.linear(pooled, head.wo)?;
        out = tape.add(out, z)?;
        probs.push(p);
    }
    Ok((out, probs))
}

/// Pointwise two-layer perceptron applied at every timestep.
pub fn ff_forward(
    tape: &mut Tape,
    ff: &FfVars,
    h: Var,
    activation: Activation,
    residual: bool,
) -> Result<Var> {
    let a = tape.linear(h, ff.w1)?;
    let a = tape.add_broadcast(a, ff.b1)?;
    let a = tape.activation(a, activation)?;
    let o = tape.linear(a, ff.w2)?;
    let o = tape.add_broadcast(o, ff.b2)?;
    if residual {
        Ok(tape.add(h, o)?)
    } else {
        Ok(o)
    }
}

/// Result of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `(batch, tau, d_out)`.
    pub output: Var,
    /// `attention[layer][head]`, each `(batch, tau, tau)`.
    pub attention: Vec<Vec<Var>>,
    /// Hidden state after each block, `(batch, tau, n)`.
    pub hidden: Vec<Var>,
    /// Attention output of each block before the skip term, `(batch, tau, n)`.
    pub attention_update: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    budget: ModelBudget,
    options: ModelOptions,
    params: ParamStore,
    layout: Layout,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub(crate) fn sinusoidal(tau: usize, n: usize) -> Tensor {
    Tensor::from_fn(&[tau, n], |i| {
        let (t, j) = ((i / n) as f64, i % n);
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / n as f64);
        if j % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

impl Transformer {
    /// Random initialization: weights are normal with standard deviation
    /// `1/sqrt(fan_in)`, biases start at zero.
    pub fn new(budget: ModelBudget, options: ModelOptions, seed: u64) -> Result<Self> {
        budget.validate()?;
        let b = budget;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let inv = |fan: usize| 1.0 / (fan as f64).sqrt();
        store.push("embed.A", normal_tensor(&mut rng, &[b.n, b.d], inv(b.d)), true);
        match options.positional {
            Positional::None => {}
            Positional::Trainable => {
                store.push("embed.e", normal_tensor(&mut rng, &[b.tau, b.n], 0.1), true);
            }
            Positional::Sinusoidal => {
                store.push("embed.e", sinusoidal(b.tau, b.n), false);
            }
        }
        for li in 0..b.l {
            for hi in 0..b.h {
                let std_o = inv(b.m_v * b.h);
                for (which, shape, std) in [
                    ("W_Q", [b.m_h, b.n], inv(b.n)),
                    ("W_K", [b.m_h, b.n], inv(b.n)),
                    ("W_V", [b.m_v, b.n], inv(b.n)),
                    ("W_o", [b.n, b.m_v], std_o),
                ] {
                    let w = normal_tensor(&mut rng, &shape, std);
                    store.push(head_name(li, hi, which), w, true);
                }
            }
            store.push(ff_name(li, "W1"), normal_tensor(&mut rng, &[b.m_ff, b.n], inv(b.n)), true);
            store.push(ff_name(li, "b1"), Tensor::zeros(&[b.m_ff]), true);
            store.push(ff_name(li, "W2"), normal_tensor(&mut rng, &[b.n, b.m_ff], inv(b.m_ff)), true);
            store.push(ff_name(li, "b2"), Tensor::zeros(&[b.n]), true);
        }
        store.push("readout.c", normal_tensor(&mut rng, &[b.d_out, b.n], inv(b.n)), true);
        store.push("readout.b", Tensor::zeros(&[b.d_out]), true);
        Self::from_parts(budget, options, store)
    }

    /// Assembles a model from an existing parameter store, checking every
    /// shape against the budget.
    pub fn from_parts(budget: ModelBudget, options: ModelOptions, params: ParamStore) -> Result<Self> {
        budget.validate()?;
        if let FfResidual::PerLayer(v) = &options.ff_residual {
            if v.len() != budget.l {
                return Err(ModelError::InvalidBudget(format!(
                    "ff_residual lists {} layers, budget has {}",
                    v.len(),
                    budget.l
                )));
            }
        }
        let layout = Layout::resolve(&budget, &params)?;
        Ok(Self {
            budget,
            options,
            params,
            layout,
        })
    }

    pub fn budget(&self) -> &ModelBudget {
        &self.budget
    }

    pub fn options(&self) -> &ModelOptions {
        &self.options
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Tape handles of one head, given the handles returned by
    /// [`ParamStore::bind`].
    pub fn head_vars(&self, vars: &[Var], layer: usize, head: usize) -> HeadVars {
        let s = self.layout.layers[layer].heads[head];
        HeadVars {
            wq: vars[s.wq],
            wk: vars[s.wk],
            wv: vars[s.wv],
            wo: vars[s.wo],
        }
    }

    pub fn ff_vars(&self, vars: &[Var], layer: usize) -> FfVars {
        let s = &self.layout.layers[layer];
        FfVars {
            w1: vars[s.w1],
            b1: vars[s.b1],
            w2: vars[s.w2],
            b2: vars[s.b2],
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let b = &self.budget;
        if shape.len() != 3 || shape[1] != b.tau || shape[2] != b.d {
            return Err(ModelError::InputShape {
                expected: format!("(batch, {}, {})", b.tau, b.d),
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Records the full forward pass. `vars` come from binding
    /// [`Self::params`] on the same tape; `x` is `(batch, tau, d)`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Forward> {
        self.check_input(tape.shape(x))?;
        let mut h = tape.linear(x, vars[self.layout.embed])?;
        if let Some(pos) = self.layout.pos {
            h = tape.add_broadcast(h, vars[pos])?;
        }
        let mut attention = Vec::with_capacity(self.budget.l);
        let mut hidden = Vec::with_capacity(self.budget.l);
        let mut updates = Vec::with_capacity(self.budget.l);
        for li in 0..self.budget.l {
            let heads: Vec<HeadVars> = (0..self.budget.h).map(|hi| self.head_vars(vars, li, hi)).collect();
            let (a, probs) = attention_forward(tape, &heads, h, self.options.scale_scores)?;
            updates.push(tape.sub(a, h)?);
            let ff = self.ff_vars(vars, li);
            h = ff_forward(tape, &ff, a, self.options.activation, self.options.ff_residual.at(li))?;
            attention.push(probs);
            hidden.push(h);
        }
        let y = tape.linear(h, vars[self.layout.readout])?;
        let output = tape.add_broadcast(y, vars[self.layout.readout_bias])?;
        Ok(Forward {
            output,
            attention,
            hidden,
            attention_update: updates,
        })
    }

    /// Evaluates the model on `(batch, tau, d)` or `(tau, d)` input without
    /// tracking gradients. The output has the matching rank.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let (batched, x3) = self.as_batch(x)?;
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let xv = tape.constant(x3);
        let fwd = self.forward(&mut tape, &vars, xv)?;
        let out = tape.value(fwd.output).clone();
        if batched {
            Ok(out)
        } else {
            Ok(out.reshape(&[self.budget.tau, self.budget.d_out])?)
        }
    }

    /// Post-softmax attention matrix `(tau, tau)` of one head for a single
    /// `(tau, d)` input; row `t` holds the weights over `s`.
    pub fn attention_graph(&self, x: &Tensor, layer: usize, head: usize) -> Result<Tensor> {
        if layer >= self.budget.l {
            return Err(ModelError::IndexOutOfRange {
                what: "layer",
                index: layer,
                len: self.budget.l,
            });
        }
        if head >= self.budget.h {
            return Err(ModelError::IndexOutOfRange {
                what: "head",
                index: head,
                len: self.budget.h,
            });
        }
        let (_, x3) = self.as_batch(x)?;
        if x3.shape()[0] != 1 {
            return Err(ModelError::InputShape {
                expected: format!("({}, {})", self.budget.tau, self.budget.d),
                got: x.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let xv = tape.constant(x3);
        let fwd = self.forward(&mut tape, &vars, xv)?;
        let tau = self.budget.tau;
        Ok(tape.value(fwd.attention[layer][head]).reshape(&[tau, tau])?)
    }

    fn as_batch(&self, x: &Tensor) -> Result<(bool, Tensor)> {
        match x.rank() {
            3 => Ok((true, x.clone())),
            2 => Ok((false, x.reshape(&[1, x.shape()[0], x.shape()[1]])?)),
            _ => Err(ModelError::InputShape {
                expected: format!("(batch, {}, {})", self.budget.tau, self.budget.d),
                got: x.shape().to_vec(),
            }),
        }
    }

    fn bind_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }
}

/// Free-function form of [`Transformer::attention_graph`].
pub fn extract_attention_graph(
    model: &Transformer,
    x: &Tensor,
    layer: usize,
    head: usize,
) -> Result<Tensor> {
    model.attention_graph(x, layer, head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelBudget {
        ModelBudget {
            n: 6,
            h: 2,
            m_h: 3,
            m_v: 2,
            m_ff: 5,
            l: 2,
            tau: 4,
            d: 2,
            d_out: 1,
        }
    }

    #[test]
    fn zero_budget_is_rejected() {
        let mut b = small();
        b.m_h = 0;
        assert!(matches!(
            Transformer::new(b, ModelOptions::default(), 0),
            Err(ModelError::InvalidBudget(_))
        ));
    }

    #[test]
    fn predict_shapes() {
        let m = Transformer::new(small(), ModelOptions::default(), 3).unwrap();
        let x = Tensor::from_fn(&[4, 2], |i| i as f64 * 0.1);
        assert_eq!(m.predict(&x).unwrap().shape(), &[4, 1]);
        let xb = Tensor::from_fn(&[3, 4, 2], |i| i as f64 * 0.01);
        assert_eq!(m.predict(&xb).unwrap().shape(), &[3, 4, 1]);
        let bad = Tensor::zeros(&[5, 2]);
        assert!(matches!(m.predict(&bad), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let m = Transformer::new(small(), ModelOptions::default(), 5).unwrap();
        let x = Tensor::from_fn(&[4, 2], |i| (i as f64).sin());
        let g = m.attention_graph(&x, 1, 1).unwrap();
        for t in 0..4 {
            let s: f64 = (0..4).map(|s| g.get(&[t, s])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            m.attention_graph(&x, 2, 0),
            Err(ModelError::IndexOutOfRange { what: "layer", .. })
        ));
    }

    #[test]
    fn tau_one_attention_is_scalar_one() {
        let mut b = small();
        b.tau = 1;
        let m = Transformer::new(b, ModelOptions::default(), 1).unwrap();
        let g = m.attention_graph(&Tensor::from_fn(&[1, 2], |i| i as f64), 0, 0).unwrap();
        assert_eq!(g.data(), &[1.0]);
    }

    #[test]
    fn sinusoidal_encoding_is_frozen() {
        let opts = ModelOptions {
            positional: Positional::Sinusoidal,
            ..ModelOptions::default()
        };
        let m = Transformer::new(small(), opts, 1).unwrap();
        let e = m.params().by_name("embed.e").unwrap();
        assert!(!e.trainable);
        assert_eq!(e.value.get(&[0, 1]), 1.0);
    }
}
