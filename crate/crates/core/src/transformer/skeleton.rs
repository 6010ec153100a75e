//! Two-layer parameterization that mirrors the Kolmogorov-style
//! construction.
//!
//! Hidden coordinates split into two blocks of width `m_v = g * tau` with
//! `g = 2 tau d + 1`: the F-block `[0, m_v)` receives pointwise features from
//! the first feed-forward network, the P-block `[m_v, 2 m_v)` carries the
//! shifted input `x(t) + b_t` and later the pooled features.
//!
//! Layer 1 has `W_o = 0`, so its attention is the identity. Layer 2 has
//! `W_Q = 0`, so every attention row is uniform; its `W_V` reads the F-block
//! and `W_o = tau * [0; I]` writes the sum over `s` into the P-block. The
//! first feed-forward block is residual, the second is not, and the readout
//! sums the first `g` coordinates. Only the two feed-forward networks train.

use serde::{Deserialize, Serialize};

use super::{ff_name, head_name, FfResidual, ModelBudget, ModelError, ModelOptions, Positional, Result, Transformer};
use crate::params::ParamStore;
use crate::tensor::{Activation, Tensor};

/// Forced dimensions for a given sequence length and input width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkeletonShape {
    /// Group size `2 tau d + 1`.
    pub g: usize,
    /// Value width `g * tau`.
    pub m_v: usize,
    /// Hidden width `2 tau (2 tau d + 1)`.
    pub n: usize,
}

impl SkeletonShape {
    pub fn new(tau: usize, d: usize) -> Self {
        let g = 2 * tau * d + 1;
        Self {
            g,
            m_v: g * tau,
            n: 2 * tau * g,
        }
    }

    /// A budget with the forced fields filled in.
    pub fn budget(&self, tau: usize, d: usize, d_out: usize, m_h: usize, m_ff: usize) -> ModelBudget {
        ModelBudget {
            n: self.n,
            h: 1,
            m_h,
            m_v: self.m_v,
            m_ff,
            l: 2,
            tau,
            d,
            d_out,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkeletonOptions {
    pub activation: Activation,
    /// Per-timestep shifts `b_1..b_tau`; `None` uses `b_t = 2t` (0-based),
    /// which keeps the shifted copies of `[0, 1]` disjoint.
    pub shifts: Option<Vec<f64>>,
}

impl Default for SkeletonOptions {
    fn default() -> Self {
        Self {
            activation: Activation::Sigmoid,
            shifts: None,
        }
    }
}

pub fn build_kolmogorov_skeleton(budget: ModelBudget, opts: &SkeletonOptions, seed: u64) -> Result<Transformer> {
    budget.validate()?;
    let shape = SkeletonShape::new(budget.tau, budget.d);
    let mismatch = |what: &str, want: usize, got: usize| {
        ModelError::InvalidBudget(format!("skeleton needs {what} = {want}, got {got}"))
    };
    if budget.l != 2 {
        return Err(mismatch("l", 2, budget.l));
    }
    if budget.h != 1 {
        return Err(mismatch("h", 1, budget.h));
    }
    if budget.n != shape.n {
        return Err(mismatch("n", shape.n, budget.n));
    }
    if budget.m_v != shape.m_v {
        return Err(mismatch("m_v", shape.m_v, budget.m_v));
    }
    let (tau, d, n, m_v) = (budget.tau, budget.d, budget.n, budget.m_v);
    let shifts = match &opts.shifts {
        Some(s) if s.len() != tau => {
            return Err(ModelError::InvalidBudget(format!(
                "{} shifts given for tau = {tau}",
                s.len()
            )))
        }
        Some(s) => s.clone(),
        None => (0..tau).map(|t| 2.0 * t as f64).collect(),
    };

    let options = ModelOptions {
        activation: opts.activation,
        ff_residual: FfResidual::PerLayer(vec![true, false]),
        positional: Positional::Trainable,
        scale_scores: false,
    };
    // Start from a random model so the feed-forward blocks get the usual
    // initialization, then overwrite and freeze everything else.
    let random = Transformer::new(budget, options.clone(), seed)?;
    let mut store: ParamStore = random.params().clone();

    let mut set = |name: &str, value: Tensor, trainable: bool| {
        let p = store.by_name_mut(name).expect("layout has every name");
        p.value = value;
        p.trainable = trainable;
    };
    set(
        "embed.A",
        Tensor::from_fn(&[n, d], |i| if i / d == m_v + i % d { 1.0 } else { 0.0 }),
        false,
    );
    set(
        "embed.e",
        Tensor::from_fn(&[tau, n], |i| {
            let (t, j) = (i / n, i % n);
            if (m_v..m_v + d).contains(&j) {
                shifts[t]
            } else {
                0.0
            }
        }),
        false,
    );
    let m_h = budget.m_h;
    for which in ["W_Q", "W_K"] {
        set(&head_name(0, 0, which), Tensor::zeros(&[m_h, n]), false);
        set(&head_name(1, 0, which), Tensor::zeros(&[m_h, n]), false);
    }
    set(&head_name(0, 0, "W_V"), Tensor::zeros(&[m_v, n]), false);
    set(&head_name(0, 0, "W_o"), Tensor::zeros(&[n, m_v]), false);
    set(
        &head_name(1, 0, "W_V"),
        Tensor::from_fn(&[m_v, n], |i| if i / n == i % n { 1.0 } else { 0.0 }),
        false,
    );
    set(
        &head_name(1, 0, "W_o"),
        Tensor::from_fn(&[n, m_v], |i| {
            if i / m_v == m_v + i % m_v {
                tau as f64
            } else {
                0.0
            }
        }),
        false,
    );
    let g = shape.g;
    let d_out = budget.d_out;
    set(
        "readout.c",
        Tensor::from_fn(&[d_out, n], |i| if i % n < g { 1.0 } else { 0.0 }),
        false,
    );
    set("readout.b", Tensor::zeros(&[d_out]), false);
    debug_assert!(store.by_name(&ff_name(0, "W1")).unwrap().trainable);
    Transformer::from_parts(budget, options, store)
}
