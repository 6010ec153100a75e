//! Invariant suites run by `atrl verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::pod::{pod_samples, tail_norm, truncation_error, QuadratureGrid};
use crate::target::{make_spectral_g, Kernel, Rank};
use crate::tensor::{grad_check, Activation, Result as TResult, Tape, Tensor, Var};
use crate::training::{Rnn, RnnConfig, SequenceModel};
use crate::transformer::{build_kolmogorov_skeleton, head_name, ModelBudget, SkeletonOptions, SkeletonShape, ModelOptions, Positional, Transformer};

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub checks: usize,
    /// Largest observed deviation.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl SuiteResult {
    fn from_worst(name: &'static str, checks: usize, worst: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            passed: worst <= tolerance,
            checks,
            worst,
            tolerance,
            detail,
        }
    }

    fn failed(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: false,
            checks: 0,
            worst: f64::INFINITY,
            tolerance: 0.0,
            detail,
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Away from zero by at least `gap`, so kinks stay outside the step.
fn randn_gapped(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v.signum() * (v.abs() + gap)
    })
}

type Primitive = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Tensor>, fn(&mut Tape, &[Var]) -> TResult<Var>);

fn primitives() -> Vec<Primitive> {
    vec![
        ("matmul", |r| vec![randn(r, &[3, 4]), randn(r, &[4, 2])], |t, v| t.matmul(v[0], v[1])),
        ("matmul_batched", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[4, 2])], |t, v| t.matmul(v[0], v[1])),
        ("matmul_bt", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[2, 5, 4])], |t, v| {
            t.matmul_ext(v[0], v[1], false, true)
        }),
        ("matmul_at", |r| vec![randn(r, &[4, 3]), randn(r, &[2, 4, 2])], |t, v| {
            t.matmul_ext(v[0], v[1], true, false)
        }),
        ("linear", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[5, 4])], |t, v| t.linear(v[0], v[1])),
        ("add", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.add(v[0], v[1])),
        ("add_broadcast", |r| vec![randn(r, &[2, 3, 4]), randn(r, &[4])], |t, v| t.add_broadcast(v[0], v[1])),
        ("sub", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.sub(v[0], v[1])),
        ("mul", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.mul(v[0], v[1])),
        ("scale", |r| vec![randn(r, &[3, 4])], |t, v| t.scale(v[0], -1.7)),
        ("sigmoid", |r| vec![randn(r, &[3, 4])], |t, v| t.activation(v[0], Activation::Sigmoid)),
        ("tanh", |r| vec![randn(r, &[3, 4])], |t, v| t.activation(v[0], Activation::Tanh)),
        ("relu", |r| vec![randn_gapped(r, &[3, 4], 1e-3)], |t, v| t.activation(v[0], Activation::Relu)),
        ("cos", |r| vec![randn(r, &[3, 4])], |t, v| t.activation(v[0], Activation::Cos)),
        ("square", |r| vec![randn(r, &[3, 4])], |t, v| t.activation(v[0], Activation::Square)),
        ("exp", |r| vec![randn(r, &[3, 4])], |t, v| t.activation(v[0], Activation::Exp)),
        ("softmax", |r| vec![randn(r, &[2, 3, 5])], |t, v| t.softmax(v[0])),
        ("sum_axis", |r| vec![randn(r, &[2, 3, 4])], |t, v| t.sum_axis(v[0], 1)),
        ("sum", |r| vec![randn(r, &[3, 4])], |t, v| t.sum(v[0])),
        ("mean", |r| vec![randn(r, &[3, 4])], |t, v| t.mean(v[0])),
        ("mse", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.mse(v[0], v[1])),
        ("reshape", |r| vec![randn(r, &[3, 4])], |t, v| t.reshape(v[0], &[2, 6])),
        ("select", |r| vec![randn(r, &[2, 3, 4])], |t, v| t.select(v[0], 1, 2)),
        ("stack", |r| vec![randn(r, &[2, 4]), randn(r, &[2, 4])], |t, v| t.stack(&[v[0], v[1]], 1)),
    ]
}

/// Every tape primitive on `instances` random inputs each.
pub fn gradient_primitives(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut worst_op = "";
    let mut checks = 0;
    for (name, gen, f) in primitives() {
        for _ in 0..instances {
            match grad_check(f, &gen(&mut rng), GRAD_STEP) {
                Ok(e) => {
                    if e > worst {
                        worst = e;
                        worst_op = name;
                    }
                    checks += 1;
                }
                Err(e) => return SuiteResult::failed("gradient primitives", format!("{name}: {e}")),
            }
        }
    }
    SuiteResult::from_worst(
        "gradient primitives",
        checks,
        worst,
        GRAD_TOL,
        format!("worst op {worst_op}"),
    )
}

fn small_budget(positional: bool) -> (ModelBudget, ModelOptions) {
    let b = ModelBudget {
        n: 5,
        h: 2,
        m_h: 3,
        m_v: 2,
        m_ff: 4,
        l: 2,
        tau: 3,
        d: 2,
        d_out: 2,
    };
    let o = ModelOptions {
        positional: if positional { Positional::Trainable } else { Positional::None },
        ..ModelOptions::default()
    };
    (b, o)
}

/// Checks the gradient of a full forward pass with respect to every
/// parameter and the input.
pub fn model_gradient(model: &impl SequenceModel, x: &Tensor) -> TResult<f64> {
    let mut inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    inputs.push(x.clone());
    grad_check(
        |tape, vars| {
            let (params, x) = vars.split_at(vars.len() - 1);
            model
                .forward_batch(tape, params, x[0])
                .map_err(|e| crate::tensor::TensorError::InvalidShape {
                    op: "model",
                    shape: vec![],
                    reason: e.to_string(),
                })
        },
        &inputs,
        GRAD_STEP,
    )
}

/// Full two-layer transformer and recurrent baseline, `instances` each.
pub fn gradient_models(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (b, o) = small_budget(i % 2 == 0);
        let model = match Transformer::new(b, o, seed.wrapping_add(i as u64)) {
            Ok(m) => m,
            Err(e) => return SuiteResult::failed("gradient models", e.to_string()),
        };
        let x = randn(&mut rng, &[2, b.tau, b.d]);
        match model_gradient(&model, &x) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return SuiteResult::failed("gradient models", e.to_string()),
        }
        let rnn = Rnn::new(
            RnnConfig {
                hidden: 4,
                d: 2,
                d_out: 1,
                ..RnnConfig::default()
            },
            seed.wrapping_add(i as u64),
        )
        .expect("valid rnn config");
        match model_gradient(&rnn, &x) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return SuiteResult::failed("gradient models", e.to_string()),
        }
    }
    SuiteResult::from_worst("gradient models", 2 * instances, worst, GRAD_TOL, String::new())
}

fn zero_param(model: &mut Transformer, name: &str) {
    let p = model.params_mut().by_name_mut(name).expect("parameter exists");
    p.value = Tensor::zeros(p.value.shape());
}

/// `W_o = 0` gives an identity attention block, `W_Q = 0` gives uniform
/// attention, both exactly.
pub fn structural_identities(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (b, o) = small_budget(true);
        let mut model = Transformer::new(b, o, seed.wrapping_add(i as u64)).expect("valid budget");
        for h in 0..b.h {
            zero_param(&mut model, &head_name(0, h, "W_o"));
            zero_param(&mut model, &head_name(1, h, "W_Q"));
        }
        let x = randn(&mut rng, &[2, b.tau, b.d]);
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.params().iter().map(|p| tape.constant(p.value.clone())).collect();
        let xv = tape.constant(x);
        let fwd = match model.forward(&mut tape, &vars, xv) {
            Ok(f) => f,
            Err(e) => return SuiteResult::failed("structural identities", e.to_string()),
        };
        worst = worst.max(tape.value(fwd.attention_update[0]).data().iter().fold(0.0, |m, v| m.max(v.abs())));
        let uniform = 1.0 / b.tau as f64;
        for h in 0..b.h {
            let p = tape.value(fwd.attention[1][h]);
            worst = worst.max(p.data().iter().fold(0.0, |m, v| m.max((v - uniform).abs())));
        }
    }
    SuiteResult::from_worst("structural identities", instances, worst, 0.0, String::new())
}

/// `model(x o p) = model(x) o p` without positional encoding.
pub fn equivariance(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (mut b, o) = small_budget(false);
        b.tau = 5;
        let model = Transformer::new(b, o, seed.wrapping_add(i as u64)).expect("valid budget");
        let x = randn(&mut rng, &[b.tau, b.d]);
        let mut perm: Vec<usize> = (0..b.tau).collect();
        for k in (1..b.tau).rev() {
            perm.swap(k, rng.gen_range(0..=k));
        }
        let permute = |t: &Tensor, w: usize| {
            Tensor::new(
                t.shape().to_vec(),
                perm.iter().flat_map(|&s| t.data()[s * w..(s + 1) * w].to_vec()).collect(),
            )
            .expect("same shape")
        };
        let (y, yp) = match (model.predict(&x), model.predict(&permute(&x, b.d))) {
            (Ok(a), Ok(c)) => (a, c),
            (Err(e), _) | (_, Err(e)) => return SuiteResult::failed("equivariance", e.to_string()),
        };
        worst = worst.max(permute(&y, b.d_out).max_abs_diff(&yp));
    }
    SuiteResult::from_worst("equivariance", instances, worst, 1e-10, String::new())
}

/// Kernels `U diag(s) V^T` with grid-orthonormal factors and a prescribed
/// spectrum: rank-`r` truncation error must equal the spectral tail, and
/// power-law spectra must survive a decomposition round trip.
pub fn eckart_young(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 256;
    let grid = QuadratureGrid::unit(n).expect("valid grid");
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let rank = rng.gen_range(1..=8);
        let u = orthonormal_columns(&mut rng, n, rank, &grid);
        let v = orthonormal_columns(&mut rng, n, rank, &grid);
        let mut sigma: Vec<f64> = (0..rank).map(|_| rng.gen_range(0.1..2.0)).collect();
        sigma.sort_by(|a, b| b.total_cmp(a));
        let g = Tensor::from_fn(&[n, n], |i| {
            let (a, b) = (i / n, i % n);
            (0..rank).map(|k| sigma[k] * u[k][a] * v[k][b]).sum()
        });
        let fact = match pod_samples(&g, &grid) {
            Ok(f) => f,
            Err(e) => return SuiteResult::failed("eckart-young", e.to_string()),
        };
        for r in 0..=rank {
            worst = worst.max((truncation_error(&fact, r) - tail_norm(&sigma, r)).abs());
        }
    }
    let mut spectral: f64 = 0.0;
    for (alpha, rank) in [(1.0, Rank::Finite(6)), (0.55, Rank::Finite(2)), (1.0, Rank::Infinite)] {
        let expected = match Kernel::power_law(alpha, rank) {
            Kernel::Spectral { sigma, .. } => sigma,
            Kernel::Expr { .. } => unreachable!("power law is spectral"),
        };
        match make_spectral_g(alpha, rank, &grid) {
            Ok(f) => {
                for (k, s) in expected.iter().enumerate().take(rank.terms().min(16)) {
                    spectral = spectral.max((f.sigma[k] - s).abs());
                }
            }
            Err(e) => return SuiteResult::failed("eckart-young", e.to_string()),
        }
    }
    let passed = worst <= 1e-8 && spectral <= 1e-6;
    SuiteResult {
        name: "eckart-young",
        passed,
        checks: instances + 3,
        worst: worst.max(spectral),
        tolerance: 1e-8,
        detail: format!("truncation {worst:.2e}, spectral round trip {spectral:.2e} (tol 1e-6)"),
    }
}

/// Gram-Schmidt on Gaussian columns in the grid inner product.
pub fn orthonormal_columns(rng: &mut ChaCha8Rng, n: usize, k: usize, grid: &QuadratureGrid) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut c: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for q in &cols {
                let proj = grid.inner(&c, q);
                c.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = grid.inner(&c, &c).sqrt();
        if norm > 1e-8 {
            c.iter_mut().for_each(|a| *a /= norm);
            cols.push(c);
        }
    }
    cols
}

/// The assembled skeleton has identity first-layer attention, uniform
/// second-layer attention and layer-2 attention outputs whose update is the
/// same at every time step.
pub fn skeleton_identities(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (tau, d) = (2 + i % 2, 1);
        let shape = SkeletonShape::new(tau, d);
        let budget = shape.budget(tau, d, 1, 2, 8);
        let model = match build_kolmogorov_skeleton(budget, &SkeletonOptions::default(), seed.wrapping_add(i as u64)) {
            Ok(m) => m,
            Err(e) => return SuiteResult::failed("skeleton identities", e.to_string()),
        };
        let x = Tensor::from_fn(&[2, tau, d], |_| rng.gen());
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.params().iter().map(|p| tape.constant(p.value.clone())).collect();
        let xv = tape.constant(x);
        let fwd = match model.forward(&mut tape, &vars, xv) {
            Ok(f) => f,
            Err(e) => return SuiteResult::failed("skeleton identities", e.to_string()),
        };
        worst = worst.max(tape.value(fwd.attention_update[0]).data().iter().fold(0.0, |m, v| m.max(v.abs())));
        let uniform = 1.0 / tau as f64;
        worst = worst.max(
            tape.value(fwd.attention[1][0])
                .data()
                .iter()
                .fold(0.0, |m, v| m.max((v - uniform).abs())),
        );
        let upd = tape.value(fwd.attention_update[1]);
        let n = budget.n;
        for bi in 0..2 {
            let base = bi * tau * n;
            for t in 1..tau {
                for j in 0..n {
                    let a = upd.data()[base + j];
                    let c = upd.data()[base + t * n + j];
                    worst = worst.max((a - c).abs() / a.abs().max(1.0));
                }
            }
        }
    }
    SuiteResult::from_worst("skeleton identities", instances, worst, 1e-12, String::new())
}

/// Every suite with its default instance count.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        gradient_primitives(20, seed),
        gradient_models(20, seed),
        structural_identities(20, seed),
        equivariance(50, seed),
        eckart_young(20, seed),
        skeleton_identities(10, seed),
    ]
}
