use atrl::pod::{pod_samples, QuadratureGrid};
use atrl::target::{
    complexity_measures, eval_target, make_spectral_g, Basis, Expr, Kernel, Rank, TargetError, TargetSpec, UnaryOp,
};
use atrl::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq(values: &[f64]) -> Tensor {
    Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
}

fn random_seq(tau: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[tau, 1], |_| rng.gen::<f64>())
}

fn spectrum(g: &Kernel) -> &[f64] {
    match g {
        Kernel::Spectral { sigma, .. } => sigma,
        Kernel::Expr { .. } => panic!("not spectral"),
    }
}

// Straight-line evaluation that shares no code with the library: its own
// tree walk, cosine sum and softmax.
fn walk(e: &Expr, v: &[f64]) -> f64 {
    match e {
        Expr::Const { value } => *value,
        Expr::Var { index } => v[*index],
        Expr::Add { args } => args.iter().map(|a| walk(a, v)).sum(),
        Expr::Mul { args } => args.iter().map(|a| walk(a, v)).product(),
        Expr::Unary { func, arg } => {
            let a = walk(arg, v);
            match func {
                UnaryOp::Neg => -a,
                UnaryOp::Sigmoid => 1.0 / (1.0 + (-a).exp()),
                UnaryOp::Tanh => a.tanh(),
                UnaryOp::Sin => a.sin(),
                UnaryOp::Cos => a.cos(),
                UnaryOp::Exp => a.exp(),
                UnaryOp::Square => a * a,
            }
        }
    }
}

fn reference_eval(spec: &TargetSpec, x: &[f64]) -> Vec<f64> {
    let tau = spec.tau;
    let sigma = spectrum(&spec.g);
    let kernel = |u: f64, v: f64| {
        let mut acc = 0.0;
        for (k, s) in sigma.iter().enumerate() {
            let w = (k + 1) as f64 * std::f64::consts::PI;
            acc += s * 2.0 * (w * u).cos() * (w * v).cos();
        }
        acc
    };
    let mut out = Vec::new();
    for t in 0..tau {
        let scores: Vec<f64> = (0..tau).map(|s| kernel(x[t], x[s])).collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = e.iter().sum();
        let mut z = vec![0.0; spec.rho.len()];
        for s in 0..tau {
            for (j, r) in spec.rho.iter().enumerate() {
                z[j] += e[s] / total * walk(r, &[x[s]]);
            }
        }
        out.push(walk(&spec.f, &z));
    }
    out
}

#[test]
fn spectral_kernel_examples() {
    let s = spectrum(&Kernel::power_law(1.0, Rank::Finite(2))).to_vec();
    assert_eq!(&s[..3], &[1.0, 0.5, 0.0]);
    let s = spectrum(&Kernel::power_law(0.55, Rank::Finite(6))).to_vec();
    assert_eq!(s[5], 6f64.powf(-0.55));
    assert_eq!(s[6], 0.0);
    let s = spectrum(&Kernel::power_law(0.55, Rank::Infinite)).to_vec();
    assert_eq!(s.len(), 64);
    assert!(s.iter().all(|&v| v > 0.0));
}

#[test]
fn spectral_factorization_is_orthonormal_and_round_trips() {
    let grid = QuadratureGrid::unit(256).unwrap();
    let f = make_spectral_g(0.55, Rank::Finite(6), &grid).unwrap();
    assert!(f.orthonormality_error() < 1e-8);
    let back = pod_samples(&f.reconstruct(64), &grid).unwrap();
    for k in 0..6 {
        assert!((back.sigma[k] - ((k + 1) as f64).powf(-0.55)).abs() < 1e-6);
    }
}

#[test]
fn alpha_outside_regime_is_rejected() {
    let grid = QuadratureGrid::unit(16).unwrap();
    for alpha in [0.5, 0.3, f64::NAN] {
        assert!(matches!(
            make_spectral_g(alpha, Rank::Finite(2), &grid),
            Err(TargetError::AlphaOutOfRange(_))
        ));
    }
    assert!(TargetSpec::sweep_default(0.4, Rank::Infinite, 4, 0).is_err());
    assert!(make_spectral_g(1.0, Rank::Finite(0), &grid).is_err());
}

fn uniform_spec(tau: usize) -> TargetSpec {
    TargetSpec {
        tau,
        d: 1,
        f: Expr::var(0),
        rho: vec![Expr::unary(UnaryOp::Square, Expr::var(0))],
        g: Kernel::Expr {
            expr: Expr::constant(0.0),
        },
    }
}

#[test]
fn zero_kernel_averages_rho() {
    let spec = uniform_spec(5);
    let x = random_seq(5, 1);
    let mean: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 5.0;
    for h in eval_target(&spec, &x).unwrap() {
        assert!((h - mean).abs() < 1e-15);
    }
    let g = spec.ground_truth_graph(&x).unwrap();
    assert!(g.data().iter().all(|&p| p == 0.2));
}

#[test]
fn single_step_applies_f_to_rho() {
    let spec = TargetSpec::sweep_default(1.0, Rank::Finite(3), 1, 4).unwrap();
    let x = seq(&[0.37]);
    let rho: Vec<f64> = spec.rho.iter().map(|r| r.eval(&[0.37])).collect();
    assert_eq!(eval_target(&spec, &x).unwrap(), vec![spec.f.eval(&rho)]);
}

#[test]
fn product_kernel_graph_by_hand() {
    let spec = TargetSpec {
        tau: 2,
        d: 1,
        f: Expr::var(0),
        rho: vec![Expr::var(0)],
        g: Kernel::Expr {
            expr: Expr::mul(vec![Expr::var(0), Expr::var(1)]),
        },
    };
    let g = spec.ground_truth_graph(&seq(&[0.0, 1.0])).unwrap();
    let e = std::f64::consts::E;
    let want = [0.5, 0.5, 1.0 / (1.0 + e), e / (1.0 + e)];
    for (a, b) in g.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn inputs_outside_domain_fail() {
    let spec = uniform_spec(3);
    assert!(matches!(
        eval_target(&spec, &seq(&[0.1, 1.5, 0.2])),
        Err(TargetError::OutOfDomain { t: 1, .. })
    ));
    assert!(matches!(eval_target(&spec, &seq(&[0.1, 0.2])), Err(TargetError::Shape { .. })));
}

#[test]
fn sweep_rho_maps_into_unit_cube() {
    let spec = TargetSpec::sweep_default(0.55, Rank::Infinite, 8, 0).unwrap();
    for i in 0..=1000 {
        let u = i as f64 / 1000.0;
        for r in &spec.rho {
            let v = r.eval(&[u]);
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }
}

#[test]
fn spec_survives_json() {
    let spec = TargetSpec::sweep_default(0.55, Rank::Finite(6), 8, 3).unwrap();
    let text = serde_json::to_string(&spec).unwrap();
    let back: TargetSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
}

fn linear_spec(rank: Rank) -> TargetSpec {
    let mut spec = TargetSpec::sweep_default(1.0, rank, 6, 2).unwrap();
    spec.f = Expr::add(vec![
        Expr::mul(vec![Expr::constant(0.7), Expr::var(0)]),
        Expr::mul(vec![Expr::constant(-1.3), Expr::var(2)]),
        Expr::var(3),
    ]);
    spec
}

#[test]
fn rank_r_truncation_is_exact_and_r_minus_one_is_not() {
    for r in [2, 4, 6] {
        let spec = linear_spec(Rank::Finite(r));
        let keep = TargetSpec {
            g: spec.g.truncated(r).unwrap(),
            ..spec.clone()
        };
        let drop = TargetSpec {
            g: spec.g.truncated(r - 1).unwrap(),
            ..spec.clone()
        };
        let mut worst_keep: f64 = 0.0;
        let mut worst_drop: f64 = 0.0;
        for seed in 0..20 {
            let x = random_seq(6, seed);
            let full = eval_target(&spec, &x).unwrap();
            for (a, b) in full.iter().zip(eval_target(&keep, &x).unwrap()) {
                worst_keep = worst_keep.max((a - b).abs());
            }
            for (a, b) in full.iter().zip(eval_target(&drop, &x).unwrap()) {
                worst_drop = worst_drop.max((a - b).abs());
            }
        }
        assert!(worst_keep < 1e-10, "r = {r}: {worst_keep}");
        assert!(worst_drop > 1e-6, "r = {r}: {worst_drop}");
    }
}

#[test]
fn complexity_of_trivial_spec() {
    let spec = TargetSpec {
        tau: 3,
        d: 1,
        f: Expr::var(0),
        rho: vec![Expr::constant(1.0)],
        g: Kernel::Spectral {
            sigma: vec![1.0],
            basis: Basis::Cosine,
        },
    };
    let c = complexity_measures(&spec, 1.0).unwrap();
    assert!((c.k_f - 1.0).abs() < 1e-12);
    assert!((c.sup_rho - 1.0).abs() < 1e-12);
    assert!((c.c1 - 1.0).abs() < 1e-12);
    assert!((c.sup_phi_psi - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
}

#[test]
fn c1_of_inverse_spectrum_is_one() {
    let spec = TargetSpec::sweep_default(1.0, Rank::Infinite, 4, 0).unwrap();
    let c = complexity_measures(&spec, 1.0).unwrap();
    assert!((c.c1 - 1.0).abs() < 1e-12);
    assert!(c.truncated_spectrum);
}

#[test]
fn c0_is_consistent_with_its_factors() {
    for seed in 0..4 {
        let spec = TargetSpec::sweep_default(0.55, Rank::Finite(6), 4, seed).unwrap();
        let c = complexity_measures(&spec, 0.55).unwrap();
        let want = c.k_f * c.sup_rho * f64::max(c.sup_phi_psi, 1.0 / (c.k_f * c.sup_rho));
        assert!((c.c0 - want).abs() < 1e-10);
        assert!(c.c0 >= 0.0 && c.c1 >= 0.0 && c.k_f >= 0.0);
    }
}

#[test]
fn doubling_f_doubles_lipschitz_and_c0() {
    let base = TargetSpec::sweep_default(0.55, Rank::Finite(6), 4, 1).unwrap();
    let scaled = |k: f64| TargetSpec {
        f: Expr::mul(vec![Expr::constant(k), base.f.clone()]),
        ..base.clone()
    };
    let a = complexity_measures(&scaled(3.0), 0.55).unwrap();
    let b = complexity_measures(&scaled(6.0), 0.55).unwrap();
    // Homogeneity holds once the first branch of the max is active.
    assert!(a.k_f * a.sup_rho * a.sup_phi_psi >= 1.0);
    assert!((b.k_f - 2.0 * a.k_f).abs() < 1e-10 * a.k_f);
    assert!((b.c0 - 2.0 * a.c0).abs() < 1e-10 * a.c0);
}

#[test]
fn non_lipschitz_f_is_rejected() {
    let mut spec = TargetSpec::sweep_default(1.0, Rank::Finite(2), 3, 0).unwrap();
    spec.f = Expr::unary(UnaryOp::Exp, Expr::mul(vec![Expr::constant(40.0), Expr::var(0)]));
    assert!(matches!(complexity_measures(&spec, 1.0), Err(TargetError::NotLipschitz(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matches_independent_reimplementation(seed in 0u64..1000, tau in 1usize..9, alpha in 0.55f64..2.0, r in 1usize..10) {
        let spec = TargetSpec::sweep_default(alpha, Rank::Finite(r), tau, seed).unwrap();
        let x = random_seq(tau, seed ^ 0x5eed);
        let got = eval_target(&spec, &x).unwrap();
        let want = reference_eval(&spec, x.data());
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn permutation_compatibility(seed in 0u64..1000, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let spec = TargetSpec::sweep_default(0.55, Rank::Infinite, 6, seed).unwrap();
        let x = random_seq(6, seed + 7);
        let px = Tensor::from_fn(&[6, 1], |t| x.data()[perm[t]]);
        let h = eval_target(&spec, &x).unwrap();
        let ph = eval_target(&spec, &px).unwrap();
        for t in 0..6 {
            prop_assert!((ph[t] - h[perm[t]]).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_rows_are_stochastic(seed in 0u64..1000, tau in 1usize..12) {
        let spec = TargetSpec::sweep_default(0.55, Rank::Infinite, tau, seed).unwrap();
        let g = spec.ground_truth_graph(&random_seq(tau, seed)).unwrap();
        for row in g.data().chunks(tau) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

}

proptest! {
    // Each case walks the full Lipschitz grid.
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn c1_scales_with_spectrum(lambda in 0.01f64..100.0, alpha in 0.55f64..2.0) {
        let spec = TargetSpec::sweep_default(alpha, Rank::Finite(8), 3, 0).unwrap();
        let scaled = TargetSpec {
            g: Kernel::Spectral {
                sigma: spectrum(&spec.g).iter().map(|s| s * lambda).collect(),
                basis: Basis::Cosine,
            },
            ..spec.clone()
        };
        let a = complexity_measures(&spec, alpha).unwrap().c1;
        let b = complexity_measures(&scaled, alpha).unwrap().c1;
        prop_assert!((b - lambda * a).abs() <= 1e-12 * b.abs().max(1.0));
    }
}
