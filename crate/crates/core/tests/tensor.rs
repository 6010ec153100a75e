use atrl::tensor::{grad_check, Activation, Tape, Tensor, TensorError, UnaryFn, Var};
use atrl::transformer::{attention_forward, HeadVars};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn identity_matmul_example() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
}

#[test]
fn shape_error_names_primitive_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_chain_matches_differences() {
    let x = Tensor::from_fn(&[4, 4], |i| ((i * 7 % 11) as f64 - 5.0) / 3.0);
    let w = Tensor::from_fn(&[4, 4], |i| ((i * 5 % 13) as f64 - 6.0) / 4.0);
    let err = grad_check(
        |tape, v| {
            let s = tape.softmax(v[0])?;
            let p = tape.mul(s, v[1])?;
            tape.sum(p)
        },
        &[x, w],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn identity_check_is_exact() {
    let x = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.37 - 1.0);
    let err = grad_check(|_, v| Ok(v[0]), &[x], 2f64.powi(-10)).unwrap();
    assert!(err < 1e-12, "{err}");
}

#[test]
fn corrupted_backward_rule_is_caught() {
    fn f(x: f64) -> f64 {
        x.sin()
    }
    fn wrong(x: f64) -> f64 {
        -x.cos()
    }
    let bad = UnaryFn {
        name: "bad_sin",
        f,
        df: wrong,
    };
    let x = Tensor::from_fn(&[5], |i| 0.3 * i as f64);
    let err = grad_check(move |tape, v| tape.unary(v[0], bad), &[x], 1e-6).unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn attention_block_gradient() {
    // Random 8-dim sequence of length 4 through one two-head block.
    let (n, tau, m_h, m_v) = (8, 4, 3, 2);
    let mut seed = 17u64;
    let mut rnd = |shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    };
    let mut inputs = vec![rnd(&[1, tau, n])];
    for _ in 0..2 {
        inputs.extend([rnd(&[m_h, n]), rnd(&[m_h, n]), rnd(&[m_v, n]), rnd(&[n, m_v])]);
    }
    let err = grad_check(
        |tape, v| {
            let heads: Vec<HeadVars> = (0..2)
                .map(|i| HeadVars {
                    wq: v[1 + 4 * i],
                    wk: v[2 + 4 * i],
                    wv: v[3 + 4 * i],
                    wo: v[4 + 4 * i],
                })
                .collect();
            let (out, _) = attention_forward(tape, &heads, v[0], false).map_err(|e| TensorError::InvalidShape {
                op: "attention",
                shape: vec![],
                reason: e.to_string(),
            })?;
            Ok(out)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1], &[2.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
}

#[test]
fn non_scalar_and_detached_losses_fail() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(c), Err(TensorError::Detached)));
}

fn small_values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

fn softmax_of(shape: &[usize], data: Vec<f64>) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(shape.to_vec(), data).unwrap());
    let s = tape.softmax(v).unwrap();
    tape.value(s).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(data in small_values(12)) {
        let s = softmax_of(&[3, 4], data);
        for row in s.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn softmax_shift_invariance(data in small_values(5), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = data.iter().map(|v| v + c).collect();
        let a = softmax_of(&[5], data);
        let b = softmax_of(&[5], shifted);
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn k_fold_use_accumulates(data in small_values(4), k in 1usize..6) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![4], data).unwrap(), true);
        let mut acc: Var = x;
        for _ in 1..k {
            acc = tape.add(acc, x).unwrap();
        }
        let s = tape.sum(acc).unwrap();
        tape.backward(s).unwrap();
        prop_assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == k as f64));
    }

    #[test]
    fn random_compositions_pass_gradient_check(a in small_values(6), b in small_values(6), w in small_values(6)) {
        let inputs = vec![
            Tensor::new(vec![2, 3], a).unwrap(),
            Tensor::new(vec![2, 3], b).unwrap(),
            Tensor::new(vec![3, 2], w).unwrap(),
        ];
        let err = grad_check(
            |tape, v| {
                let p = tape.mul(v[0], v[1])?;
                let q = tape.activation(p, Activation::Tanh)?;
                let r = tape.matmul(q, v[2])?;
                let s = tape.softmax(r)?;
                tape.sum_axis(s, 0)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn evaluation_is_deterministic(a in small_values(8)) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![2, 4], a.clone()).unwrap(), true);
            let s = tape.softmax(x).unwrap();
            let e = tape.activation(s, Activation::Exp).unwrap();
            let l = tape.mean(e).unwrap();
            tape.backward(l).unwrap();
            (tape.value(l).item().to_bits(), tape.grad(x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn transpose_is_an_involution(data in small_values(6)) {
        let x = Tensor::new(vec![2, 3], data).unwrap();
        prop_assert_eq!(x.transpose().unwrap().transpose().unwrap(), x);
    }
}
