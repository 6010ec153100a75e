use atrl::datasets::{
    apply_permutation, export_csv, gen_gravity, gen_linear_functional, gen_target_form_dataset, gen_with_filter,
    gravity_accelerations, gravity_graph, load_dataset, save_dataset, ConvolutionFilter, DataError, Dataset,
    FilterKind, GravityConfig, LinearFunctionalConfig, Permutation,
};
use atrl::target::{eval_target, Rank, TargetSpec};
use atrl::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gravity(count: usize, seed: u64) -> Dataset {
    gen_gravity(&GravityConfig {
        count,
        seed,
        ..GravityConfig::default()
    })
    .unwrap()
}

#[test]
fn symmetric_pair_feels_opposite_forces() {
    let x = [0.25, 0.5, 0.7, 0.75, 0.5, 0.7];
    let y = gravity_accelerations(&x, 2, 0.05, false);
    assert!((y[0] + y[2]).abs() < 1e-15 && (y[1] + y[3]).abs() < 1e-15);
    assert!(y[0] > 0.0 && y[1] == 0.0);
}

#[test]
fn unit_mass_at_half_distance_pulls_with_four() {
    let x = [0.2, 0.3, 0.5, 0.2, 0.8, 1.0];
    let y = gravity_accelerations(&x, 2, 0.05, false);
    assert!((y[0]).abs() < 1e-15);
    assert!((y[1] - 4.0).abs() < 1e-12, "{}", y[1]);
}

#[test]
fn clamp_bounds_close_pairs() {
    let x = [0.5, 0.5, 1.0, 0.51, 0.5, 1.0];
    let y = gravity_accelerations(&x, 2, 0.05, false);
    assert!((y[0] - 400.0).abs() < 1e-9, "{}", y[0]);
}

#[test]
fn causal_variant_sums_earlier_particles_only() {
    let x = [0.1, 0.1, 0.5, 0.9, 0.2, 0.3, 0.4, 0.8, 0.6];
    let y = gravity_accelerations(&x, 3, 0.05, true);
    assert_eq!(&y[..2], &[0.0, 0.0]);
    let full = gravity_accelerations(&x, 3, 0.05, false);
    assert_ne!(&y[2..4], &full[2..4]);
}

#[test]
fn gravity_sample_ranges() {
    let data = gravity(200, 3);
    data.validate().unwrap();
    assert_eq!((data.tau, data.d, data.d_out), (5, 3, 2));
    for row in data.x.chunks(3) {
        assert!((0.0..1.0).contains(&row[0]) && (0.0..1.0).contains(&row[1]));
        assert!((0.1..1.0).contains(&row[2]));
    }
    assert!(gen_gravity(&GravityConfig {
        tau: 1,
        ..GravityConfig::default()
    })
    .is_err());
}

#[test]
fn gravity_graph_examples() {
    let two = [0.1, 0.1, 0.4, 0.6, 0.9, 0.8];
    assert_eq!(gravity_graph(&two, 2, 0.05).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);

    let h = 3f64.sqrt() / 2.0 * 0.4;
    let tri = [0.3, 0.3, 0.5, 0.7, 0.3, 0.5, 0.5, 0.3 + h, 0.5];
    let g = gravity_graph(&tri, 3, 0.05).unwrap();
    for t in 0..3 {
        for s in 0..3 {
            let want = if s == t { 0.0 } else { 0.5 };
            assert!((g.get(&[t, s]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn gravity_graph_matches_brute_force() {
    let data = gravity(20, 8);
    for i in 0..data.count() {
        let x = data.x_of(i);
        let g = gravity_graph(x, 5, 0.05).unwrap();
        for t in 0..5 {
            let w: Vec<f64> = (0..5)
                .map(|s| {
                    if s == t {
                        return 0.0;
                    }
                    let d2 = (x[s * 3] - x[t * 3]).powi(2) + (x[s * 3 + 1] - x[t * 3 + 1]).powi(2);
                    x[s * 3 + 2] / d2.max(0.05 * 0.05)
                })
                .collect();
            let total: f64 = w.iter().sum();
            for s in 0..5 {
                assert!((g.get(&[t, s]) - w[s] / total).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn coincident_particles_are_degenerate() {
    let x = [0.5, 0.5, 1.0, 0.5, 0.5, 1.0];
    // The clamp keeps finite weights, so only invalid input is refused.
    assert!(gravity_graph(&x, 2, 0.05).is_ok());
    assert!(gravity_graph(&x[..3], 1, 0.05).is_err());
    let massless = [0.1, 0.1, 0.0, 0.6, 0.9, 0.0];
    assert!(matches!(gravity_graph(&massless, 2, 0.05), Err(DataError::Degenerate)));
}

#[test]
fn momentum_rate_balances() {
    let data = gravity(200, 5);
    for i in 0..data.count() {
        let (x, y) = (data.x_of(i), data.y_of(i));
        for axis in 0..2 {
            let total: f64 = (0..5).map(|t| x[t * 3 + 2] * y[t * 2 + axis]).sum();
            assert!(total.abs() < 1e-8, "{total}");
        }
    }
}

fn exp_config(count: usize) -> LinearFunctionalConfig {
    LinearFunctionalConfig {
        kind: FilterKind::Exponential,
        tau: 32,
        count,
        seed: 0,
    }
}

#[test]
fn impulse_and_step_responses() {
    let f = ConvolutionFilter::exponential(32);
    assert!(f.rho.iter().enumerate().all(|(s, &r)| r == (-(s as f64)).exp()));
    let mut delta = vec![0.0; 32];
    delta[0] = 1.0;
    for (t, y) in f.apply(&delta).iter().enumerate() {
        assert_eq!(*y, (-(t as f64)).exp());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = ConvolutionFilter::random(16, &mut rng);
    let step = r.apply(&[1.0; 16]);
    for t in 0..16 {
        let want: f64 = r.rho[..=t].iter().sum();
        assert!((step[t] - want).abs() < 1e-12);
    }
}

#[test]
fn convolution_matches_direct_sum() {
    let data = gen_linear_functional(&LinearFunctionalConfig {
        kind: FilterKind::Random,
        count: 50,
        seed: 11,
        ..LinearFunctionalConfig::default()
    })
    .unwrap();
    let rho = &data.filter.as_ref().unwrap().rho;
    assert!(rho.iter().all(|r| (0.0..=1.0).contains(r)));
    for i in 0..data.count() {
        let x = data.x_of(i);
        for t in 0..32 {
            let mut acc = 0.0;
            for s in 0..32 {
                if s <= t {
                    acc += rho[s] * x[t - s];
                }
            }
            assert!((data.y_of(i)[t] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn random_filter_mean_is_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<ConvolutionFilter> = (0..1000).map(|_| ConvolutionFilter::random(32, &mut rng)).collect();
    for lag in 0..32 {
        let mean = draws.iter().map(|f| f.rho[lag]).sum::<f64>() / 1000.0;
        assert!((0.45..=0.55).contains(&mean), "{lag}: {mean}");
    }
}

#[test]
fn rotation_and_inverse() {
    let p = Permutation::rotate_left(32, 10);
    // 1-based element 1 sits at 1-based position 23 after rotating.
    assert_eq!(p.indices()[22], 0);
    let data = gen_linear_functional(&exp_config(10)).unwrap();
    assert_eq!(apply_permutation(&data, &Permutation::identity(32)).unwrap(), data);
    let there = apply_permutation(&data, &p).unwrap();
    assert_eq!(there.y, data.y);
    assert_ne!(there.x, data.x);
    assert_eq!(apply_permutation(&there, &p.inverse()).unwrap(), data);
    assert!(matches!(
        apply_permutation(&data, &Permutation::identity(5)),
        Err(DataError::LengthMismatch { perm: 5, tau: 32 })
    ));
    assert!(Permutation::new(vec![0, 0, 1]).is_err());
}

#[test]
fn target_form_datasets() {
    let spec = TargetSpec::sweep_default(0.55, Rank::Finite(6), 8, 0).unwrap();
    let a = gen_target_form_dataset(&spec, 30, 4).unwrap();
    let b = gen_target_form_dataset(&spec, 30, 4).unwrap();
    assert_eq!(a, b);
    for i in 0..a.count() {
        let x = Tensor::new(vec![8, 1], a.x_of(i).to_vec()).unwrap();
        assert_eq!(eval_target(&spec, &x).unwrap(), a.y_of(i));
    }
    let empty = gen_target_form_dataset(&spec, 0, 4).unwrap();
    assert_eq!(empty.count(), 0);
    assert_eq!((empty.tau, empty.d, empty.d_out), (8, 1, 1));
}

#[test]
fn file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for (name, data) in [
        ("grav.seqd", gravity(7, 1)),
        ("conv.seqd", gen_linear_functional(&exp_config(4)).unwrap()),
        ("empty.seqd", Dataset::empty(3, 2, 1)),
    ] {
        let path = dir.path().join(name);
        save_dataset(&data, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
    }
}

#[test]
fn damaged_files_give_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.seqd");
    save_dataset(&gravity(3, 2), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.seqd");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_dataset(&cut), Err(DataError::Truncated { .. })));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(&cut, &magic).unwrap();
    assert!(matches!(load_dataset(&cut), Err(DataError::BadMagic(_))));

    let mut version = bytes.clone();
    version[4] = 99;
    std::fs::write(&cut, &version).unwrap();
    assert!(matches!(load_dataset(&cut), Err(DataError::UnsupportedVersion(_))));

    let mut extra = bytes;
    extra.push(0);
    std::fs::write(&cut, &extra).unwrap();
    assert!(matches!(load_dataset(&cut), Err(DataError::TrailingBytes(1))));
}

#[test]
fn csv_export_has_one_row_per_step() {
    let data = gravity(2, 0);
    let mut out = Vec::new();
    export_csv(&data, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn convolution_is_linear(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filter = ConvolutionFilter::random(32, &mut rng);
        let a: Vec<f64> = (0..32).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..32).map(|_| rng.gen()).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        let (ya, yb, ys) = (filter.apply(&a), filter.apply(&b), filter.apply(&sum));
        for t in 0..32 {
            prop_assert!((ys[t] - ya[t] - yb[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn exponential_filter_is_causal(seed in 0u64..1000, s in 0usize..32, delta in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = gen_with_filter(ConvolutionFilter::exponential(32), 32, 1, &mut rng).unwrap();
        let filter = data.filter.as_ref().unwrap();
        let mut moved = data.x.clone();
        moved[s] += delta;
        let y = filter.apply(&moved);
        for t in 0..32 {
            if t < s {
                prop_assert_eq!(y[t], data.y[t]);
            } else {
                prop_assert!(y[t] != data.y[t]);
            }
        }
    }

    #[test]
    fn permutation_round_trip(perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(), seed in 0u64..100) {
        let p = Permutation::new(perm).unwrap();
        let data = gen_target_form_dataset(&TargetSpec::sweep_default(1.0, Rank::Finite(2), 8, 0).unwrap(), 3, seed).unwrap();
        let back = apply_permutation(&apply_permutation(&data, &p).unwrap(), &p.inverse()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn gravity_seed_determinism(seed in 0u64..1000) {
        prop_assert_eq!(gravity(3, seed), gravity(3, seed));
    }
}
