mod common;

use common::{cosine, flipped_blobs, influence_fixture, logistic_data, logistic_spec};
use geoflow::netgeo::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = NetSpec> {
    prop_oneof![
        (1usize..4, 0usize..4, prop::bool::ANY, prop::bool::ANY).prop_map(|(d, h, ce, bias)| {
            let widths = if h == 0 { vec![d, 1] } else { vec![d, h, 2] };
            let loss = if ce { Loss::CrossEntropy } else { Loss::Squared };
            let s = NetSpec::new(widths, loss).unwrap();
            if bias { s } else { s.without_bias() }
        }),
        (1usize..4, 1usize..4).prop_map(|(w, b)| NetSpec::residual(w, b, Loss::Squared).unwrap()),
    ]
}

fn case() -> impl Strategy<Value = (NetSpec, DVector<f64>, Vec<f64>, f64)> {
    spec_strategy().prop_flat_map(|s| {
        let d = s.param_count();
        let n = s.input_dim();
        let label = if s.loss == Loss::CrossEntropy { prop_oneof![Just(0.0), Just(1.0)].boxed() } else { (-2.0..2.0f64).boxed() };
        (Just(s), prop::collection::vec(-1.5..1.5f64, d), prop::collection::vec(-2.0..2.0f64, n), label)
            .prop_map(|(s, t, x, y)| (s, DVector::from_vec(t), x, y))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_finite_differences((spec, theta, x, y) in case()) {
        let (_, g) = spec.net_grad(&theta, &x, y).unwrap();
        let mut fd = DVector::zeros(theta.len());
        for j in 0..theta.len() {
            // Fourth-order stencil keeps truncation well under the tolerance.
            let h = 1e-3;
            let f = |s: f64| {
                let mut t = theta.clone();
                t[j] += s;
                spec.net_loss(&t, &x, y).unwrap()
            };
            fd[j] = (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
        }
        let scale = g.norm().max(1e-3);
        prop_assert!((&g - &fd).norm() / scale < 1e-6, "{} vs {}", g, fd);
    }

    #[test]
    fn fisher_is_symmetric_psd((spec, theta, _x, _y) in case(), seed in 0u64..1000) {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        let base = spec.init(seed);
        for i in 0..4 {
            feats.push((0..spec.input_dim()).map(|k| base[(i + k) % base.len()] * 2.0).collect::<Vec<_>>());
            labels.push((i % 2) as f64);
        }
        let data = LabeledDataset::new(feats, labels).unwrap();
        let f = fisher_metric(&spec, &data, &theta).unwrap();
        prop_assert_eq!(&f, &f.transpose());
        let min = f.symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-10, "min eigenvalue {min}");
    }

    #[test]
    fn influence_is_symmetric_and_self_influence_non_positive(i in 0usize..50, j in 0usize..50) {
        let (spec, data) = influence_fixture();
        let theta = train(&spec, &data, &TrainOptions { tol: 1e-10, ..Default::default() }).unwrap().theta;
        let solver = DampedSolver::new(&hessian(&spec, &data, &theta).unwrap(), None).unwrap();
        prop_assert!(solver.is_positive_definite());
        let zi = (data.features[i].as_slice(), data.labels[i]);
        let zj = (data.features[j].as_slice(), data.labels[j]);
        let a = influence_loss_with(&solver, &spec, &theta, zi, zj).unwrap();
        let b = influence_loss_with(&solver, &spec, &theta, zj, zi).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-12));
        prop_assert!(influence_loss_with(&solver, &spec, &theta, zi, zi).unwrap() <= 0.0);
    }
}

#[test]
fn quadratic_toy_loo_gap_shrinks_with_n() {
    let spec = NetSpec::new(vec![1, 1], Loss::Squared).unwrap().without_bias();
    let mut prev_gap = f64::INFINITY;
    for n in [5usize, 11, 21, 41] {
        let data = LabeledDataset::new(vec![vec![1.0]; n], (1..=n).map(|v| v as f64).collect()).unwrap();
        let mean = (n + 1) as f64 / 2.0;
        let theta = DVector::from_vec(vec![mean]);
        let z = n as f64;
        let ip = influence_params(&spec, &data, &theta, &[1.0], z, Some(0.0)).unwrap()[0];
        assert!((ip - (z - mean)).abs() < 1e-8);
        let loo = loo_retrain(&spec, &data, &theta, n - 1, 1e-10).unwrap()[0];
        let actual = loo - mean;
        let predicted = -ip / n as f64;
        if n == 5 {
            assert!((actual + 0.5).abs() < 1e-10 && (predicted + 0.4).abs() < 1e-8);
        }
        let gap = ((actual - predicted) / actual).abs();
        assert!(gap < prev_gap, "n {n}: gap {gap}");
        prev_gap = gap;
    }
}

#[test]
fn influence_predicts_every_leave_one_out_step() {
    let (spec, data) = influence_fixture();
    let theta = train(&spec, &data, &TrainOptions { tol: 1e-10, ..Default::default() }).unwrap().theta;
    let n = data.len() as f64;
    for i in 0..data.len() {
        let ip = influence_params(&spec, &data, &theta, &data.features[i], data.labels[i], None).unwrap();
        let loo = loo_retrain(&spec, &data, &theta, i, 1e-10).unwrap();
        let pred: Vec<f64> = (-ip / n).iter().copied().collect();
        let act: Vec<f64> = (&loo - &theta).iter().copied().collect();
        assert!(cosine(&pred, &act) > 0.99, "point {i}");
    }
}

#[test]
fn influence_report_matches_pointwise_queries() {
    let (spec, data) = influence_fixture();
    let theta = train(&spec, &data, &TrainOptions { tol: 1e-10, ..Default::default() }).unwrap().theta;
    let test = logistic_data(3, [1.5, -1.0, 0.3], 99);
    let r = influence_report(&spec, &data, &theta, &test, None).unwrap();
    assert_eq!(r.loss.shape(), (50, 3));
    for i in [0, 17, 49] {
        let zi = (data.features[i].as_slice(), data.labels[i]);
        let q = influence_loss(&spec, &data, &theta, zi, (test.features[2].as_slice(), test.labels[2]), None).unwrap();
        assert!((q - r.loss[(i, 2)]).abs() < 1e-12 * q.abs().max(1e-12));
        assert!(r.self_influence[i] <= 0.0);
    }
}

#[test]
fn fisher_approximates_hessian_on_realizable_data() {
    let spec = logistic_spec(0.0);
    let data = logistic_data(5000, [1.0, -2.0, 0.5], 3);
    let theta = train(&spec, &data, &TrainOptions { tol: 1e-9, ..Default::default() }).unwrap().theta;
    let f = fisher_metric(&spec, &data, &theta).unwrap();
    let h = hessian(&spec, &data, &theta).unwrap();
    let rel = (&f - &h).norm() / h.norm();
    assert!(rel < 0.1, "relative gap {rel}");
}

#[test]
fn reweighting_weights_stay_on_the_simplex() {
    let (train_set, _, valid) = flipped_blobs(40, 20, 0.2, 5);
    let spec = logistic_spec(0.0);
    let r0 = reweight_train(&spec, &train_set, &valid, &ReweightOptions { outer_iters: 0, ..Default::default() }).unwrap();
    assert!(r0.weights.iter().all(|&w| w == 1.0 / 40.0));
    for k in 1..6 {
        let r = reweight_train(&spec, &train_set, &valid, &ReweightOptions { outer_iters: k, ..Default::default() }).unwrap();
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.weights.iter().all(|&w| w >= 0.0));
    }
    let mut small = valid.clone();
    small.features.truncate(0);
    assert!(reweight_train(&spec, &train_set, &small, &ReweightOptions::default()).is_err());
}

#[test]
fn reweighting_downweights_flipped_labels() {
    let spec = logistic_spec(0.0);
    for seed in 0..3 {
        let (train_set, flipped, valid) = flipped_blobs(200, 100, 0.2, seed);
        let r = reweight_train(&spec, &train_set, &valid, &ReweightOptions { seed, ..Default::default() }).unwrap();
        let (mut fl, mut cl) = (Vec::new(), Vec::new());
        for (i, &w) in r.weights.iter().enumerate() {
            if flipped.binary_search(&i).is_ok() { fl.push(w) } else { cl.push(w) }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&fl) < 0.5 * mean(&cl), "seed {seed}: {} vs {}", mean(&fl), mean(&cl));
        let plain = train(&spec, &train_set, &TrainOptions { seed, ..Default::default() }).unwrap();
        let plain_valid = objective(&spec, &valid, &plain.theta).unwrap();
        let rw_valid = *r.valid_loss.last().unwrap();
        assert!(rw_valid <= plain_valid, "seed {seed}: {rw_valid} vs {plain_valid}");
    }
}

#[test]
fn split_block_complexity_matches_hand_sum() {
    let spec = NetSpec::residual(2, 2, Loss::Squared).unwrap();
    let data = LabeledDataset::new(vec![vec![0.2, 0.4], vec![-1.0, 0.3], vec![0.7, -0.1], vec![0.0, 1.0]], vec![0.5, -0.2, 0.1, 0.3]).unwrap();
    let one = NetSpec::residual(2, 1, Loss::Squared).unwrap();
    let full = one.init(9);
    // Half of the single block's parameters in each of two blocks.
    let mut theta = DVector::zeros(spec.param_count());
    theta.rows_mut(0, 6).copy_from(&(&full * 0.5));
    theta.rows_mut(6, 6).copy_from(&(&full * 0.5));
    let m = fisher_metric(&spec, &data, &theta).unwrap();
    let mut hand = 0.0;
    for l in 0..2 {
        let mut v = DVector::zeros(12);
        for k in 0..6 {
            v[6 * l + k] = theta[6 * l + k];
        }
        let mv = &m * &v;
        hand += v.iter().zip(mv.iter()).map(|(a, b)| a * b).sum::<f64>() / 2.0;
    }
    let c = curve_complexity(&spec, &data, &theta).unwrap();
    assert!((c - hand).abs() < 1e-8 * hand.abs().max(1e-12), "{c} vs {hand}");
}

#[test]
fn deeper_tanh_stacks_are_worse_conditioned() {
    let x = [0.3, -0.2, 0.5, 0.1];
    let cond = |layers: usize, seed: u64| {
        let spec = NetSpec::new(vec![4; layers + 1], Loss::Squared).unwrap();
        condition_number(&dynamic_isometry(&spec, &spec.init(seed), &x).unwrap())
    };
    for seed in 0..5 {
        assert!(cond(8, seed) > cond(2, seed), "seed {seed}");
    }
}

#[test]
fn singular_hessian_without_damping_fails() {
    // Collinear features leave one direction flat.
    let h = DMatrix::from_row_slice(2, 2, &[2.5, 2.5, 2.5, 2.5]);
    let err = DampedSolver::new(&h, Some(0.0));
    assert!(matches!(err, Err(geoflow::GeoError::SolveFailed { .. })));
    assert!(DampedSolver::new(&h, None).unwrap().is_positive_definite());
}
