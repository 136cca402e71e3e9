//! Statistical and algebraic properties of the estimators.

use dine_core::baselines::awgn_capacity;
use dine_core::channels::ChannelModel;
use dine_core::estimators::{dv_kl_objective, mine_objective};
use dine_core::rng;
use dine_core::tensor::Tape;
use dine_core::train::{
    gaussian_input_dataset, train_dine, EstimatorKind, Mode, TrainConfig,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// log_mean_exp(x + c) == log_mean_exp(x) + c to 1e-12: the shift
    /// identity behind the Donsker-Varadhan objective.
    #[test]
    fn log_mean_exp_shift_identity(
        xs in proptest::collection::vec(-50.0f64..50.0, 1..20),
        c in -1000.0f64..1000.0,
    ) {
        let mut tape = Tape::new();
        let n = xs.len();
        let base = tape.constant(xs.clone(), vec![n]);
        let l0 = tape.log_mean_exp(base).unwrap();
        let shifted = tape.constant(xs.iter().map(|v| v + c).collect(), vec![n]);
        let l1 = tape.log_mean_exp(shifted).unwrap();
        let err = (tape.scalar(l1) - tape.scalar(l0) - c).abs();
        prop_assert!(err < 1e-12, "shift identity violated by {err}");
    }

    /// Adding a constant to every potential leaves both DV objectives
    /// unchanged to 1e-10.
    #[test]
    fn dv_objectives_are_shift_invariant(
        jv in proptest::collection::vec(-5.0f64..5.0, 4..12),
        c in -200.0f64..200.0,
    ) {
        let n = jv.len();
        let rv: Vec<f64> = jv.iter().map(|v| v * 0.7 - 0.1).collect();
        let mut tape = Tape::new();

        let j0 = tape.constant(jv.clone(), vec![n]);
        let r0 = tape.constant(rv.clone(), vec![n, 1]);
        let dv0 = dv_kl_objective(&mut tape, j0, r0).unwrap();
        let j1 = tape.constant(jv.iter().map(|v| v + c).collect(), vec![n]);
        let r1 = tape.constant(rv.iter().map(|v| v + c).collect(), vec![n, 1]);
        let dv1 = dv_kl_objective(&mut tape, j1, r1).unwrap();
        prop_assert!((tape.scalar(dv0) - tape.scalar(dv1)).abs() < 1e-10);

        let m0 = tape.constant(jv.clone(), vec![n]);
        let g0 = tape.constant(rv.clone(), vec![n]);
        let mi0 = mine_objective(&mut tape, m0, g0).unwrap();
        let m1 = tape.constant(jv.iter().map(|v| v + c).collect(), vec![n]);
        let g1 = tape.constant(rv.iter().map(|v| v + c).collect(), vec![n]);
        let mi1 = mine_objective(&mut tape, m1, g1).unwrap();
        prop_assert!((tape.scalar(mi0) - tape.scalar(mi1)).abs() < 1e-10);
    }

    /// Replaying a recorded computation reproduces bit-identical outputs.
    #[test]
    fn replay_is_bit_identical(
        vals in proptest::collection::vec(-3.0f64..3.0, 6),
    ) {
        let mut tape = Tape::new();
        let a = tape.leaf(vals[..4].to_vec(), vec![2, 2]);
        let b = tape.leaf(vals[2..6].to_vec(), vec![2, 2]);
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sigmoid(p);
        let t = tape.tanh(s);
        let l = tape.log_mean_exp(t).unwrap();
        let before = tape.scalar(l);
        tape.replay();
        prop_assert_eq!(tape.scalar(l), before);
    }
}

/// On data with known mutual information the converged estimate stays below
/// the truth plus three standard errors (the DV bound is one-sided).
#[test]
fn mine_respects_the_one_sided_bound() {
    let channel = ChannelModel::Awgn { sigma2: 1.0, dim: 1 };
    let dataset = gaussian_input_dataset(&channel, 1.0, 60_000, 1, 21).unwrap();
    let cfg = TrainConfig {
        mode: Mode::Estimate,
        estimator: EstimatorKind::Mine,
        dataset: Some("in-memory".into()),
        steps: 1200,
        batch_size: 16,
        seq_len: 32,
        dine_fc_hidden: vec![64, 32],
        eval_n: 50_000,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train_dine(&cfg, &dataset, None).unwrap();
    let truth = awgn_capacity(1.0, 1.0).unwrap();
    assert!(
        out.report.estimate_nats <= truth + 3.0 * out.report.stderr,
        "estimate {} exceeds {} + 3*{}",
        out.report.estimate_nats,
        truth,
        out.report.stderr
    );
    // and the estimator actually learned something
    assert!(
        out.report.estimate_nats > 0.2,
        "estimate {} too far below the known value",
        out.report.estimate_nats
    );
}

/// Two evaluation runs under one seed agree bit-for-bit even though blocks
/// run concurrently; the parallel and sequential dispatch paths also agree.
#[test]
fn parallel_and_sequential_evaluation_are_bit_identical() {
    let channel = ChannelModel::Ma1 { alpha: 0.5, dim: 1 };
    let dataset = gaussian_input_dataset(&channel, 1.0, 20_000, 1, 5).unwrap();
    let cfg = TrainConfig {
        mode: Mode::Estimate,
        dataset: Some("in-memory".into()),
        steps: 30,
        batch_size: 8,
        seq_len: 16,
        k_u: 4,
        dine_lstm_hidden: 8,
        dine_fc_hidden: vec![12],
        eval_n: 10_000,
        eval_block: 500,
        seed: 11,
        ..TrainConfig::default()
    };
    let was = dine_core::kernels::set_parallel(true);
    let a = train_dine(&cfg, &dataset, None).unwrap();
    dine_core::kernels::set_parallel(false);
    let b = train_dine(&cfg, &dataset, None).unwrap();
    dine_core::kernels::set_parallel(was);
    assert_eq!(a.report.estimate_nats, b.report.estimate_nats);
    assert_eq!(a.report.stderr, b.report.stderr);
    assert_eq!(a.curve, b.curve);
}
