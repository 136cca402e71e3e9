use dine_core::baselines::*;
use dine_core::channels::ChannelModel;
use dine_core::estimators::EvalBlocks;
use dine_core::train::*;
use std::time::Instant;

fn small(channel: ChannelModel, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        mode: Mode::Capacity,
        channel: Some(channel),
        steps,
        batch_size: 16,
        seq_len: 24,
        k_u: 8,
        dine_lstm_hidden: 24,
        dine_fc_hidden: vec![48, 24],
        ndt_lstm_hidden: 32,
        ndt_fc_hidden: vec![32, 32],
        eval_n: 100_000,
        seed,
        ..TrainConfig::default()
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("ma1");

    if which == "ma1" {
        let truth = ma1_ff_capacity(0.5, 1.0, 1024).unwrap();
        for (lr_ndt, steps, r_dine, r_ndt) in [
            (1e-3, 2500, 3, 1),
            (3e-4, 2500, 3, 1),
            (1e-3, 2500, 2, 1),
            (1e-3, 4000, 3, 1),
        ] {
            let channel = ChannelModel::Ma1 { alpha: 0.5, dim: 1 };
            let mut cfg = small(channel.clone(), steps, 11);
            cfg.lr_ndt = lr_ndt;
            cfg.r_dine = r_dine;
            cfg.r_ndt = r_ndt;
            let t0 = Instant::now();
            let out = train_dine_ndt(&cfg, &channel, None).unwrap();
            println!(
                "ma1 lr_ndt={lr_ndt} steps={steps} r={r_dine}:{r_ndt}: est={:.4} truth={:.4} err={:+.4} [{:?}]",
                out.report.estimate_nats,
                truth,
                out.report.estimate_nats - truth,
                t0.elapsed()
            );
        }
    }

    if which == "ma1best" {
        // candidate frozen config for criteria 4/5, two powers + feedback
        let fb_truth = ma1_fb_capacity(0.5, 1.0).unwrap();
        for (p, feedback) in [(1.0, false), (2.0, false), (1.0, true)] {
            let channel = ChannelModel::Ma1 { alpha: 0.5, dim: 1 };
            let mut cfg = small(channel.clone(), 3500, 11);
            cfg.lr_ndt = 1e-3;
            cfg.constraint.power = p;
            cfg.feedback = feedback;
            let t0 = Instant::now();
            let out = train_dine_ndt(&cfg, &channel, None).unwrap();
            let truth = if feedback {
                fb_truth
            } else {
                ma1_ff_capacity(0.5, p, 1024).unwrap()
            };
            println!(
                "ma1 P={p} fb={feedback}: est={:.4} truth={:.4} err={:+.4} [{:?}]",
                out.report.estimate_nats,
                truth,
                out.report.estimate_nats - truth,
                t0.elapsed()
            );
        }
    }

    if which == "ar1" {
        for p in [0.5, 1.0, 2.0] {
            let channel = ChannelModel::Ar1Mimo { alpha: 0.4, dim: 4 };
            let mut cfg = small(channel.clone(), 3500, 13);
            cfg.lr_ndt = 1e-3;
            cfg.constraint.power = p;
            let t0 = Instant::now();
            let out = train_dine_ndt(&cfg, &channel, None).unwrap();
            let truth = ar1_ff_capacity(0.4, p, 4, 1024).unwrap();
            println!(
                "ar1 P={p}: est={:.4} truth={:.4} err={:+.4} [{:?}]",
                out.report.estimate_nats,
                truth,
                out.report.estimate_nats - truth,
                t0.elapsed()
            );
        }
    }

    if which == "peak" {
        for a in [1.0, 2.0] {
            let channel = ChannelModel::Awgn { sigma2: 1.0, dim: 1 };
            let cfg = TrainConfig {
                mode: Mode::Capacity,
                estimator: EstimatorKind::Mine,
                channel: Some(channel.clone()),
                constraint: ConstraintSpec {
                    kind: ConstraintKind::PeakPower,
                    power: 1.0,
                    amplitude: a,
                },
                seed: 5,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let out = train_dine_ndt(&cfg, &channel, None).unwrap();
            let ceiling = peak_awgn_upper_bound(a, 1.0).unwrap();
            println!(
                "peak A={a}: est={:.4} ceiling={:.4} [{:?}]",
                out.report.estimate_nats,
                ceiling,
                t0.elapsed()
            );
        }
    }

    if which == "ndt7" {
        let channel = ChannelModel::Awgn { sigma2: 1.0, dim: 1 };
        let cfg = TrainConfig {
            mode: Mode::Capacity,
            estimator: EstimatorKind::Mine,
            channel: Some(channel.clone()),
            seed: 5,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let out = train_dine_ndt(&cfg, &channel, None).unwrap();
        let ndt = out.ndt.as_ref().unwrap();
        let source = SimulatorSource {
            ndt,
            channel: &channel,
        };
        let (x, _) = source.block(0, 10_000, 999).unwrap();
        let mut rng = dine_core::rng::stream(999, 77);
        let gauss: Vec<f64> = (0..10_000)
            .map(|_| {
                kr_gaussian_inverse(&[dine_core::rng::open_unit(&mut rng)], &[0.0], &[1.0])
                    .unwrap()[0]
            })
            .collect();
        let w2 = wasserstein2_1d(&x, &gauss).unwrap();
        let ks = ks_statistic_two_sample(&x, &gauss).unwrap();
        let xm: f64 = x.iter().sum::<f64>() / x.len() as f64;
        let xv: f64 = x.iter().map(|v| (v - xm) * (v - xm)).sum::<f64>() / x.len() as f64;
        println!(
            "ndt7: est={:.4} W2={:.4} KS={:.4} mean={:.4} var={:.4} [{:?}]",
            out.report.estimate_nats,
            w2,
            ks,
            xm,
            xv,
            t0.elapsed()
        );
    }
}
