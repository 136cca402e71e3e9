use dine_core::baselines::*;
use dine_core::channels::ChannelModel;
use dine_core::train::*;
use std::time::Instant;

fn small_dine(channel: ChannelModel, steps: usize, seed: u64) -> TrainConfig {
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
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("all");

    if which == "mine" || which == "all" {
        // criterion 1 shape: MINE AWGN, default arch/steps
        for p in [0.5, 1.0, 2.0] {
            for seed in [1u64, 2, 3] {
                let channel = ChannelModel::Awgn { sigma2: 1.0, dim: 1 };
                let cfg = TrainConfig {
                    mode: Mode::Capacity,
                    estimator: EstimatorKind::Mine,
                    channel: Some(channel.clone()),
                    constraint: ConstraintSpec { kind: ConstraintKind::AveragePower, power: p, amplitude: 1.0 },
                    seed,
                    ..TrainConfig::default()
                };
                let t0 = Instant::now();
                let out = train_dine_ndt(&cfg, &channel, None).unwrap();
                let truth = awgn_capacity(p, 1.0).unwrap();
                println!("MINE awgn P={p} seed={seed}: est={:.4} truth={:.4} err={:+.4} stderr={:.4} [{:?}]",
                    out.report.estimate_nats, truth, out.report.estimate_nats - truth, out.report.stderr, t0.elapsed());
            }
        }
    }

    if which == "null" || which == "all" {
        // criterion 2: DINE null on independent data
        let ds = independent_gaussian_dataset(100_000, 2, 42).unwrap();
        let cfg = TrainConfig {
            mode: Mode::Estimate,
            dataset: Some("gen".into()),
            steps: 1500,
            batch_size: 16,
            seq_len: 24,
            k_u: 8,
            dine_lstm_hidden: 24,
            dine_fc_hidden: vec![48, 24],
            eval_n: 100_000,
            seed: 7,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let out = train_dine(&cfg, &ds, None).unwrap();
        println!("DINE null: est={:.4} stderr={:.4} [{:?}]", out.report.estimate_nats, out.report.stderr, t0.elapsed());
    }

    if which == "knownmi" || which == "all" {
        // criterion 3: DINE on AWGN P=1 data
        let channel = ChannelModel::Awgn { sigma2: 1.0, dim: 1 };
        let ds = gaussian_input_dataset(&channel, 1.0, 100_000, 2, 43).unwrap();
        let cfg = TrainConfig {
            mode: Mode::Estimate,
            dataset: Some("gen".into()),
            steps: 1500,
            batch_size: 16,
            seq_len: 24,
            k_u: 8,
            dine_lstm_hidden: 24,
            dine_fc_hidden: vec![48, 24],
            eval_n: 100_000,
            seed: 8,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let out = train_dine(&cfg, &ds, None).unwrap();
        println!("DINE knownMI: est={:.4} truth=0.3466 err={:+.4} stderr={:.4} [{:?}]",
            out.report.estimate_nats, out.report.estimate_nats - 0.34657, out.report.stderr, t0.elapsed());
    }

    if which == "ma1" || which == "all" {
        // criterion 4: MA(1) ff capacity
        for p in [1.0, 2.0] {
            let channel = ChannelModel::Ma1 { alpha: 0.5, dim: 1 };
            let mut cfg = small_dine(channel.clone(), 2500, 11);
            cfg.constraint.power = p;
            let t0 = Instant::now();
            let out = train_dine_ndt(&cfg, &channel, None).unwrap();
            let truth = ma1_ff_capacity(0.5, p, 1024).unwrap();
            println!("DINE-NDT ma1 ff P={p}: est={:.4} truth={:.4} err={:+.4} stderr={:.4} [{:?}]",
                out.report.estimate_nats, truth, out.report.estimate_nats - truth, out.report.stderr, t0.elapsed());
        }
    }

    if which == "ar1" || which == "all" {
        // criterion 8: AR(1) MIMO 4-D
        for p in [0.5, 1.0, 2.0] {
            let channel = ChannelModel::Ar1Mimo { alpha: 0.4, dim: 4 };
            let mut cfg = small_dine(channel.clone(), 2500, 13);
            cfg.constraint.power = p;
            let t0 = Instant::now();
            let out = train_dine_ndt(&cfg, &channel, None).unwrap();
            let truth = ar1_ff_capacity(0.4, p, 4, 1024).unwrap();
            println!("DINE-NDT ar1 P={p}: est={:.4} truth={:.4} err={:+.4} stderr={:.4} [{:?}]",
                out.report.estimate_nats, truth, out.report.estimate_nats - truth, out.report.stderr, t0.elapsed());
        }
    }

    if which == "ma1fb" || which == "all" {
        // criterion 5: MA(1) feedback
        let channel = ChannelModel::Ma1 { alpha: 0.5, dim: 1 };
        let mut cfg = small_dine(channel.clone(), 2500, 17);
        cfg.feedback = true;
        let t0 = Instant::now();
        let out = train_dine_ndt(&cfg, &channel, None).unwrap();
        let truth = ma1_fb_capacity(0.5, 1.0).unwrap();
        println!("DINE-NDT ma1 FB P=1: est={:.4} truth={:.4} err={:+.4} stderr={:.4} [{:?}]",
            out.report.estimate_nats, truth, out.report.estimate_nats - truth, out.report.stderr, t0.elapsed());
    }
}
