use dine_core::channels::ChannelModel;
use dine_core::train::{train_dine_ndt, EstimatorKind, Mode, TrainConfig};
use std::time::Instant;

fn main() {
    let channel = ChannelModel::Ma1 { alpha: 0.5, dim: 1 };
    for (name, cfg) in [
        ("default-size dine 10 steps", TrainConfig {
            mode: Mode::Capacity,
            channel: Some(channel.clone()),
            steps: 10,
            eval_n: 1000,
            seed: 1,
            ..TrainConfig::default()
        }),
        ("small dine 10 steps (h24 fc48/24 B16 T24 K8)", TrainConfig {
            mode: Mode::Capacity,
            channel: Some(channel.clone()),
            steps: 10,
            batch_size: 16,
            seq_len: 24,
            k_u: 8,
            dine_lstm_hidden: 24,
            dine_fc_hidden: vec![48, 24],
            ndt_lstm_hidden: 32,
            ndt_fc_hidden: vec![32, 32],
            eval_n: 1000,
            seed: 1,
            ..TrainConfig::default()
        }),
        ("mine 50 steps default arch", TrainConfig {
            mode: Mode::Capacity,
            channel: Some(ChannelModel::Awgn { sigma2: 1.0, dim: 1 }),
            estimator: EstimatorKind::Mine,
            steps: 50,
            eval_n: 1000,
            seed: 1,
            ..TrainConfig::default()
        }),
    ] {
        let t0 = Instant::now();
        let out = train_dine_ndt(&cfg, cfg.channel.as_ref().unwrap(), None).unwrap();
        println!("{name}: {:?} total, per step {:?}, est={:.4}", t0.elapsed(), t0.elapsed() / cfg.steps as u32, out.report.estimate_nats);
    }

    // eval speed at 1e5
    let cfg = TrainConfig {
        mode: Mode::Capacity,
        channel: Some(channel.clone()),
        steps: 2,
        batch_size: 8,
        seq_len: 16,
        k_u: 8,
        dine_lstm_hidden: 24,
        dine_fc_hidden: vec![48, 24],
        ndt_lstm_hidden: 32,
        ndt_fc_hidden: vec![32, 32],
        eval_n: 100_000,
        seed: 1,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train_dine_ndt(&cfg, &channel, None).unwrap();
    println!("eval 1e5 small nets: {:?} (est {:.4})", t0.elapsed(), out.report.estimate_nats);
}
