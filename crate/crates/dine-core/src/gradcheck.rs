//! Finite-difference verification of reverse-mode gradients.

use crate::channels::{rollout_closed_loop, ChannelModel};
use crate::estimators::{dine_objective_graph, fit_reference_law};
use crate::nn::{
    lstm_step, Activation, Constraint, DineNetwork, LstmParams, MlpParams, NdtNetwork, Network,
};
use crate::rng::{self, Rng};
use crate::tensor::{NodeId, Tape};

/// Compare an analytic gradient against central finite differences.
///
/// `f` maps a flat parameter vector to the scalar value and its analytic
/// gradient at that point. Returns the maximum over coordinates of
/// `|ad - fd| / (|fd| + 1e-8)`.
pub fn gradient_check<F>(mut f: F, point: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let (fp, _) = f(&x);
        x[i] = orig - step;
        let (fm, _) = f(&x);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Coordinate-wise check over several step sizes: a coordinate passes if
/// the finite difference matches at any step. Truncation error shrinks with
/// the step and roundoff grows with it, so every correct coordinate has a
/// valid window, while a wrong analytic gradient fails at every step.
pub fn gradient_check_multi<F>(mut f: F, point: &[f64], steps: &[f64]) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = x[i];
        let mut best = f64::INFINITY;
        for &step in steps {
            x[i] = orig + step;
            let (fp, _) = f(&x);
            x[i] = orig - step;
            let (fm, _) = f(&x);
            let fd = (fp - fm) / (2.0 * step);
            best = best.min((analytic[i] - fd).abs() / (fd.abs() + 1e-8));
        }
        x[i] = orig;
        worst = worst.max(best);
    }
    worst
}

/// One entry of the verification battery.
#[derive(Debug, Clone)]
pub struct BatteryCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl BatteryCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

fn flatten(net: &dyn Network) -> Vec<f64> {
    net.params().iter().flat_map(|p| p.data.clone()).collect()
}

fn unflatten(net: &mut dyn Network, flat: &[f64]) {
    let mut offset = 0;
    for p in net.params_mut() {
        let n = p.data.len();
        p.data.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
}

fn grads_flat(tape: &Tape, ids: &[NodeId]) -> Vec<f64> {
    let mut out = Vec::new();
    for &id in ids {
        match tape.grad(id) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat(0.0).take(tape.tensor(id).numel())),
        }
    }
    out
}

// Battery networks use tanh activations: central differences are only
// meaningful on smooth functions, and the ReLU subgradient convention is
// covered by dedicated unit tests.
fn tanh_dine(rng: &mut Rng, input_dim: usize, hidden: usize, fc: &[usize], k_u: usize) -> DineNetwork {
    let lstm = LstmParams::new(rng, input_dim, hidden, "g");
    let mut dims = vec![hidden];
    dims.extend_from_slice(fc);
    dims.push(1);
    DineNetwork {
        lstm,
        head: MlpParams::new(rng, &dims, Activation::Tanh, "g"),
        input_dim,
        k_u,
    }
}

fn tanh_ndt(
    rng: &mut Rng,
    dim: usize,
    feedback: bool,
    hidden: usize,
    fc: &[usize],
    constraint: Constraint,
) -> NdtNetwork {
    let input_dim = 2 * dim + if feedback { dim } else { 0 };
    let lstm = LstmParams::new(rng, input_dim, hidden, "g");
    let mut dims = vec![hidden];
    dims.extend_from_slice(fc);
    dims.push(dim);
    NdtNetwork {
        lstm: Some(lstm),
        mlp: MlpParams::new(rng, &dims, Activation::Tanh, "g"),
        constraint,
        feedback,
        noise_dim: dim,
        output_dim: dim,
    }
}

/// Finite-difference battery over the recurrent building blocks and the
/// full generator-to-objective chain, at small sizes so exhaustive
/// coordinate-wise differencing stays fast.
pub fn battery(seed: u64) -> Vec<BatteryCheck> {
    // primitive blocks are checked at the tight step; objective-level chains
    // use a coarser step so FD roundoff on near-flat coordinates stays well
    // below the threshold (truncation is negligible at these magnitudes)
    let chain_steps = [1e-6, 1e-5, 1e-4];
    let mut checks = Vec::new();

    // plain LSTM unrolled five steps
    {
        let mut r = rng::stream(seed, 70);
        let proto = LstmParams::new(&mut r, 2, 4, "g");
        let mut inputs = vec![0.0; 5 * 2];
        rng::fill_standard_normal(&mut r, &mut inputs);
        let point = flatten(&proto);
        let f = |p: &[f64]| {
            let mut net = proto.clone();
            unflatten(&mut net, p);
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let ids = bound.param_ids();
            let mut h = tape.zeros(vec![1, 4]);
            let mut c = tape.zeros(vec![1, 4]);
            for t in 0..5 {
                let x = tape.constant(inputs[t * 2..(t + 1) * 2].to_vec(), vec![1, 2]);
                let (hn, cn) = lstm_step(&mut tape, &bound, x, h, c).unwrap();
                h = hn;
                c = cn;
            }
            let loss = tape.sum(h);
            tape.backward(loss).unwrap();
            (tape.scalar(loss), grads_flat(&tape, &ids))
        };
        checks.push(BatteryCheck {
            name: "lstm_bptt_5_steps",
            max_rel_error: gradient_check_multi(f, &point, &chain_steps),
            threshold: 1e-4,
        });
    }

    // modified LSTM + shared head scoring joint and reference branches
    {
        let mut r = rng::stream(seed, 71);
        let proto = tanh_dine(&mut r, 1, 4, &[5], 3);
        let t = 4;
        let mut joint = vec![0.0; t];
        let mut refs = vec![0.0; t * 3];
        rng::fill_standard_normal(&mut r, &mut joint);
        rng::fill_standard_normal(&mut r, &mut refs);
        let point = flatten(&proto);
        let f = |p: &[f64]| {
            let mut net = proto.clone();
            unflatten(&mut net, p);
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let ids = bound.param_ids();
            let joint_steps: Vec<NodeId> = (0..t)
                .map(|i| tape.constant(vec![joint[i]], vec![1, 1]))
                .collect();
            let ref_steps: Vec<NodeId> = (0..t)
                .map(|i| tape.constant(refs[i * 3..(i + 1) * 3].to_vec(), vec![3, 1]))
                .collect();
            let (gj, gr) =
                crate::nn::dine_forward(&mut tape, &bound, &joint_steps, &ref_steps, 3).unwrap();
            let all = tape.concat_rows(&gj).unwrap();
            let all_r = tape.concat_rows(&gr).unwrap();
            let sj = tape.sum(all);
            let sr = tape.sum(all_r);
            let loss = tape.add(sj, sr).unwrap();
            tape.backward(loss).unwrap();
            (tape.scalar(loss), grads_flat(&tape, &ids))
        };
        checks.push(BatteryCheck {
            name: "modified_lstm_shared_head",
            max_rel_error: gradient_check_multi(f, &point, &chain_steps),
            threshold: 1e-4,
        });
    }

    // the difference objective through both potential networks
    {
        let mut r = rng::stream(seed, 72);
        let proto_y = tanh_dine(&mut r, 1, 3, &[4], 2);
        let proto_xy = tanh_dine(&mut r, 2, 3, &[4], 2);
        let (b, t, k_u) = (2, 4, 2);
        let mut x = vec![0.0; b * t];
        let mut y = vec![0.0; b * t];
        let mut refs = vec![0.0; b * t * k_u];
        rng::fill_standard_normal(&mut r, &mut x);
        rng::fill_standard_normal(&mut r, &mut y);
        rng::fill_standard_normal(&mut r, &mut refs);
        let mut point = flatten(&proto_y);
        let split = point.len();
        point.extend(flatten(&proto_xy));
        let f = |p: &[f64]| {
            let mut net_y = proto_y.clone();
            let mut net_xy = proto_xy.clone();
            unflatten(&mut net_y, &p[..split]);
            unflatten(&mut net_xy, &p[split..]);
            let mut tape = Tape::new();
            let bound_y = net_y.bind(&mut tape);
            let bound_xy = net_xy.bind(&mut tape);
            let mut ids = bound_y.param_ids();
            ids.extend(bound_xy.param_ids());
            let y_steps: Vec<NodeId> = (0..t)
                .map(|ti| {
                    let col: Vec<f64> = (0..b).map(|bi| y[bi * t + ti]).collect();
                    tape.constant(col, vec![b, 1])
                })
                .collect();
            let x_steps: Vec<NodeId> = (0..t)
                .map(|ti| {
                    let col: Vec<f64> = (0..b).map(|bi| x[bi * t + ti]).collect();
                    tape.constant(col, vec![b, 1])
                })
                .collect();
            let ref_steps: Vec<NodeId> = (0..t)
                .map(|ti| {
                    let mut col = Vec::with_capacity(b * k_u);
                    for bi in 0..b {
                        for j in 0..k_u {
                            col.push(refs[(bi * t + ti) * k_u + j]);
                        }
                    }
                    tape.constant(col, vec![b * k_u, 1])
                })
                .collect();
            let terms = dine_objective_graph(
                &mut tape, &bound_y, &bound_xy, &y_steps, &x_steps, &ref_steps, k_u, 1, None,
            )
            .unwrap();
            tape.backward(terms.di).unwrap();
            (tape.scalar(terms.di), grads_flat(&tape, &ids))
        };
        checks.push(BatteryCheck {
            name: "dine_difference_objective",
            max_rel_error: gradient_check_multi(f, &point, &chain_steps),
            threshold: 1e-4,
        });
    }

    // generator through the channel: mean output (coarser tolerance, the
    // path crosses the power-normalization square root)
    {
        let mut r = rng::stream(seed, 73);
        let proto = tanh_ndt(&mut r, 1, true, 3, &[4], Constraint::AveragePower(1.0));
        let channel = ChannelModel::Ma1 { alpha: 0.5, dim: 1 };
        let (b, t) = (2, 5);
        let mut u = vec![0.0; b * t];
        rng::fill_uniform(&mut r, 0.05, 0.95, &mut u);
        let mut z_rng = rng::stream(seed, 74);
        let mut z = Vec::new();
        for _ in 0..b {
            z.extend(channel.colored_noise_sequence(&mut z_rng, t));
        }
        let point = flatten(&proto);
        let f = |p: &[f64]| {
            let mut net = proto.clone();
            unflatten(&mut net, p);
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let ids = bound.param_ids();
            let u_steps: Vec<NodeId> = (0..t)
                .map(|ti| {
                    let col: Vec<f64> = (0..b).map(|bi| u[bi * t + ti]).collect();
                    tape.constant(col, vec![b, 1])
                })
                .collect();
            let z_steps: Vec<NodeId> = (0..t)
                .map(|ti| {
                    let col: Vec<f64> = (0..b).map(|bi| z[bi * t + ti]).collect();
                    tape.constant(col, vec![b, 1])
                })
                .collect();
            let (_, y_ids) =
                rollout_closed_loop(&mut tape, &channel, &net, &bound, &u_steps, &z_steps)
                    .unwrap();
            let all = tape.concat_rows(&y_ids).unwrap();
            let loss = tape.mean(all).unwrap();
            tape.backward(loss).unwrap();
            (tape.scalar(loss), grads_flat(&tape, &ids))
        };
        checks.push(BatteryCheck {
            name: "ndt_channel_mean_output",
            max_rel_error: gradient_check_multi(f, &point, &chain_steps),
            threshold: 1e-3,
        });
    }

    // full chain: generator -> channel -> difference objective
    {
        let mut r = rng::stream(seed, 75);
        let proto = tanh_ndt(&mut r, 1, false, 3, &[4], Constraint::AveragePower(1.0));
        let net_y = tanh_dine(&mut r, 1, 3, &[4], 2);
        let net_xy = tanh_dine(&mut r, 2, 3, &[4], 2);
        let channel = ChannelModel::Awgn { sigma2: 1.0, dim: 1 };
        let (b, t, k_u) = (2, 4, 2);
        let mut u = vec![0.0; b * t];
        rng::fill_uniform(&mut r, 0.05, 0.95, &mut u);
        let mut z_rng = rng::stream(seed, 76);
        let mut z = Vec::new();
        for _ in 0..b {
            z.extend(channel.colored_noise_sequence(&mut z_rng, t));
        }
        let mut refs = vec![0.0; b * t * k_u];
        let law = fit_reference_law(&z, 1, 0.5).unwrap();
        let mut ref_rng = rng::stream(seed, 77);
        law.sample_into(&mut ref_rng, &mut refs);
        let point = flatten(&proto);
        let f = |p: &[f64]| {
            let mut ndt = proto.clone();
            unflatten(&mut ndt, p);
            let mut tape = Tape::new();
            let bound_ndt = ndt.bind(&mut tape);
            let bound_y = net_y.bind_frozen(&mut tape);
            let bound_xy = net_xy.bind_frozen(&mut tape);
            let ids = bound_ndt.param_ids();
            let u_steps: Vec<NodeId> = (0..t)
                .map(|ti| {
                    let col: Vec<f64> = (0..b).map(|bi| u[bi * t + ti]).collect();
                    tape.constant(col, vec![b, 1])
                })
                .collect();
            let z_steps: Vec<NodeId> = (0..t)
                .map(|ti| {
                    let col: Vec<f64> = (0..b).map(|bi| z[bi * t + ti]).collect();
                    tape.constant(col, vec![b, 1])
                })
                .collect();
            let (x_ids, y_ids) =
                rollout_closed_loop(&mut tape, &channel, &ndt, &bound_ndt, &u_steps, &z_steps)
                    .unwrap();
            let ref_steps: Vec<NodeId> = (0..t)
                .map(|ti| {
                    let mut col = Vec::with_capacity(b * k_u);
                    for bi in 0..b {
                        for j in 0..k_u {
                            col.push(refs[(bi * t + ti) * k_u + j]);
                        }
                    }
                    tape.constant(col, vec![b * k_u, 1])
                })
                .collect();
            let terms = dine_objective_graph(
                &mut tape, &bound_y, &bound_xy, &y_ids, &x_ids, &ref_steps, k_u, 1, None,
            )
            .unwrap();
            tape.backward(terms.di).unwrap();
            (tape.scalar(terms.di), grads_flat(&tape, &ids))
        };
        checks.push(BatteryCheck {
            name: "ndt_channel_dine_chain",
            max_rel_error: gradient_check_multi(f, &point, &chain_steps),
            threshold: 1e-4,
        });
    }

    checks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn square_at_two() {
        let err = gradient_check(|x| (x[0] * x[0], vec![2.0 * x[0]]), &[2.0], 1e-6);
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let f = |x: &[f64]| {
            let s = 1.0 / (1.0 + (-x[0]).exp());
            (s, vec![s * (1.0 - s)])
        };
        let err = gradient_check(f, &[0.0], 1e-6);
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn tape_matmul_sum_gradient_with_all_ones() {
        // gradient of sum(A.B) wrt A with B all-ones equals ones . B^T
        let b_data = vec![1.0; 6];
        let f = |a_flat: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(a_flat.to_vec(), vec![2, 2]);
            let b = tape.constant(b_data.clone(), vec![2, 3]);
            let p = tape.matmul(a, b).unwrap();
            let loss = tape.sum(p);
            tape.backward(loss).unwrap();
            (tape.scalar(loss), tape.grad(a).unwrap().to_vec())
        };
        let point = [0.3, -1.1, 0.9, 2.2];
        let err = gradient_check(f, &point, 1e-6);
        assert!(err < 1e-7, "err = {err}");
        // row-sums of ones: each adjoint entry is 3
        let (_, g) = f(&point);
        for v in g {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_log_mean_exp_gradient() {
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(vec![x[0], 0.0], vec![2]);
            let l = tape.log_mean_exp(leaf).unwrap();
            tape.backward(l).unwrap();
            (tape.scalar(l), vec![tape.grad(leaf).unwrap()[0]])
        };
        let (_, g) = f(&[0.0]);
        assert!((g[0] - 0.5).abs() < 1e-12);
        let err = gradient_check(f, &[0.0], 1e-6);
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn random_three_layer_net_matches_finite_differences() {
        // 2 -> 3 -> 3 -> 1 with tanh nonlinearities, parameters flattened.
        let dims = [(2usize, 3usize), (3, 3), (3, 1)];
        let n_params: usize = dims.iter().map(|&(i, o)| i * o + o).sum();
        let point: Vec<f64> = (0..n_params)
            .map(|i| ((i * 2654435761 % 1000) as f64 / 1000.0 - 0.5))
            .collect();
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let mut x = tape.constant(vec![0.7, -0.3], vec![1, 2]);
            let mut offset = 0;
            let mut leaves = Vec::new();
            for &(fan_in, fan_out) in &dims {
                let w = tape.leaf(
                    p[offset..offset + fan_in * fan_out].to_vec(),
                    vec![fan_in, fan_out],
                );
                offset += fan_in * fan_out;
                let b = tape.leaf(p[offset..offset + fan_out].to_vec(), vec![fan_out]);
                offset += fan_out;
                let z = tape.matmul(x, w).unwrap();
                let z = tape.add_bias(z, b).unwrap();
                x = tape.tanh(z);
                leaves.push((w, fan_in * fan_out));
                leaves.push((b, fan_out));
            }
            let loss = tape.sum(x);
            tape.backward(loss).unwrap();
            let mut grad = Vec::with_capacity(n_params);
            for (id, _) in &leaves {
                grad.extend_from_slice(tape.grad(*id).unwrap());
            }
            (tape.scalar(loss), grad)
        };
        let err = gradient_check(f, &point, 1e-6);
        assert!(err < 1e-4, "err = {err}");
    }
}
