use dine_core::channels::{rollout_closed_loop, ChannelModel};
use dine_core::estimators::{dine_objective_graph, fit_reference_law};
use dine_core::nn::{Activation, Constraint, DineNetwork, LstmParams, MlpParams, NdtNetwork, Network};
use dine_core::rng;
use dine_core::tensor::{NodeId, Tape};

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
fn tanh_dine(rng: &mut rng::Rng, input_dim: usize, hidden: usize, fc: &[usize], k_u: usize) -> DineNetwork {
    let lstm = LstmParams::new(rng, input_dim, hidden, "g");
    let mut dims = vec![hidden]; dims.extend_from_slice(fc); dims.push(1);
    DineNetwork { lstm, head: MlpParams::new(rng, &dims, Activation::Tanh, "g"), input_dim, k_u }
}
fn tanh_ndt(rng: &mut rng::Rng, dim: usize, feedback: bool, hidden: usize, fc: &[usize], constraint: Constraint) -> NdtNetwork {
    let input_dim = 2 * dim + if feedback { dim } else { 0 };
    let lstm = LstmParams::new(rng, input_dim, hidden, "g");
    let mut dims = vec![hidden]; dims.extend_from_slice(fc); dims.push(dim);
    NdtNetwork { lstm: Some(lstm), mlp: MlpParams::new(rng, &dims, Activation::Tanh, "g"), constraint, feedback, noise_dim: dim, output_dim: dim }
}

fn main() {
    let seed = 0u64;
    let mut r = rng::stream(seed, 75);
    let proto = tanh_ndt(&mut r, 1, false, 3, &[4], Constraint::AveragePower(1.0));
    let net_y = tanh_dine(&mut r, 1, 3, &[4], 2);
    let net_xy = tanh_dine(&mut r, 2, 3, &[4], 2);
    let channel = ChannelModel::Awgn { sigma2: 1.0, dim: 1 };
    let (b, t, k_u) = (2usize, 4usize, 2usize);
    let mut u = vec![0.0; b * t];
    rng::fill_uniform(&mut r, 0.05, 0.95, &mut u);
    let mut z_rng = rng::stream(seed, 76);
    let mut z = Vec::new();
    for _ in 0..b { z.extend(channel.colored_noise_sequence(&mut z_rng, t)); }
    let mut refs = vec![0.0; b * t * k_u];
    let law = fit_reference_law(&z, 1, 0.5).unwrap();
    let mut ref_rng = rng::stream(seed, 77);
    law.sample_into(&mut ref_rng, &mut refs);
    let point = flatten(&proto);
    let f = |p: &[f64]| -> (f64, Vec<f64>) {
        let mut ndt = proto.clone();
        unflatten(&mut ndt, p);
        let mut tape = Tape::new();
        let bound_ndt = ndt.bind(&mut tape);
        let bound_y = net_y.bind_frozen(&mut tape);
        let bound_xy = net_xy.bind_frozen(&mut tape);
        let ids = bound_ndt.param_ids();
        let u_steps: Vec<NodeId> = (0..t).map(|ti| {
            let col: Vec<f64> = (0..b).map(|bi| u[bi * t + ti]).collect();
            tape.constant(col, vec![b, 1])
        }).collect();
        let z_steps: Vec<NodeId> = (0..t).map(|ti| {
            let col: Vec<f64> = (0..b).map(|bi| z[bi * t + ti]).collect();
            tape.constant(col, vec![b, 1])
        }).collect();
        let (x_ids, y_ids) = rollout_closed_loop(&mut tape, &channel, &ndt, &bound_ndt, &u_steps, &z_steps).unwrap();
        let ref_steps: Vec<NodeId> = (0..t).map(|ti| {
            let mut col = Vec::with_capacity(b * k_u);
            for bi in 0..b { for j in 0..k_u { col.push(refs[(bi * t + ti) * k_u + j]); } }
            tape.constant(col, vec![b * k_u, 1])
        }).collect();
        let terms = dine_objective_graph(&mut tape, &bound_y, &bound_xy, &y_ids, &x_ids, &ref_steps, k_u, 1, None).unwrap();
        tape.backward(terms.di).unwrap();
        let mut g = Vec::new();
        for id in ids { g.extend_from_slice(tape.grad(id).unwrap_or(&vec![0.0; tape.tensor(id).numel()])); }
        (tape.scalar(terms.di), g)
    };

    let (_, ad) = f(&point);
    for step in [1e-6f64, 3e-6, 1e-5, 3e-5, 1e-4] {
        let mut worst = (0usize, 0.0f64, 0.0f64, 0.0f64);
        let mut xp = point.clone();
        for i in 0..point.len() {
            let orig = xp[i];
            xp[i] = orig + step;
            let (fp, _) = f(&xp);
            xp[i] = orig - step;
            let (fm, _) = f(&xp);
            xp[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let rel = (ad[i] - fd).abs() / (fd.abs() + 1e-8);
            if rel > worst.3 { worst = (i, ad[i], fd, rel); }
        }
        println!("step {step:.0e}: worst coord {:3}: ad={:+.6e} fd={:+.6e} |diff|={:.2e} rel={:.3e}",
                 worst.0, worst.1, worst.2, (worst.1-worst.2).abs(), worst.3);
    }
}
