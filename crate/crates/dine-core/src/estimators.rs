//! Donsker-Varadhan objectives and Monte-Carlo evaluation.
//!
//! The directed-information estimate is the difference of two DV-bound KL
//! estimates: one conditioning only on past outputs, one also on the causal
//! input prefix. Reference ("negative") samples are drawn uniformly from the
//! bounding box of the observed outputs; averaging each step over `k_u`
//! reference draws tames the variance of the exponential term.

use crate::error::{Error, Result};
use crate::nn::{dine_forward, BoundDine, BoundMlp, DineNetwork, MlpParams, Network, Param};
use crate::rng::{self, Rng};
use crate::tensor::{NodeId, Tape};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Uniform reference measure on a per-dimension box.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLaw {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub margin: f64,
}

impl ReferenceLaw {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        debug_assert_eq!(out.len() % self.dim(), 0);
        for point in out.chunks_mut(self.dim()) {
            for (v, (&lo, &hi)) in point.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
                *v = lo + (hi - lo) * rand::Rng::random::<f64>(rng);
            }
        }
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }
}

/// Smallest per-dimension bounding box of the samples, optionally widened by
/// `margin` times the per-dimension range. A dimension with zero range is
/// widened to +-max(margin, 1e-3) around the constant value.
pub fn fit_reference_law(samples: &[f64], dim: usize, margin: f64) -> Result<ReferenceLaw> {
    if samples.is_empty() || dim == 0 || samples.len() % dim != 0 {
        return Err(Error::EmptyInput("fit_reference_law"));
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for point in samples.chunks(dim) {
        for k in 0..dim {
            lo[k] = lo[k].min(point[k]);
            hi[k] = hi[k].max(point[k]);
        }
    }
    for k in 0..dim {
        let range = hi[k] - lo[k];
        if range == 0.0 {
            let pad = margin.max(1e-3);
            lo[k] -= pad;
            hi[k] += pad;
        } else {
            lo[k] -= margin * range;
            hi[k] += margin * range;
        }
    }
    Ok(ReferenceLaw { lo, hi, margin })
}

/// One training batch: `batch` sequences of `steps` positions.
/// `x` is [batch, steps, d_x], `y` is [batch, steps, d_y],
/// `refs` is [batch, steps, k_u, d_y], all row-major.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub refs: Vec<f64>,
    pub batch: usize,
    pub steps: usize,
    pub k_u: usize,
    pub d_x: usize,
    pub d_y: usize,
}

impl Batch {
    pub fn validate(&self) -> Result<()> {
        let expect = |name, actual, expected| {
            if actual != expected {
                Err(Error::DimensionMismatch {
                    what: name,
                    expected,
                    actual,
                })
            } else {
                Ok(())
            }
        };
        expect("batch.x", self.x.len(), self.batch * self.steps * self.d_x)?;
        expect("batch.y", self.y.len(), self.batch * self.steps * self.d_y)?;
        expect(
            "batch.refs",
            self.refs.len(),
            self.batch * self.steps * self.k_u * self.d_y,
        )
    }

    /// Joint outputs at step `t` as a [batch, d_y] tensor.
    fn y_step(&self, tape: &mut Tape, t: usize) -> NodeId {
        let d = self.d_y;
        let mut data = Vec::with_capacity(self.batch * d);
        for b in 0..self.batch {
            let base = (b * self.steps + t) * d;
            data.extend_from_slice(&self.y[base..base + d]);
        }
        tape.constant(data, vec![self.batch, d])
    }

    fn x_step(&self, tape: &mut Tape, t: usize) -> NodeId {
        let d = self.d_x;
        let mut data = Vec::with_capacity(self.batch * d);
        for b in 0..self.batch {
            let base = (b * self.steps + t) * d;
            data.extend_from_slice(&self.x[base..base + d]);
        }
        tape.constant(data, vec![self.batch, d])
    }

    /// Reference outputs at step `t` as a [batch*k_u, d_y] tensor, rows
    /// grouped by sequence.
    fn ref_step(&self, tape: &mut Tape, t: usize) -> NodeId {
        let d = self.d_y;
        let mut data = Vec::with_capacity(self.batch * self.k_u * d);
        for b in 0..self.batch {
            let base = ((b * self.steps + t) * self.k_u) * d;
            data.extend_from_slice(&self.refs[base..base + self.k_u * d]);
        }
        tape.constant(data, vec![self.batch * self.k_u, d])
    }
}

/// DV bound on a KL divergence from potentials:
/// mean(g_joint) - log(mean over all reference entries of exp(g_ref)).
/// `g_joint` is any tensor with n entries, `g_ref` is [n, k_u].
pub fn dv_kl_objective(tape: &mut Tape, g_joint: NodeId, g_ref: NodeId) -> Result<NodeId> {
    let joint_mean = tape.mean(g_joint)?;
    let ref_lme = tape.log_mean_exp(g_ref)?;
    tape.sub(joint_mean, ref_lme)
}

/// DV bound with in-batch negatives:
/// mean(g_joint) - log mean exp(g_neg). Requires n >= 2 so a nontrivial
/// derangement of the batch exists.
pub fn mine_objective(tape: &mut Tape, g_joint: NodeId, g_neg: NodeId) -> Result<NodeId> {
    let n = tape.tensor(g_joint).numel();
    if n < 2 {
        return Err(Error::EmptyInput("mine_objective: need at least 2 samples"));
    }
    let joint_mean = tape.mean(g_joint)?;
    let neg_lme = tape.log_mean_exp(g_neg)?;
    tape.sub(joint_mean, neg_lme)
}

/// The three scalars produced by one objective evaluation.
pub struct DineTerms {
    pub d_y: NodeId,
    pub d_yx: NodeId,
    pub di: NodeId,
}

fn clamp_opt(tape: &mut Tape, id: NodeId, clip: Option<f64>) -> NodeId {
    match clip {
        Some(c) => tape.clamp_max(id, c),
        None => id,
    }
}

/// Build the directed-information objective on an existing tape.
///
/// `y_steps[t]` is [b, d_y], `x_steps[t]` is [b, d_x], `ref_steps[t]` is
/// [b*k_u, d_y]. The first `burn_in` steps are excluded from the objective
/// to damp the zero-initial-state transient. Per-sequence DV estimates are
/// averaged over the batch.
#[allow(clippy::too_many_arguments)]
pub fn dine_objective_graph(
    tape: &mut Tape,
    bound_y: &BoundDine,
    bound_xy: &BoundDine,
    y_steps: &[NodeId],
    x_steps: &[NodeId],
    ref_steps: &[NodeId],
    k_u: usize,
    burn_in: usize,
    clip_exponent: Option<f64>,
) -> Result<DineTerms> {
    let t_total = y_steps.len();
    if burn_in >= t_total {
        return Err(Error::Config(format!(
            "burn_in {burn_in} must be smaller than the sequence length {t_total}"
        )));
    }
    let b = tape.shape(y_steps[0])[0];

    // inputs for the causally-conditioned network: [y, x] pairs
    let mut yx_steps = Vec::with_capacity(t_total);
    let mut ref_yx_steps = Vec::with_capacity(t_total);
    for t in 0..t_total {
        yx_steps.push(tape.concat_cols(&[y_steps[t], x_steps[t]])?);
        let x_rep = tape.repeat_rows(x_steps[t], k_u)?;
        ref_yx_steps.push(tape.concat_cols(&[ref_steps[t], x_rep])?);
    }

    let (gj_y, gr_y) = dine_forward(tape, bound_y, y_steps, ref_steps, k_u)?;
    let (gj_xy, gr_xy) = dine_forward(tape, bound_xy, &yx_steps, &ref_yx_steps, k_u)?;

    let d_y = per_sequence_dv(tape, &gj_y, &gr_y, b, k_u, burn_in, clip_exponent)?;
    let d_yx = per_sequence_dv(tape, &gj_xy, &gr_xy, b, k_u, burn_in, clip_exponent)?;
    let di = tape.sub(d_yx, d_y)?;
    Ok(DineTerms { d_y, d_yx, di })
}

/// Average over the batch of per-sequence DV estimates.
fn per_sequence_dv(
    tape: &mut Tape,
    g_joint: &[NodeId],
    g_ref: &[NodeId],
    b: usize,
    k_u: usize,
    burn_in: usize,
    clip_exponent: Option<f64>,
) -> Result<NodeId> {
    let joint = tape.concat_cols(&g_joint[burn_in..])?; // [b, t']
    let joint_means = tape.mean_rows(joint)?; // [b]

    let mut ref_cols = Vec::with_capacity(g_ref.len() - burn_in);
    for &id in &g_ref[burn_in..] {
        let grouped = tape.reshape(id, vec![b, k_u])?;
        ref_cols.push(grouped);
    }
    let refs = tape.concat_cols(&ref_cols)?; // [b, t'*k_u]
    let refs = clamp_opt(tape, refs, clip_exponent);
    let ref_lme = tape.log_mean_exp_rows(refs)?; // [b]

    let per_seq = tape.sub(joint_means, ref_lme)?;
    tape.mean(per_seq)
}

/// Bind both potential networks and evaluate the objective on a batch of
/// recorded trajectories. Returns the bound networks so the caller can read
/// parameter gradients after `backward`.
pub fn dine_objective(
    tape: &mut Tape,
    batch: &Batch,
    net_y: &DineNetwork,
    net_xy: &DineNetwork,
    burn_in: usize,
    clip_exponent: Option<f64>,
) -> Result<(DineTerms, BoundDine, BoundDine)> {
    batch.validate()?;
    if net_y.input_dim != batch.d_y {
        return Err(Error::DimensionMismatch {
            what: "net_y input",
            expected: batch.d_y,
            actual: net_y.input_dim,
        });
    }
    if net_xy.input_dim != batch.d_y + batch.d_x {
        return Err(Error::DimensionMismatch {
            what: "net_xy input",
            expected: batch.d_y + batch.d_x,
            actual: net_xy.input_dim,
        });
    }
    let bound_y = net_y.bind(tape);
    let bound_xy = net_xy.bind(tape);
    let y_steps: Vec<NodeId> = (0..batch.steps).map(|t| batch.y_step(tape, t)).collect();
    let x_steps: Vec<NodeId> = (0..batch.steps).map(|t| batch.x_step(tape, t)).collect();
    let ref_steps: Vec<NodeId> = (0..batch.steps).map(|t| batch.ref_step(tape, t)).collect();
    let terms = dine_objective_graph(
        tape,
        &bound_y,
        &bound_xy,
        &y_steps,
        &x_steps,
        &ref_steps,
        batch.k_u,
        burn_in,
        clip_exponent,
    )?;
    Ok((terms, bound_y, bound_xy))
}

/// Feedforward critic for the memoryless special case.
#[derive(Debug, Clone)]
pub struct MineNetwork {
    pub mlp: MlpParams,
    pub d_x: usize,
    pub d_y: usize,
}

impl MineNetwork {
    pub fn new(rng: &mut Rng, d_x: usize, d_y: usize, fc_hidden: &[usize], prefix: &str) -> Self {
        let mut dims = vec![d_y + d_x];
        dims.extend_from_slice(fc_hidden);
        dims.push(1);
        Self {
            mlp: MlpParams::new(rng, &dims, crate::nn::Activation::Relu, prefix),
            d_x,
            d_y,
        }
    }
}

impl Network for MineNetwork {
    fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}

/// Mutual-information objective on paired samples. `x` is [m, d_x], `y` is
/// [m, d_y]; negatives are one cyclic shift of y within the batch.
pub fn mine_objective_graph(
    tape: &mut Tape,
    critic: &BoundMlp,
    x: NodeId,
    y: NodeId,
    clip_exponent: Option<f64>,
) -> Result<NodeId> {
    let m = tape.shape(x)[0];
    if m < 2 {
        return Err(Error::EmptyInput("mine_objective: need at least 2 samples"));
    }
    let joint_in = tape.concat_cols(&[y, x])?;
    let g_joint = critic.forward(tape, joint_in)?;
    let y_neg = tape.roll_rows(y, 1)?;
    let neg_in = tape.concat_cols(&[y_neg, x])?;
    let g_neg = critic.forward(tape, neg_in)?;
    let g_neg = clamp_opt(tape, g_neg, clip_exponent);
    mine_objective(tape, g_joint, g_neg)
}

/// Final estimate with its Monte-Carlo uncertainty and the exact
/// configuration that produced it.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EstimateReport {
    pub estimate_nats: f64,
    pub stderr: f64,
    pub n_eval: usize,
    pub d_hat_y: f64,
    pub d_hat_yx: f64,
    pub seed: u64,
    pub config: serde_json::Value,
}

/// Source of evaluation blocks: either recorded trajectories or a frozen
/// generator-plus-channel simulator. Block indices map deterministically to
/// data, so concurrent block evaluation cannot change the result.
pub trait EvalBlocks: Sync {
    /// (d_x, d_y)
    fn dims(&self) -> (usize, usize);
    /// Number of blocks of length `block_len` available (simulators are
    /// unbounded and return `requested`).
    fn available_blocks(&self, block_len: usize, requested: usize) -> usize;
    /// Materialize block `idx`: x is [block_len, d_x], y is [block_len, d_y].
    fn block(&self, idx: usize, block_len: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)>;
}

pub enum EvalEstimator<'a> {
    Dine {
        net_y: &'a DineNetwork,
        net_xy: &'a DineNetwork,
        law: &'a ReferenceLaw,
    },
    Mine {
        critic: &'a MineNetwork,
    },
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub block_len: usize,
    pub burn_in: usize,
    pub clip_exponent: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            block_len: 1000,
            burn_in: 5,
            clip_exponent: None,
        }
    }
}

const EVAL_REF_STREAM: u64 = 3_000_000;

/// Stream `n_eval` time steps in blocks, accumulate both DV terms per block,
/// and report their means. The standard error comes from the spread of the
/// per-block estimates; the estimate itself is exactly
/// `d_hat_yx - d_hat_y` of the averaged terms.
pub fn monte_carlo_evaluate<S: EvalBlocks>(
    estimator: &EvalEstimator,
    source: &S,
    n_eval: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<EstimateReport> {
    if n_eval < 1 {
        return Err(Error::EmptyInput("monte_carlo_evaluate"));
    }
    let block_len = opts.block_len.min(n_eval).max(opts.burn_in + 1);
    let requested = (n_eval / block_len).max(1);
    let n_blocks = source.available_blocks(block_len, requested);
    if n_blocks == 0 {
        return Err(Error::EmptyInput("monte_carlo_evaluate: no blocks available"));
    }

    let eval_one = |idx: usize| -> Result<(f64, f64)> {
        let (x, y) = source.block(idx, block_len, seed)?;
        evaluate_block(estimator, &x, &y, block_len, seed, idx, opts)
    };

    let per_block: Result<Vec<(f64, f64)>> = {
        #[cfg(feature = "parallel")]
        {
            if crate::kernels::parallel_enabled() {
                (0..n_blocks).into_par_iter().map(eval_one).collect()
            } else {
                (0..n_blocks).map(eval_one).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..n_blocks).map(eval_one).collect()
        }
    };
    let per_block = per_block?;

    // fixed-order reduction
    let mut sum_y = 0.0;
    let mut sum_yx = 0.0;
    for &(dy, dyx) in &per_block {
        sum_y += dy;
        sum_yx += dyx;
    }
    let d_hat_y = sum_y / n_blocks as f64;
    let d_hat_yx = sum_yx / n_blocks as f64;
    let estimate = d_hat_yx - d_hat_y;

    let stderr = if n_blocks > 1 {
        let block_estimates: Vec<f64> = per_block.iter().map(|&(dy, dyx)| dyx - dy).collect();
        let mean: f64 = block_estimates.iter().sum::<f64>() / n_blocks as f64;
        let var: f64 = block_estimates
            .iter()
            .map(|e| (e - mean) * (e - mean))
            .sum::<f64>()
            / (n_blocks - 1) as f64;
        (var / n_blocks as f64).sqrt()
    } else {
        0.0
    };

    Ok(EstimateReport {
        estimate_nats: estimate,
        stderr,
        n_eval: n_blocks * block_len,
        d_hat_y,
        d_hat_yx,
        seed,
        config: serde_json::Value::Null,
    })
}

fn evaluate_block(
    estimator: &EvalEstimator,
    x: &[f64],
    y: &[f64],
    block_len: usize,
    seed: u64,
    idx: usize,
    opts: &EvalOptions,
) -> Result<(f64, f64)> {
    match estimator {
        EvalEstimator::Dine { net_y, net_xy, law } => {
            let k_u = net_y.k_u;
            let d_y = law.dim();
            let mut refs = vec![0.0; block_len * k_u * d_y];
            let mut ref_rng = rng::stream(seed, EVAL_REF_STREAM + idx as u64);
            law.sample_into(&mut ref_rng, &mut refs);
            let batch = Batch {
                x: x.to_vec(),
                y: y.to_vec(),
                refs,
                batch: 1,
                steps: block_len,
                k_u,
                d_x: x.len() / block_len,
                d_y,
            };
            let mut tape = Tape::new();
            let (terms, _, _) =
                dine_objective(&mut tape, &batch, net_y, net_xy, opts.burn_in, opts.clip_exponent)?;
            Ok((tape.scalar(terms.d_y), tape.scalar(terms.d_yx)))
        }
        EvalEstimator::Mine { critic } => {
            let mut tape = Tape::new();
            let bound = critic.mlp.bind(&mut tape);
            let kept = block_len - opts.burn_in;
            let d_x = critic.d_x;
            let d_y = critic.d_y;
            let x_id = tape.constant(x[opts.burn_in * d_x..].to_vec(), vec![kept, d_x]);
            let y_id = tape.constant(y[opts.burn_in * d_y..].to_vec(), vec![kept, d_y]);
            let mi = mine_objective_graph(&mut tape, &bound, x_id, y_id, opts.clip_exponent)?;
            Ok((0.0, tape.scalar(mi)))
        }
    }
}

/// Gradient buffers for a list of bound parameters, zero-filled when a
/// parameter was not reached by the backward sweep.
pub fn collect_grads(tape: &Tape, ids: &[NodeId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.tensor(id).numel()])
        })
        .collect()
}
