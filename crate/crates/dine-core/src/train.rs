//! Training loops, configuration, and dataset handling.
//!
//! `train_dine` fits the two potential networks on recorded trajectories
//! (estimation mode); `train_dine_ndt` alternates potential-network updates
//! with generator updates through a differentiable channel rollout
//! (capacity mode). Both end with a long Monte-Carlo evaluation.

use std::path::Path;

use crate::baselines::CapacityQuery;
use crate::channels::{rollout_closed_loop, ChannelModel};
use crate::error::{Error, Result};
use crate::estimators::{
    dine_objective,
    collect_grads, dine_objective_graph, fit_reference_law, mine_objective_graph,
    monte_carlo_evaluate, Batch, EstimateReport, EvalBlocks, EvalEstimator, EvalOptions,
    MineNetwork, ReferenceLaw,
};
use crate::nn::{
    ndt_forward, save_checkpoint, Constraint, DineNetwork, NdtNetwork, Network,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::tensor::{NodeId, Tape};

// rng stream ids; evaluation blocks use 1_000_000 + idx and 2_000_000 + idx
const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
const STREAM_REFS: u64 = 2;
const STREAM_CHANNEL: u64 = 4;
const EVAL_U_STREAM: u64 = 1_000_000;
const EVAL_Z_STREAM: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Estimate,
    Capacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Dine,
    Mine,
}

/// Constraint selector mirrored by the config file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    pub power: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    None,
    AveragePower,
    PeakPower,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            kind: ConstraintKind::AveragePower,
            power: 1.0,
            amplitude: 1.0,
        }
    }
}

impl ConstraintSpec {
    pub fn to_constraint(&self) -> Result<Constraint> {
        let c = match self.kind {
            ConstraintKind::None => Constraint::None,
            ConstraintKind::AveragePower => Constraint::AveragePower(self.power),
            ConstraintKind::PeakPower => Constraint::PeakPower(self.amplitude),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Full training configuration. The TOML/JSON config file mirrors these
/// field names exactly; command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub estimator: EstimatorKind,
    pub channel: Option<ChannelModel>,
    pub dataset: Option<String>,
    pub feedback: bool,
    pub constraint: ConstraintSpec,
    pub batch_size: usize,
    pub seq_len: usize,
    pub k_u: usize,
    pub burn_in: usize,
    pub dine_lstm_hidden: usize,
    pub dine_fc_hidden: Vec<usize>,
    pub ndt_lstm_hidden: usize,
    pub ndt_fc_hidden: Vec<usize>,
    pub lr_dine: f64,
    pub lr_ndt: f64,
    pub steps: usize,
    pub r_dine: usize,
    pub r_ndt: usize,
    pub eval_n: usize,
    pub eval_block: usize,
    pub ref_refresh: usize,
    pub clip_exponent: Option<f64>,
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Capacity,
            estimator: EstimatorKind::Dine,
            channel: None,
            dataset: None,
            feedback: false,
            constraint: ConstraintSpec::default(),
            batch_size: 32,
            seq_len: 32,
            k_u: 16,
            burn_in: 5,
            dine_lstm_hidden: 50,
            dine_fc_hidden: vec![100, 50],
            ndt_lstm_hidden: 100,
            ndt_fc_hidden: vec![100, 100],
            lr_dine: 1e-3,
            lr_ndt: 1e-4,
            steps: 5000,
            r_dine: 3,
            r_ndt: 1,
            eval_n: 100_000,
            eval_block: 1000,
            ref_refresh: 100,
            clip_exponent: None,
            early_stop: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size < 1 || self.seq_len < 1 {
            return bail("batch_size and seq_len must be at least 1");
        }
        if self.steps < 1 {
            return bail("steps must be at least 1");
        }
        if self.eval_n < 1000 {
            return bail("eval_n must be at least 1000");
        }
        if self.burn_in >= self.seq_len {
            return bail("burn_in must be smaller than seq_len");
        }
        if self.k_u < 1 {
            return bail("k_u must be at least 1");
        }
        match self.mode {
            Mode::Estimate => {
                if self.dataset.is_none() {
                    return bail("estimate mode needs a dataset");
                }
            }
            Mode::Capacity => {
                let Some(channel) = &self.channel else {
                    return bail("capacity mode needs a channel");
                };
                channel.validate()?;
                if self.r_dine < 1 || self.r_ndt < 1 {
                    return bail("alternation ratio needs r_dine >= 1 and r_ndt >= 1");
                }
                if self.feedback && self.estimator == EstimatorKind::Mine {
                    return bail("feedback requires the directed-information estimator");
                }
                self.constraint.to_constraint()?;
            }
        }
        if self.feedback && self.mode == Mode::Estimate {
            return bail("feedback only applies to capacity mode");
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialization cannot fail")
    }

    /// Baseline value for the configured channel and constraint, when one
    /// is known.
    pub fn baseline(&self) -> Option<(f64, &'static str)> {
        let channel = self.channel.clone()?;
        let (power, amplitude) = match self.constraint.kind {
            ConstraintKind::AveragePower => (Some(self.constraint.power), None),
            ConstraintKind::PeakPower => (None, Some(self.constraint.amplitude)),
            ConstraintKind::None => return None,
        };
        CapacityQuery {
            channel,
            power,
            amplitude,
            feedback: self.feedback,
        }
        .evaluate()
        .ok()
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub len: usize,
}

/// Recorded (input, output) trajectory pairs with fixed dimensions.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    pub d_x: usize,
    pub d_y: usize,
}

impl TrajectoryDataset {
    pub fn new(trajectories: Vec<Trajectory>, d_x: usize, d_y: usize) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        for t in &trajectories {
            if t.x.len() != t.len * d_x || t.y.len() != t.len * d_y {
                return Err(Error::DimensionMismatch {
                    what: "trajectory",
                    expected: t.len * d_x,
                    actual: t.x.len(),
                });
            }
            if t.x.iter().chain(t.y.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Config("dataset contains non-finite values".into()));
            }
        }
        Ok(Self {
            trajectories,
            d_x,
            d_y,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len).sum()
    }

    fn window_count(&self, t: usize) -> usize {
        self.trajectories
            .iter()
            .map(|tr| tr.len.saturating_sub(t - 1))
            .sum()
    }

    /// Draw `b` uniformly random windows of length `t` into a batch layout.
    fn sample_windows(&self, b: usize, t: usize, k_u: usize, rng: &mut Rng) -> Result<Batch> {
        let total = self.window_count(t);
        if total == 0 {
            return Err(Error::Config(format!(
                "no trajectory long enough for seq_len {t}"
            )));
        }
        let mut x = Vec::with_capacity(b * t * self.d_x);
        let mut y = Vec::with_capacity(b * t * self.d_y);
        for _ in 0..b {
            let mut idx = rand::Rng::random_range(rng, 0..total);
            for tr in &self.trajectories {
                let windows = tr.len.saturating_sub(t - 1);
                if idx < windows {
                    x.extend_from_slice(&tr.x[idx * self.d_x..(idx + t) * self.d_x]);
                    y.extend_from_slice(&tr.y[idx * self.d_y..(idx + t) * self.d_y]);
                    break;
                }
                idx -= windows;
            }
        }
        Ok(Batch {
            x,
            y,
            refs: vec![0.0; b * t * k_u * self.d_y],
            batch: b,
            steps: t,
            k_u,
            d_x: self.d_x,
            d_y: self.d_y,
        })
    }
}

impl EvalBlocks for TrajectoryDataset {
    fn dims(&self) -> (usize, usize) {
        (self.d_x, self.d_y)
    }

    fn available_blocks(&self, block_len: usize, requested: usize) -> usize {
        let total: usize = self.trajectories.iter().map(|t| t.len / block_len).sum();
        total.min(requested)
    }

    fn block(&self, idx: usize, block_len: usize, _seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut remaining = idx;
        for tr in &self.trajectories {
            let here = tr.len / block_len;
            if remaining < here {
                let start = remaining * block_len;
                let x = tr.x[start * self.d_x..(start + block_len) * self.d_x].to_vec();
                let y = tr.y[start * self.d_y..(start + block_len) * self.d_y].to_vec();
                return Ok((x, y));
            }
            remaining -= here;
        }
        Err(Error::Config(format!("block index {idx} out of range")))
    }
}

/// Parse the trajectory CSV schema `traj,t,x0..x{dx-1},y0..y{dy-1}` with
/// rows sorted by (traj, t). Malformed rows are rejected with their line
/// number.
pub fn ingest_csv(path: &Path) -> Result<TrajectoryDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(Error::Csv {
            line: 1,
            message: "empty file".into(),
        })?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 4 || cols[0] != "traj" || cols[1] != "t" {
        return Err(Error::Csv {
            line: 1,
            message: format!("header must start with traj,t,x0..,y0.. (got {header:?})"),
        });
    }
    let d_x = cols[2..]
        .iter()
        .take_while(|c| c.starts_with('x'))
        .count();
    let d_y = cols.len() - 2 - d_x;
    for (k, c) in cols[2..2 + d_x].iter().enumerate() {
        if **c != format!("x{k}") {
            return Err(Error::Csv {
                line: 1,
                message: format!("expected column x{k}, got {c}"),
            });
        }
    }
    for (k, c) in cols[2 + d_x..].iter().enumerate() {
        if **c != format!("y{k}") {
            return Err(Error::Csv {
                line: 1,
                message: format!("expected column y{k}, got {c}"),
            });
        }
    }
    if d_x == 0 || d_y == 0 {
        return Err(Error::Csv {
            line: 1,
            message: "need at least one x and one y column".into(),
        });
    }

    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut current: Option<(i64, i64, Trajectory)> = None; // (traj id, last t, data)
    for (lineno0, raw) in lines {
        let line = lineno0 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.trim().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Csv {
                line,
                message: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let traj_id: i64 = fields[0].parse().map_err(|_| Error::Csv {
            line,
            message: format!("bad trajectory id {:?}", fields[0]),
        })?;
        let t: i64 = fields[1].parse().map_err(|_| Error::Csv {
            line,
            message: format!("bad time index {:?}", fields[1]),
        })?;
        let mut values = Vec::with_capacity(d_x + d_y);
        for f in &fields[2..] {
            let v: f64 = f.parse().map_err(|_| Error::Csv {
                line,
                message: format!("non-numeric cell {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    line,
                    message: format!("non-finite cell {f:?}"),
                });
            }
            values.push(v);
        }
        match &mut current {
            Some((id, last_t, tr)) if *id == traj_id => {
                if t <= *last_t {
                    return Err(Error::Csv {
                        line,
                        message: format!("rows not sorted by (traj, t): t {t} after {last_t}"),
                    });
                }
                *last_t = t;
                tr.x.extend_from_slice(&values[..d_x]);
                tr.y.extend_from_slice(&values[d_x..]);
                tr.len += 1;
            }
            Some((id, _, _)) if *id > traj_id => {
                return Err(Error::Csv {
                    line,
                    message: format!("rows not sorted by (traj, t): traj {traj_id} after {id}"),
                });
            }
            _ => {
                if let Some((_, _, done)) = current.take() {
                    trajectories.push(done);
                }
                current = Some((
                    traj_id,
                    t,
                    Trajectory {
                        x: values[..d_x].to_vec(),
                        y: values[d_x..].to_vec(),
                        len: 1,
                    },
                ));
            }
        }
    }
    if let Some((_, _, done)) = current.take() {
        trajectories.push(done);
    }
    TrajectoryDataset::new(trajectories, d_x, d_y)
}

/// Write a dataset in the ingestion schema.
pub fn write_csv(path: &Path, dataset: &TrajectoryDataset) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("traj,t");
    for k in 0..dataset.d_x {
        let _ = write!(out, ",x{k}");
    }
    for k in 0..dataset.d_y {
        let _ = write!(out, ",y{k}");
    }
    out.push('\n');
    for (id, tr) in dataset.trajectories.iter().enumerate() {
        for t in 0..tr.len {
            let _ = write!(out, "{id},{t}");
            for v in &tr.x[t * dataset.d_x..(t + 1) * dataset.d_x] {
                let _ = write!(out, ",{v}");
            }
            for v in &tr.y[t * dataset.d_y..(t + 1) * dataset.d_y] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Simulate a dataset by driving a channel open loop with i.i.d. Gaussian
/// inputs of the given per-entry variance (zero variance gives zero inputs).
pub fn gaussian_input_dataset(
    channel: &ChannelModel,
    input_variance: f64,
    steps: usize,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    channel.validate()?;
    let d = channel.dim();
    let scale = input_variance.sqrt();
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut x_rng = rng::stream(seed, 10 + i as u64);
        let mut c_rng = rng::stream(seed, 100_000 + i as u64);
        let mut x = vec![0.0; steps * d];
        rng::fill_standard_normal(&mut x_rng, &mut x);
        x.iter_mut().for_each(|v| *v *= scale);
        let y = channel.rollout_open_loop(&x, steps, &mut c_rng)?;
        trajectories.push(Trajectory { x, y, len: steps });
    }
    TrajectoryDataset::new(trajectories, d, d)
}

/// Independent i.i.d. standard Gaussian x and y (the null case: the
/// directed-information rate is exactly zero).
pub fn independent_gaussian_dataset(
    steps: usize,
    n_traj: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut r = rng::stream(seed, 10 + i as u64);
        let mut x = vec![0.0; steps];
        let mut y = vec![0.0; steps];
        rng::fill_standard_normal(&mut r, &mut x);
        rng::fill_standard_normal(&mut r, &mut y);
        trajectories.push(Trajectory { x, y, len: steps });
    }
    TrajectoryDataset::new(trajectories, 1, 1)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub d_hat_y: f64,
    pub d_hat_yx: f64,
    pub estimate_nats: f64,
}

/// `step,d_hat_y,d_hat_yx,estimate_nats` rows.
pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("step,d_hat_y,d_hat_yx,estimate_nats\n");
    for p in curve {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.step, p.d_hat_y, p.d_hat_yx, p.estimate_nats
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub enum TrainedEstimator {
    Dine {
        net_y: DineNetwork,
        net_xy: DineNetwork,
        law: ReferenceLaw,
    },
    Mine {
        critic: MineNetwork,
    },
}

pub struct TrainOutput {
    pub estimator: TrainedEstimator,
    pub ndt: Option<NdtNetwork>,
    pub curve: Vec<CurvePoint>,
    pub report: EstimateReport,
}

fn check_finite(step: usize, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            step,
            message: format!("{name} became {v}; parameters hold the last finite step"),
        })
    }
}

fn adam_update(net: &mut dyn Network, adam: &mut Adam, grads: &[Vec<f64>]) -> Result<()> {
    let mut params = net.params_mut();
    let mut slices: Vec<&mut [f64]> = params.iter_mut().map(|p| p.data.as_mut_slice()).collect();
    let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
    adam.step(&mut slices, &grad_refs)
}

fn plateau(curve: &[CurvePoint]) -> bool {
    const WINDOW: usize = 100;
    const GAP: usize = 500;
    if curve.len() < WINDOW + GAP {
        return false;
    }
    let mean_of = |end: usize| -> f64 {
        curve[end - WINDOW..end]
            .iter()
            .map(|p| p.estimate_nats)
            .sum::<f64>()
            / WINDOW as f64
    };
    (mean_of(curve.len()) - mean_of(curve.len() - GAP)).abs() < 1e-4
}

fn abort_with_checkpoint(
    err: Error,
    nets: &[&dyn Network],
    abort_checkpoint: Option<&Path>,
) -> Error {
    if let Some(path) = abort_checkpoint {
        let _ = save_checkpoint(path, nets);
    }
    err
}

/// Fit the estimator on recorded trajectories and evaluate it (Step 1 and
/// Step 2 of the estimation procedure). `abort_checkpoint`, when set, is
/// where the last finite parameters are written if the loss degenerates.
pub fn train_dine(
    config: &TrainConfig,
    dataset: &TrajectoryDataset,
    abort_checkpoint: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    match config.estimator {
        EstimatorKind::Dine => train_dine_on_dataset(config, dataset, abort_checkpoint),
        EstimatorKind::Mine => train_mine_on_dataset(config, dataset, abort_checkpoint),
    }
}

fn train_dine_on_dataset(
    config: &TrainConfig,
    dataset: &TrajectoryDataset,
    abort_checkpoint: Option<&Path>,
) -> Result<TrainOutput> {
    let (d_x, d_y) = (dataset.d_x, dataset.d_y);
    let mut init = rng::stream(config.seed, STREAM_INIT);
    let mut net_y = DineNetwork::new(
        &mut init,
        d_y,
        config.dine_lstm_hidden,
        &config.dine_fc_hidden,
        config.k_u,
        "dine_y",
    );
    let mut net_xy = DineNetwork::new(
        &mut init,
        d_y + d_x,
        config.dine_lstm_hidden,
        &config.dine_fc_hidden,
        config.k_u,
        "dine_xy",
    );
    let mut adam_y = Adam::new(AdamConfig::ascent(config.lr_dine), &net_y.param_sizes());
    let mut adam_xy = Adam::new(AdamConfig::ascent(config.lr_dine), &net_xy.param_sizes());

    let mut batch_rng = rng::stream(config.seed, STREAM_BATCH);
    let mut ref_rng = rng::stream(config.seed, STREAM_REFS);
    let mut law: Option<ReferenceLaw> = None;
    let mut curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut batch =
            dataset.sample_windows(config.batch_size, config.seq_len, config.k_u, &mut batch_rng)?;
        if step % config.ref_refresh == 0 || law.is_none() {
            law = Some(fit_reference_law(&batch.y, d_y, 0.0)?);
        }
        let law_ref = law.as_ref().unwrap();
        law_ref.sample_into(&mut ref_rng, &mut batch.refs);

        let mut tape = Tape::new();
        let (terms, bound_y, bound_xy) = dine_objective(
            &mut tape,
            &batch,
            &net_y,
            &net_xy,
            config.burn_in,
            config.clip_exponent,
        )?;
        let (dy_v, dyx_v) = (tape.scalar(terms.d_y), tape.scalar(terms.d_yx));
        let guard = check_finite(step, "objective", dy_v + dyx_v);
        if let Err(e) = guard {
            return Err(abort_with_checkpoint(e, &[&net_y, &net_xy], abort_checkpoint));
        }
        let loss = tape.add(terms.d_y, terms.d_yx)?;
        tape.backward(loss)?;
        let grads_y = collect_grads(&tape, &bound_y.param_ids());
        let grads_xy = collect_grads(&tape, &bound_xy.param_ids());
        drop(tape);
        adam_update(&mut net_y, &mut adam_y, &grads_y)?;
        adam_update(&mut net_xy, &mut adam_xy, &grads_xy)?;

        curve.push(CurvePoint {
            step,
            d_hat_y: dy_v,
            d_hat_yx: dyx_v,
            estimate_nats: dyx_v - dy_v,
        });
        if config.early_stop && plateau(&curve) {
            break;
        }
    }

    let law = law.expect("at least one training step ran");
    let mut report = monte_carlo_evaluate(
        &EvalEstimator::Dine {
            net_y: &net_y,
            net_xy: &net_xy,
            law: &law,
        },
        dataset,
        config.eval_n,
        config.seed,
        &EvalOptions {
            block_len: config.eval_block,
            burn_in: config.burn_in,
            clip_exponent: config.clip_exponent,
        },
    )?;
    report.config = config.echo();
    Ok(TrainOutput {
        estimator: TrainedEstimator::Dine { net_y, net_xy, law },
        ndt: None,
        curve,
        report,
    })
}

fn train_mine_on_dataset(
    config: &TrainConfig,
    dataset: &TrajectoryDataset,
    abort_checkpoint: Option<&Path>,
) -> Result<TrainOutput> {
    let (d_x, d_y) = (dataset.d_x, dataset.d_y);
    let mut init = rng::stream(config.seed, STREAM_INIT);
    let mut critic = MineNetwork::new(&mut init, d_x, d_y, &config.dine_fc_hidden, "mine");
    let mut adam = Adam::new(AdamConfig::ascent(config.lr_dine), &critic.param_sizes());
    let mut batch_rng = rng::stream(config.seed, STREAM_BATCH);
    let mut curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch =
            dataset.sample_windows(config.batch_size, config.seq_len, 1, &mut batch_rng)?;
        let m = batch.batch * batch.steps;
        let mut tape = Tape::new();
        let bound = critic.mlp.bind(&mut tape);
        let x = tape.constant(batch.x.clone(), vec![m, d_x]);
        let y = tape.constant(batch.y.clone(), vec![m, d_y]);
        let mi = mine_objective_graph(&mut tape, &bound, x, y, config.clip_exponent)?;
        let mi_v = tape.scalar(mi);
        if let Err(e) = check_finite(step, "objective", mi_v) {
            return Err(abort_with_checkpoint(e, &[&critic], abort_checkpoint));
        }
        tape.backward(mi)?;
        let ids: Vec<NodeId> = bound.param_ids();
        let grads = collect_grads(&tape, &ids);
        drop(tape);
        adam_update(&mut critic, &mut adam, &grads)?;
        curve.push(CurvePoint {
            step,
            d_hat_y: 0.0,
            d_hat_yx: mi_v,
            estimate_nats: mi_v,
        });
        if config.early_stop && plateau(&curve) {
            break;
        }
    }

    let mut report = monte_carlo_evaluate(
        &EvalEstimator::Mine { critic: &critic },
        dataset,
        config.eval_n,
        config.seed,
        &EvalOptions {
            block_len: config.eval_block,
            burn_in: config.burn_in,
            clip_exponent: config.clip_exponent,
        },
    )?;
    report.config = config.echo();
    Ok(TrainOutput {
        estimator: TrainedEstimator::Mine { critic },
        ndt: None,
        curve,
        report,
    })
}

/// Frozen generator plus channel, evaluated block by block with independent
/// noise streams per block index.
pub struct SimulatorSource<'a> {
    pub ndt: &'a NdtNetwork,
    pub channel: &'a ChannelModel,
}

impl EvalBlocks for SimulatorSource<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.channel.dim(), self.channel.dim())
    }

    fn available_blocks(&self, _block_len: usize, requested: usize) -> usize {
        requested
    }

    fn block(&self, idx: usize, block_len: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.channel.dim();
        let mut u_rng = rng::stream(seed, EVAL_U_STREAM + idx as u64);
        let mut z_rng = rng::stream(seed, EVAL_Z_STREAM + idx as u64);
        let mut tape = Tape::new();
        let bound = self.ndt.bind_frozen(&mut tape);
        let mut u = vec![0.0; block_len * self.ndt.noise_dim];
        rng::fill_uniform(&mut u_rng, 0.0, 1.0, &mut u);
        let z = self.channel.colored_noise_sequence(&mut z_rng, block_len);
        let u_steps: Vec<NodeId> = (0..block_len)
            .map(|t| {
                tape.constant(
                    u[t * self.ndt.noise_dim..(t + 1) * self.ndt.noise_dim].to_vec(),
                    vec![1, self.ndt.noise_dim],
                )
            })
            .collect();
        let z_steps: Vec<NodeId> = (0..block_len)
            .map(|t| tape.constant(z[t * d..(t + 1) * d].to_vec(), vec![1, d]))
            .collect();
        let (x_ids, y_ids) =
            rollout_closed_loop(&mut tape, self.channel, self.ndt, &bound, &u_steps, &z_steps)?;
        let mut x = Vec::with_capacity(block_len * d);
        let mut y = Vec::with_capacity(block_len * d);
        for (&xi, &yi) in x_ids.iter().zip(&y_ids) {
            x.extend_from_slice(tape.value(xi));
            y.extend_from_slice(tape.value(yi));
        }
        Ok((x, y))
    }
}

/// Alternating optimization of the estimator networks and the generator
/// through the differentiable channel (capacity mode), ending with a long
/// Monte-Carlo evaluation.
pub fn train_dine_ndt(
    config: &TrainConfig,
    channel: &ChannelModel,
    abort_checkpoint: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    channel.validate()?;
    match config.estimator {
        EstimatorKind::Dine => train_dine_ndt_capacity(config, channel, abort_checkpoint),
        EstimatorKind::Mine => train_mine_ndt_capacity(config, channel, abort_checkpoint),
    }
}

fn train_dine_ndt_capacity(
    config: &TrainConfig,
    channel: &ChannelModel,
    abort_checkpoint: Option<&Path>,
) -> Result<TrainOutput> {
    let d = channel.dim();
    let constraint = config.constraint.to_constraint()?;
    let mut init = rng::stream(config.seed, STREAM_INIT);
    let mut net_y = DineNetwork::new(
        &mut init,
        d,
        config.dine_lstm_hidden,
        &config.dine_fc_hidden,
        config.k_u,
        "dine_y",
    );
    let mut net_xy = DineNetwork::new(
        &mut init,
        2 * d,
        config.dine_lstm_hidden,
        &config.dine_fc_hidden,
        config.k_u,
        "dine_xy",
    );
    let mut ndt = NdtNetwork::recurrent(
        &mut init,
        d,
        d,
        config.feedback.then_some(d),
        config.ndt_lstm_hidden,
        &config.ndt_fc_hidden,
        constraint,
        "ndt",
    )?;
    let mut adam_y = Adam::new(AdamConfig::ascent(config.lr_dine), &net_y.param_sizes());
    let mut adam_xy = Adam::new(AdamConfig::ascent(config.lr_dine), &net_xy.param_sizes());
    let mut adam_ndt = Adam::new(AdamConfig::ascent(config.lr_ndt), &ndt.param_sizes());

    let mut u_rng = rng::stream(config.seed, STREAM_BATCH);
    let mut z_rng = rng::stream(config.seed, STREAM_CHANNEL);
    let mut ref_rng = rng::stream(config.seed, STREAM_REFS);
    let mut law: Option<ReferenceLaw> = None;
    let mut curve = Vec::with_capacity(config.steps);
    let (b, t) = (config.batch_size, config.seq_len);

    for step in 0..config.steps {
        let train_critic = step % (config.r_dine + config.r_ndt) < config.r_dine;
        let mut tape = Tape::new();
        let bound_ndt = if train_critic {
            ndt.bind_frozen(&mut tape)
        } else {
            ndt.bind(&mut tape)
        };
        let (bound_y, bound_xy) = if train_critic {
            (net_y.bind(&mut tape), net_xy.bind(&mut tape))
        } else {
            (net_y.bind_frozen(&mut tape), net_xy.bind_frozen(&mut tape))
        };

        // generator noise and channel noise for this step
        let mut u = vec![0.0; b * t * d];
        rng::fill_uniform(&mut u_rng, 0.0, 1.0, &mut u);
        let mut z = Vec::with_capacity(b * t * d);
        for _ in 0..b {
            z.extend_from_slice(&channel.colored_noise_sequence(&mut z_rng, t));
        }
        let u_steps: Vec<NodeId> = (0..t)
            .map(|ti| {
                let mut data = Vec::with_capacity(b * d);
                for bi in 0..b {
                    let base = (bi * t + ti) * d;
                    data.extend_from_slice(&u[base..base + d]);
                }
                tape.constant(data, vec![b, d])
            })
            .collect();
        let z_steps: Vec<NodeId> = (0..t)
            .map(|ti| {
                let mut data = Vec::with_capacity(b * d);
                for bi in 0..b {
                    let base = (bi * t + ti) * d;
                    data.extend_from_slice(&z[base..base + d]);
                }
                tape.constant(data, vec![b, d])
            })
            .collect();

        let (x_steps, y_steps) =
            rollout_closed_loop(&mut tape, channel, &ndt, &bound_ndt, &u_steps, &z_steps)?;

        if step % config.ref_refresh == 0 || law.is_none() {
            let mut y_data = Vec::with_capacity(b * t * d);
            for &id in &y_steps {
                y_data.extend_from_slice(tape.value(id));
            }
            law = Some(fit_reference_law(&y_data, d, 0.0)?);
        }
        let law_ref = law.as_ref().unwrap();
        let mut refs = vec![0.0; b * t * config.k_u * d];
        law_ref.sample_into(&mut ref_rng, &mut refs);
        let ref_steps: Vec<NodeId> = (0..t)
            .map(|ti| {
                let mut data = Vec::with_capacity(b * config.k_u * d);
                for bi in 0..b {
                    let base = ((bi * t + ti) * config.k_u) * d;
                    data.extend_from_slice(&refs[base..base + config.k_u * d]);
                }
                tape.constant(data, vec![b * config.k_u, d])
            })
            .collect();

        let terms = dine_objective_graph(
            &mut tape,
            &bound_y,
            &bound_xy,
            &y_steps,
            &x_steps,
            &ref_steps,
            config.k_u,
            config.burn_in,
            config.clip_exponent,
        )?;
        let (dy_v, dyx_v) = (tape.scalar(terms.d_y), tape.scalar(terms.d_yx));
        if let Err(e) = check_finite(step, "objective", dy_v + dyx_v) {
            return Err(abort_with_checkpoint(
                e,
                &[&net_y, &net_xy, &ndt],
                abort_checkpoint,
            ));
        }

        if train_critic {
            let loss = tape.add(terms.d_y, terms.d_yx)?;
            tape.backward(loss)?;
            let grads_y = collect_grads(&tape, &bound_y.param_ids());
            let grads_xy = collect_grads(&tape, &bound_xy.param_ids());
            drop(tape);
            adam_update(&mut net_y, &mut adam_y, &grads_y)?;
            adam_update(&mut net_xy, &mut adam_xy, &grads_xy)?;
        } else {
            tape.backward(terms.di)?;
            let grads_ndt = collect_grads(&tape, &bound_ndt.param_ids());
            drop(tape);
            adam_update(&mut ndt, &mut adam_ndt, &grads_ndt)?;
        }

        curve.push(CurvePoint {
            step,
            d_hat_y: dy_v,
            d_hat_yx: dyx_v,
            estimate_nats: dyx_v - dy_v,
        });
        if config.early_stop && plateau(&curve) {
            break;
        }
    }

    let law = law.expect("at least one training step ran");
    let source = SimulatorSource {
        ndt: &ndt,
        channel,
    };
    let mut report = monte_carlo_evaluate(
        &EvalEstimator::Dine {
            net_y: &net_y,
            net_xy: &net_xy,
            law: &law,
        },
        &source,
        config.eval_n,
        config.seed,
        &EvalOptions {
            block_len: config.eval_block,
            burn_in: config.burn_in,
            clip_exponent: config.clip_exponent,
        },
    )?;
    report.config = config.echo();
    Ok(TrainOutput {
        estimator: TrainedEstimator::Dine { net_y, net_xy, law },
        ndt: Some(ndt),
        curve,
        report,
    })
}

fn train_mine_ndt_capacity(
    config: &TrainConfig,
    channel: &ChannelModel,
    abort_checkpoint: Option<&Path>,
) -> Result<TrainOutput> {
    let d = channel.dim();
    let constraint = config.constraint.to_constraint()?;
    let mut init = rng::stream(config.seed, STREAM_INIT);
    let mut critic = MineNetwork::new(&mut init, d, d, &config.dine_fc_hidden, "mine");
    let mut ndt = NdtNetwork::memoryless(&mut init, d, d, &config.ndt_fc_hidden, constraint, "ndt")?;
    let mut adam_c = Adam::new(AdamConfig::ascent(config.lr_dine), &critic.param_sizes());
    let mut adam_g = Adam::new(AdamConfig::ascent(config.lr_ndt), &ndt.param_sizes());

    let mut u_rng = rng::stream(config.seed, STREAM_BATCH);
    let mut z_rng = rng::stream(config.seed, STREAM_CHANNEL);
    let mut curve = Vec::with_capacity(config.steps);
    let m = config.batch_size * config.seq_len;

    for step in 0..config.steps {
        let train_critic = step % (config.r_dine + config.r_ndt) < config.r_dine;
        let mut tape = Tape::new();
        let bound_ndt = if train_critic {
            ndt.bind_frozen(&mut tape)
        } else {
            ndt.bind(&mut tape)
        };
        let bound_c = if train_critic {
            critic.mlp.bind(&mut tape)
        } else {
            critic.mlp.bind_frozen(&mut tape)
        };

        let mut u = vec![0.0; m * d];
        rng::fill_uniform(&mut u_rng, 0.0, 1.0, &mut u);
        let mut z = Vec::with_capacity(m * d);
        for _ in 0..config.batch_size {
            z.extend_from_slice(&channel.colored_noise_sequence(&mut z_rng, config.seq_len));
        }
        let u_id = tape.constant(u, vec![m, d]);
        let z_id = tape.constant(z, vec![m, d]);
        // memoryless generator: the whole batch is one step
        let x_steps = ndt_forward(&mut tape, &ndt, &bound_ndt, &[u_id], None)?;
        let x = x_steps[0];
        let y = tape.add(x, z_id)?;

        let mi = mine_objective_graph(&mut tape, &bound_c, x, y, config.clip_exponent)?;
        let mi_v = tape.scalar(mi);
        if let Err(e) = check_finite(step, "objective", mi_v) {
            return Err(abort_with_checkpoint(e, &[&critic, &ndt], abort_checkpoint));
        }
        tape.backward(mi)?;
        if train_critic {
            let grads = collect_grads(&tape, &bound_c.param_ids());
            drop(tape);
            adam_update(&mut critic, &mut adam_c, &grads)?;
        } else {
            let grads = collect_grads(&tape, &bound_ndt.param_ids());
            drop(tape);
            adam_update(&mut ndt, &mut adam_g, &grads)?;
        }
        curve.push(CurvePoint {
            step,
            d_hat_y: 0.0,
            d_hat_yx: mi_v,
            estimate_nats: mi_v,
        });
        if config.early_stop && plateau(&curve) {
            break;
        }
    }

    let source = SimulatorSource {
        ndt: &ndt,
        channel,
    };
    let mut report = monte_carlo_evaluate(
        &EvalEstimator::Mine { critic: &critic },
        &source,
        config.eval_n,
        config.seed,
        &EvalOptions {
            block_len: config.eval_block,
            burn_in: config.burn_in,
            clip_exponent: config.clip_exponent,
        },
    )?;
    report.config = config.echo();
    Ok(TrainOutput {
        estimator: TrainedEstimator::Mine { critic },
        ndt: Some(ndt),
        curve,
        report,
    })
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_catches_mistakes() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_err(), "capacity mode without channel");
        cfg.channel = Some(ChannelModel::Awgn { sigma2: 1.0, dim: 1 });
        assert!(cfg.validate().is_ok());
        cfg.burn_in = 40;
        assert!(cfg.validate().is_err());
        cfg.burn_in = 5;
        cfg.eval_n = 10;
        assert!(cfg.validate().is_err());
        cfg.eval_n = 1000;
        cfg.feedback = true;
        cfg.estimator = EstimatorKind::Mine;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = std::env::temp_dir().join("dine_csv_tests");
        std::fs::create_dir_all(&dir).unwrap();

        // two-row file with one trajectory
        let p = dir.join("tiny.csv");
        std::fs::write(&p, "traj,t,x0,y0\n0,0,0.5,1.5\n0,1,-0.25,0.75\n").unwrap();
        let ds = ingest_csv(&p).unwrap();
        assert_eq!(ds.trajectories.len(), 1);
        assert_eq!(ds.trajectories[0].len, 2);
        assert_eq!(ds.trajectories[0].x, vec![0.5, -0.25]);

        // trajectory ids split the file
        let p2 = dir.join("grouped.csv");
        std::fs::write(
            &p2,
            "traj,t,x0,y0\n0,0,1,2\n0,1,3,4\n1,0,5,6\n1,1,7,8\n1,2,9,10\n",
        )
        .unwrap();
        let ds2 = ingest_csv(&p2).unwrap();
        assert_eq!(ds2.trajectories.len(), 2);
        assert_eq!(ds2.trajectories[1].len, 3);

        // NaN cell is rejected with its line number
        let p3 = dir.join("nan.csv");
        std::fs::write(&p3, "traj,t,x0,y0\n0,0,1,2\n0,1,NaN,4\n").unwrap();
        match ingest_csv(&p3) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected csv error, got {other:?}"),
        }

        // missing column
        let p4 = dir.join("short.csv");
        std::fs::write(&p4, "traj,t,x0,y0\n0,0,1\n").unwrap();
        assert!(matches!(ingest_csv(&p4), Err(Error::Csv { line: 2, .. })));

        // unsorted rows
        let p5 = dir.join("unsorted.csv");
        std::fs::write(&p5, "traj,t,x0,y0\n0,1,1,2\n0,0,3,4\n").unwrap();
        assert!(ingest_csv(&p5).is_err());

        // write then read back
        let p6 = dir.join("roundtrip.csv");
        write_csv(&p6, &ds2).unwrap();
        let back = ingest_csv(&p6).unwrap();
        assert_eq!(back.trajectories.len(), 2);
        assert_eq!(back.trajectories[1].y, ds2.trajectories[1].y);
    }

    #[test]
    fn window_sampling_is_deterministic_and_in_range() {
        let ds = independent_gaussian_dataset(200, 3, 7).unwrap();
        let mut r1 = rng::stream(1, 0);
        let mut r2 = rng::stream(1, 0);
        let b1 = ds.sample_windows(4, 16, 2, &mut r1).unwrap();
        let b2 = ds.sample_windows(4, 16, 2, &mut r2).unwrap();
        assert_eq!(b1.x, b2.x);
        assert_eq!(b1.y, b2.y);
        assert_eq!(b1.x.len(), 4 * 16);
    }

    #[test]
    fn short_training_runs_are_reproducible() {
        let cfg = TrainConfig {
            mode: Mode::Estimate,
            dataset: Some("unused".into()),
            steps: 6,
            batch_size: 4,
            seq_len: 12,
            k_u: 3,
            dine_lstm_hidden: 6,
            dine_fc_hidden: vec![8],
            eval_n: 1000,
            eval_block: 250,
            seed: 5,
            ..TrainConfig::default()
        };
        let ds = independent_gaussian_dataset(600, 2, 3).unwrap();
        let a = train_dine(&cfg, &ds, None).unwrap();
        let b = train_dine(&cfg, &ds, None).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.report.estimate_nats, b.report.estimate_nats);
        // curve integrity: logged estimate is exactly the difference
        for p in &a.curve {
            assert_eq!(p.estimate_nats, p.d_hat_yx - p.d_hat_y);
        }
    }

    #[test]
    fn capacity_training_smoke_runs_both_estimators() {
        let channel = ChannelModel::Awgn { sigma2: 1.0, dim: 1 };
        let base = TrainConfig {
            mode: Mode::Capacity,
            channel: Some(channel.clone()),
            steps: 8,
            batch_size: 4,
            seq_len: 10,
            k_u: 2,
            dine_lstm_hidden: 5,
            dine_fc_hidden: vec![6],
            ndt_lstm_hidden: 5,
            ndt_fc_hidden: vec![6],
            eval_n: 1000,
            eval_block: 200,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = train_dine_ndt(&base, &channel, None).unwrap();
        assert_eq!(out.curve.len(), 8);
        assert!(out.report.estimate_nats.is_finite());

        let mine_cfg = TrainConfig {
            estimator: EstimatorKind::Mine,
            ..base
        };
        let out2 = train_dine_ndt(&mine_cfg, &channel, None).unwrap();
        assert!(out2.report.estimate_nats.is_finite());
        assert!(out2.curve.iter().all(|p| p.d_hat_y == 0.0));
    }

    #[test]
    fn curve_csv_format_is_stable() {
        let dir = std::env::temp_dir().join("dine_curve_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("curve.csv");
        let curve = vec![
            CurvePoint {
                step: 0,
                d_hat_y: 0.5,
                d_hat_yx: 0.75,
                estimate_nats: 0.25,
            },
            CurvePoint {
                step: 1,
                d_hat_y: -0.125,
                d_hat_yx: 0.5,
                estimate_nats: 0.625,
            },
        ];
        write_curve_csv(&p, &curve).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "step,d_hat_y,d_hat_yx,estimate_nats\n0,0.5,0.75,0.25\n1,-0.125,0.5,0.625\n"
        );
    }

    #[test]
    fn baseline_lookup_matches_channel() {
        let cfg = TrainConfig {
            channel: Some(ChannelModel::Awgn { sigma2: 1.0, dim: 1 }),
            ..TrainConfig::default()
        };
        let (c, method) = cfg.baseline().unwrap();
        assert!((c - 0.346_573_590_279_972_64).abs() < 1e-12);
        assert_eq!(method, "closed_form");
    }
}
