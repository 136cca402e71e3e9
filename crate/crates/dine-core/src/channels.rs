//! Additive-Gaussian channel simulators with memory.
//!
//! All shipped models have the form y_t = x_t + z_t where the colored noise
//! z_t is independent of the input, so closed-loop rollouts stay
//! differentiable with respect to the generator: the noise is sampled once
//! per rollout and enters the graph as a constant (pathwise gradients).

use crate::error::{Error, Result};
use crate::nn::{constrain_step_causal, ndt_forward, BoundNdt, NdtNetwork};
use crate::rng::{self, Rng};
use crate::tensor::{NodeId, Tape};

/// Channel selector plus parameters. `dim` is both the input and output
/// dimension.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelModel {
    /// y = x + n, n ~ N(0, sigma2 I)
    Awgn { sigma2: f64, dim: usize },
    /// z_t = alpha n_{t-1} + n_t, y = x + z, n ~ N(0, 1)
    Ma1 { alpha: f64, dim: usize },
    /// z_t = alpha z_{t-1} + n_t, y = x + z, n ~ N(0, I)
    Ar1Mimo { alpha: f64, dim: usize },
}

/// Model-specific latent carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelState {
    Awgn,
    /// previous innovation n_{t-1}
    Ma1(Vec<f64>),
    /// previous colored noise z_{t-1}
    Ar1(Vec<f64>),
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ChannelModel::Awgn { sigma2, dim } => {
                if sigma2 <= 0.0 {
                    return Err(Error::InvalidParameter {
                        name: "sigma2",
                        value: sigma2,
                        constraint: "sigma2 > 0",
                    });
                }
                check_dim(dim)
            }
            ChannelModel::Ma1 { alpha, dim } | ChannelModel::Ar1Mimo { alpha, dim } => {
                if alpha.abs() >= 1.0 {
                    return Err(Error::InvalidParameter {
                        name: "alpha",
                        value: alpha,
                        constraint: "|alpha| < 1",
                    });
                }
                check_dim(dim)
            }
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            ChannelModel::Awgn { dim, .. }
            | ChannelModel::Ma1 { dim, .. }
            | ChannelModel::Ar1Mimo { dim, .. } => dim,
        }
    }

    pub fn initial_state(&self) -> ChannelState {
        match self {
            ChannelModel::Awgn { .. } => ChannelState::Awgn,
            ChannelModel::Ma1 { dim, .. } => ChannelState::Ma1(vec![0.0; *dim]),
            ChannelModel::Ar1Mimo { dim, .. } => ChannelState::Ar1(vec![0.0; *dim]),
        }
    }

    /// Advance one step with an injected innovation vector (standard-normal
    /// scale). Returns the output and the next state.
    pub fn step_with_noise(
        &self,
        state: &ChannelState,
        x: &[f64],
        noise: &[f64],
    ) -> Result<(Vec<f64>, ChannelState)> {
        let d = self.dim();
        if x.len() != d || noise.len() != d {
            return Err(Error::DimensionMismatch {
                what: "channel_step input",
                expected: d,
                actual: x.len().max(noise.len()),
            });
        }
        match (self, state) {
            (ChannelModel::Awgn { sigma2, .. }, ChannelState::Awgn) => {
                let sigma = sigma2.sqrt();
                let y = x.iter().zip(noise).map(|(&xi, &ni)| xi + sigma * ni).collect();
                Ok((y, ChannelState::Awgn))
            }
            (ChannelModel::Ma1 { alpha, .. }, ChannelState::Ma1(prev)) => {
                let y = x
                    .iter()
                    .zip(noise)
                    .zip(prev)
                    .map(|((&xi, &ni), &pi)| xi + alpha * pi + ni)
                    .collect();
                Ok((y, ChannelState::Ma1(noise.to_vec())))
            }
            (ChannelModel::Ar1Mimo { alpha, .. }, ChannelState::Ar1(prev)) => {
                let z: Vec<f64> = noise
                    .iter()
                    .zip(prev)
                    .map(|(&ni, &zi)| alpha * zi + ni)
                    .collect();
                let y = x.iter().zip(&z).map(|(&xi, &zi)| xi + zi).collect();
                Ok((y, ChannelState::Ar1(z)))
            }
            _ => Err(Error::Config("channel state does not match model".into())),
        }
    }

    /// Advance one step drawing the innovation from `rng`.
    pub fn step(
        &self,
        state: &ChannelState,
        x: &[f64],
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, ChannelState)> {
        let mut noise = vec![0.0; self.dim()];
        rng::fill_standard_normal(rng, &mut noise);
        self.step_with_noise(state, x, &noise)
    }

    /// Sample the additive noise sequence z_1..z_T (shape [steps, dim]) from
    /// the zero initial state. y_t = x_t + z_t reproduces `step` exactly for
    /// the same innovation draws.
    pub fn colored_noise_sequence(&self, rng: &mut Rng, steps: usize) -> Vec<f64> {
        let d = self.dim();
        let mut innovations = vec![0.0; steps * d];
        rng::fill_standard_normal(rng, &mut innovations);
        self.color(&mut innovations, steps);
        innovations
    }

    /// In-place transform of standard-normal innovations into the model's
    /// colored noise, walking the state recursion from zero.
    fn color(&self, buf: &mut [f64], steps: usize) {
        let d = self.dim();
        match *self {
            ChannelModel::Awgn { sigma2, .. } => {
                let sigma = sigma2.sqrt();
                for v in buf.iter_mut() {
                    *v *= sigma;
                }
            }
            ChannelModel::Ma1 { alpha, .. } => {
                let mut prev = vec![0.0; d];
                for t in 0..steps {
                    for k in 0..d {
                        let n = buf[t * d + k];
                        buf[t * d + k] = alpha * prev[k] + n;
                        prev[k] = n;
                    }
                }
            }
            ChannelModel::Ar1Mimo { alpha, .. } => {
                let mut prev = vec![0.0; d];
                for t in 0..steps {
                    for k in 0..d {
                        let z = alpha * prev[k] + buf[t * d + k];
                        buf[t * d + k] = z;
                        prev[k] = z;
                    }
                }
            }
        }
    }

    /// Sequential rollout from the zero initial state on a fixed input
    /// sequence ([steps, dim] flattened).
    pub fn rollout_open_loop(&self, x_seq: &[f64], steps: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let d = self.dim();
        if x_seq.len() != steps * d {
            return Err(Error::DimensionMismatch {
                what: "rollout_open_loop input",
                expected: steps * d,
                actual: x_seq.len(),
            });
        }
        let mut state = self.initial_state();
        let mut y = Vec::with_capacity(steps * d);
        for t in 0..steps {
            let (yt, next) = self.step(&state, &x_seq[t * d..(t + 1) * d], rng)?;
            y.extend_from_slice(&yt);
            state = next;
        }
        Ok(y)
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidParameter {
            name: "dim",
            value: 0.0,
            constraint: "dim >= 1",
        });
    }
    Ok(())
}

/// Interleave the generator and the channel on an existing tape.
///
/// `noise_steps[t]` is the generator noise [b, d_x]; `colored_steps[t]` is
/// the channel's additive noise [b, d_y] inserted as constants. Without
/// feedback the input sequence equals [`ndt_forward`] on the same noise and
/// the whole-batch constraint applies; with feedback each step is
/// constrained causally with that step's batch statistic before it reaches
/// the channel and the encoder.
pub fn rollout_closed_loop(
    tape: &mut Tape,
    channel: &ChannelModel,
    ndt: &NdtNetwork,
    bound: &BoundNdt,
    noise_steps: &[NodeId],
    colored_steps: &[NodeId],
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    if noise_steps.len() != colored_steps.len() {
        return Err(Error::DimensionMismatch {
            what: "rollout_closed_loop steps",
            expected: noise_steps.len(),
            actual: colored_steps.len(),
        });
    }
    if noise_steps.is_empty() {
        return Err(Error::EmptyInput("rollout_closed_loop"));
    }
    if ndt.output_dim != channel.dim() {
        return Err(Error::DimensionMismatch {
            what: "generator output vs channel dim",
            expected: channel.dim(),
            actual: ndt.output_dim,
        });
    }

    if !ndt.feedback {
        let x_steps = ndt_forward(tape, ndt, bound, noise_steps, None)?;
        let mut y_steps = Vec::with_capacity(x_steps.len());
        for (&x, &z) in x_steps.iter().zip(colored_steps) {
            y_steps.push(tape.add(x, z)?);
        }
        return Ok((x_steps, y_steps));
    }

    let b = tape.shape(noise_steps[0])[0];
    let mut state = bound.initial_state(tape, b, ndt.output_dim);
    let mut y_prev = tape.zeros(vec![b, channel.dim()]);
    let mut x_steps = Vec::with_capacity(noise_steps.len());
    let mut y_steps = Vec::with_capacity(noise_steps.len());
    for (&u, &z) in noise_steps.iter().zip(colored_steps) {
        let raw = bound.step_raw(tape, &mut state, u, Some(y_prev))?;
        let x = constrain_step_causal(tape, raw, ndt.output_dim, &ndt.constraint)?;
        bound.set_prev_output(&mut state, x);
        let y = tape.add(x, z)?;
        x_steps.push(x);
        y_steps.push(y);
        y_prev = y;
    }
    Ok((x_steps, y_steps))
}
