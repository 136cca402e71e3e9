//! Network definitions: LSTM cells, fully-connected heads, the potential
//! networks scoring joint and reference samples, and the input generator.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape};
use rand::Rng as _;

/// Named trainable tensor stored outside any tape.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    fn uniform(rng: &mut Rng, name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
            .collect();
        Self { name, shape, data }
    }

    fn filled(name: String, shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![value; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Insert this parameter as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> NodeId {
        tape.leaf(self.data.clone(), self.shape.clone())
    }

    /// Insert this parameter as a constant; backward sweeps skip it.
    pub fn bind_frozen(&self, tape: &mut Tape) -> NodeId {
        tape.constant(self.data.clone(), self.shape.clone())
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> NodeId {
        if trainable {
            self.bind(tape)
        } else {
            self.bind_frozen(tape)
        }
    }
}

/// Anything with an ordered list of trainable parameters.
pub trait Network {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.numel()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
}

/// Fully-connected stack; consecutive layer dimensions chain.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<MlpLayer>,
}

pub struct BoundMlp {
    layers: Vec<(NodeId, NodeId, Activation)>,
}

impl MlpParams {
    /// `dims` = [input, hidden..., output]; hidden layers use `hidden_act`,
    /// the final layer is linear.
    pub fn new(rng: &mut Rng, dims: &[usize], hidden_act: Activation, prefix: &str) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let act = if i + 2 == dims.len() {
                Activation::Linear
            } else {
                hidden_act
            };
            layers.push(MlpLayer {
                weight: Param::uniform(
                    rng,
                    format!("{prefix}.fc{i}.weight"),
                    vec![fan_in, fan_out],
                    fan_in,
                ),
                bias: Param::filled(format!("{prefix}.fc{i}.bias"), vec![fan_out], 0.0),
                activation: act,
            });
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        self.bind_with(tape, true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMlp {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        l.weight.bind_with(tape, trainable),
                        l.bias.bind_with(tape, trainable),
                        l.activation,
                    )
                })
                .collect(),
        }
    }
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, mut x: NodeId) -> Result<NodeId> {
        for &(w, b, act) in &self.layers {
            let z = tape.matmul(x, w)?;
            let z = tape.add_bias(z, b)?;
            x = match act {
                Activation::Relu => tape.relu(z),
                Activation::Tanh => tape.tanh(z),
                Activation::Linear => z,
            };
        }
        Ok(x)
    }

    /// Leaf ids in the same order as [`Network::params`].
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}

impl Network for MlpParams {
    fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Gate weights of one LSTM cell. Each weight acts on the concatenation
/// [input, hidden] and is stored as [input+hidden, hidden] row-major.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_i: Param,
    pub b_i: Param,
    pub w_f: Param,
    pub b_f: Param,
    pub w_o: Param,
    pub b_o: Param,
    pub w_c: Param,
    pub b_c: Param,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Hidden and cell vectors of one sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmParams {
    pub fn new(rng: &mut Rng, input_dim: usize, hidden: usize, prefix: &str) -> Self {
        let fan_in = input_dim + hidden;
        let gate = |rng: &mut Rng, name: &str| {
            Param::uniform(
                rng,
                format!("{prefix}.lstm.w_{name}"),
                vec![fan_in, hidden],
                fan_in,
            )
        };
        let w_i = gate(rng, "i");
        let b_i = Param::filled(format!("{prefix}.lstm.b_i"), vec![hidden], 0.0);
        let w_f = gate(rng, "f");
        // forget gate starts open so early training retains memory
        let b_f = Param::filled(format!("{prefix}.lstm.b_f"), vec![hidden], 1.0);
        let w_o = gate(rng, "o");
        let b_o = Param::filled(format!("{prefix}.lstm.b_o"), vec![hidden], 0.0);
        let w_c = gate(rng, "c");
        let b_c = Param::filled(format!("{prefix}.lstm.b_c"), vec![hidden], 0.0);
        Self {
            w_i,
            b_i,
            w_f,
            b_f,
            w_o,
            b_o,
            w_c,
            b_c,
            input_dim,
            hidden,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLstm {
        self.bind_with(tape, true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundLstm {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundLstm {
        BoundLstm {
            w_i: self.w_i.bind_with(tape, trainable),
            b_i: self.b_i.bind_with(tape, trainable),
            w_f: self.w_f.bind_with(tape, trainable),
            b_f: self.b_f.bind_with(tape, trainable),
            w_o: self.w_o.bind_with(tape, trainable),
            b_o: self.b_o.bind_with(tape, trainable),
            w_c: self.w_c.bind_with(tape, trainable),
            b_c: self.b_c.bind_with(tape, trainable),
            input_dim: self.input_dim,
            hidden: self.hidden,
        }
    }
}

impl Network for LstmParams {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_i, &self.b_i, &self.w_f, &self.b_f, &self.w_o, &self.b_o, &self.w_c, &self.b_c,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_i,
            &mut self.b_i,
            &mut self.w_f,
            &mut self.b_f,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.w_c,
            &mut self.b_c,
        ]
    }
}

pub struct BoundLstm {
    w_i: NodeId,
    b_i: NodeId,
    w_f: NodeId,
    b_f: NodeId,
    w_o: NodeId,
    b_o: NodeId,
    w_c: NodeId,
    b_c: NodeId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl BoundLstm {
    pub fn param_ids(&self) -> Vec<NodeId> {
        vec![
            self.w_i, self.b_i, self.w_f, self.b_f, self.w_o, self.b_o, self.w_c, self.b_c,
        ]
    }
}

/// Standard LSTM update on a batch of rows:
/// gates i,f,o = sigmoid(affine), candidate = tanh(affine),
/// c' = f*c + i*candidate, h' = o*tanh(c').
pub fn lstm_step(
    tape: &mut Tape,
    cell: &BoundLstm,
    input: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let cols = tape.shape(input)[1];
    if cols != cell.input_dim {
        return Err(Error::DimensionMismatch {
            what: "lstm input",
            expected: cell.input_dim,
            actual: cols,
        });
    }
    let xh = tape.concat_cols(&[input, h])?;
    let gate = |tape: &mut Tape, w, b| -> Result<NodeId> {
        let z = tape.matmul(xh, w)?;
        tape.add_bias(z, b)
    };
    let zi = gate(tape, cell.w_i, cell.b_i)?;
    let i = tape.sigmoid(zi);
    let zf = gate(tape, cell.w_f, cell.b_f)?;
    let f = tape.sigmoid(zf);
    let zo = gate(tape, cell.w_o, cell.b_o)?;
    let o = tape.sigmoid(zo);
    let zc = gate(tape, cell.w_c, cell.b_c)?;
    let cand = tape.tanh(zc);

    let fc = tape.mul(f, c)?;
    let ic = tape.mul(i, cand)?;
    let c_next = tape.add(fc, ic)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// One step of the two-output cell: the joint input advances the recursion,
/// every reference input is scored from the same previous state and then
/// discarded. `refs` holds `k_u` rows per joint row, grouped consecutively.
#[allow(clippy::type_complexity)]
pub fn modified_lstm_step(
    tape: &mut Tape,
    cell: &BoundLstm,
    joint: NodeId,
    refs: NodeId,
    h: NodeId,
    c: NodeId,
    k_u: usize,
) -> Result<((NodeId, NodeId), (NodeId, NodeId))> {
    let joint_state = lstm_step(tape, cell, joint, h, c)?;
    let h_rep = tape.repeat_rows(h, k_u)?;
    let c_rep = tape.repeat_rows(c, k_u)?;
    let ref_state = lstm_step(tape, cell, refs, h_rep, c_rep)?;
    Ok((joint_state, ref_state))
}

/// The potential network: modified LSTM feeding a shared fully-connected
/// head that scores both the joint states and the reference states.
#[derive(Debug, Clone)]
pub struct DineNetwork {
    pub lstm: LstmParams,
    pub head: MlpParams,
    pub input_dim: usize,
    pub k_u: usize,
}

pub struct BoundDine {
    pub lstm: BoundLstm,
    pub head: BoundMlp,
}

impl DineNetwork {
    pub fn new(
        rng: &mut Rng,
        input_dim: usize,
        lstm_hidden: usize,
        fc_hidden: &[usize],
        k_u: usize,
        prefix: &str,
    ) -> Self {
        let lstm = LstmParams::new(rng, input_dim, lstm_hidden, prefix);
        let mut dims = vec![lstm_hidden];
        dims.extend_from_slice(fc_hidden);
        dims.push(1);
        let head = MlpParams::new(rng, &dims, Activation::Relu, prefix);
        Self {
            lstm,
            head,
            input_dim,
            k_u,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundDine {
        BoundDine {
            lstm: self.lstm.bind(tape),
            head: self.head.bind(tape),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundDine {
        BoundDine {
            lstm: self.lstm.bind_frozen(tape),
            head: self.head.bind_frozen(tape),
        }
    }

    /// Score a single sequence (batch size 1) against per-step references.
    /// `joint` is [t, d] flattened, `refs` is [t, k_u, d] flattened.
    /// Returns (g_joint per step, g_ref per step and reference).
    pub fn score_sequence(
        &self,
        joint: &[f64],
        refs: &[f64],
        t: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.input_dim;
        if joint.len() != t * d || refs.len() != t * self.k_u * d {
            return Err(Error::DimensionMismatch {
                what: "score_sequence input",
                expected: t * d,
                actual: joint.len(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let joint_steps: Vec<NodeId> = (0..t)
            .map(|i| tape.constant(joint[i * d..(i + 1) * d].to_vec(), vec![1, d]))
            .collect();
        let ref_steps: Vec<NodeId> = (0..t)
            .map(|i| {
                tape.constant(
                    refs[i * self.k_u * d..(i + 1) * self.k_u * d].to_vec(),
                    vec![self.k_u, d],
                )
            })
            .collect();
        let (g_joint, g_ref) = dine_forward(&mut tape, &bound, &joint_steps, &ref_steps, self.k_u)?;
        let mut out_joint = Vec::with_capacity(t);
        let mut out_ref = Vec::with_capacity(t * self.k_u);
        for id in g_joint {
            out_joint.push(tape.scalar(id));
        }
        for id in g_ref {
            out_ref.extend_from_slice(tape.value(id));
        }
        Ok((out_joint, out_ref))
    }
}

impl Network for DineNetwork {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.lstm.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.lstm.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

impl BoundDine {
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut ids = self.lstm.param_ids();
        ids.extend(self.head.param_ids());
        ids
    }
}

/// Unrolled forward pass of the potential network. `joint_steps[i]` is the
/// batch of joint inputs at time i ([b, d]); `ref_steps[i]` the references
/// ([b*k_u, d]). The recursion is driven by the joint inputs only; the head
/// output at step i is g(. | past joint inputs).
pub fn dine_forward(
    tape: &mut Tape,
    net: &BoundDine,
    joint_steps: &[NodeId],
    ref_steps: &[NodeId],
    k_u: usize,
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    if joint_steps.is_empty() {
        return Err(Error::EmptyInput("dine_forward"));
    }
    if joint_steps.len() != ref_steps.len() {
        return Err(Error::DimensionMismatch {
            what: "dine_forward steps",
            expected: joint_steps.len(),
            actual: ref_steps.len(),
        });
    }
    let b = tape.shape(joint_steps[0])[0];
    let hidden = net.lstm.hidden;
    let mut h = tape.zeros(vec![b, hidden]);
    let mut c = tape.zeros(vec![b, hidden]);
    let mut g_joint = Vec::with_capacity(joint_steps.len());
    let mut g_ref = Vec::with_capacity(ref_steps.len());
    for (&joint, &refs) in joint_steps.iter().zip(ref_steps) {
        let ((hj, cj), (hr, _)) = modified_lstm_step(tape, &net.lstm, joint, refs, h, c, k_u)?;
        g_joint.push(net.head.forward(tape, hj)?);
        g_ref.push(net.head.forward(tape, hr)?);
        h = hj;
        c = cj;
    }
    Ok((g_joint, g_ref))
}

/// Channel-input constraint imposed by the generator's last layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    None,
    /// Batch-mean squared norm of the emitted vectors equals the budget.
    AveragePower(f64),
    /// Every coordinate lies strictly inside (-amplitude, amplitude).
    PeakPower(f64),
}

impl Constraint {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Constraint::AveragePower(p) if p < 0.0 => Err(Error::InvalidParameter {
                name: "power",
                value: p,
                constraint: "P >= 0",
            }),
            Constraint::PeakPower(a) if a <= 0.0 => Err(Error::InvalidParameter {
                name: "amplitude",
                value: a,
                constraint: "A > 0",
            }),
            _ => Ok(()),
        }
    }
}

/// Apply a constraint to a raw output buffer of vectors with `dim` entries
/// each. Average power rescales so the mean squared vector norm equals the
/// budget exactly (all-zero input stays zero); peak power maps
/// coordinatewise through amplitude*tanh.
pub fn constraint_layer(data: &mut [f64], dim: usize, constraint: &Constraint) -> Result<()> {
    constraint.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("constraint_layer"));
    }
    match *constraint {
        Constraint::None => {}
        Constraint::AveragePower(p) => {
            let entry_ms = data.iter().map(|&v| v * v).sum::<f64>() / data.len() as f64;
            let scale = if entry_ms == 0.0 {
                0.0
            } else {
                (p / (dim as f64 * entry_ms)).sqrt()
            };
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
        Constraint::PeakPower(a) => {
            for v in data.iter_mut() {
                *v = a * v.tanh();
            }
        }
    }
    Ok(())
}

/// Tape version of the constraint over a set of per-step raw outputs
/// ([b, d] each), normalizing across the whole batch and horizon.
pub fn constrain_steps(
    tape: &mut Tape,
    raws: &[NodeId],
    dim: usize,
    constraint: &Constraint,
) -> Result<Vec<NodeId>> {
    constraint.validate()?;
    match *constraint {
        Constraint::None => Ok(raws.to_vec()),
        Constraint::PeakPower(a) => raws
            .iter()
            .map(|&r| {
                let t = tape.tanh(r);
                Ok(tape.scale(t, a))
            })
            .collect(),
        Constraint::AveragePower(p) => {
            let all = tape.concat_cols(raws)?;
            let sq = tape.mul(all, all)?;
            let entry_ms = tape.mean(sq)?;
            let scale = power_scale(tape, entry_ms, dim, p)?;
            raws.iter().map(|&r| tape.mul(r, scale)).collect()
        }
    }
}

/// Causal variant: each step is normalized with the batch statistic of that
/// step only, so the scale never depends on later inputs.
pub fn constrain_step_causal(
    tape: &mut Tape,
    raw: NodeId,
    dim: usize,
    constraint: &Constraint,
) -> Result<NodeId> {
    constraint.validate()?;
    match *constraint {
        Constraint::None => Ok(raw),
        Constraint::PeakPower(a) => {
            let t = tape.tanh(raw);
            Ok(tape.scale(t, a))
        }
        Constraint::AveragePower(p) => {
            let sq = tape.mul(raw, raw)?;
            let entry_ms = tape.mean(sq)?;
            let scale = power_scale(tape, entry_ms, dim, p)?;
            tape.mul(raw, scale)
        }
    }
}

fn power_scale(tape: &mut Tape, entry_ms: NodeId, dim: usize, p: f64) -> Result<NodeId> {
    if tape.scalar(entry_ms) == 0.0 {
        // degenerate guard: all-raw-zero batches stay zero
        return Ok(tape.constant_scalar(0.0));
    }
    let ratio = tape.scale(entry_ms, dim as f64 / p.max(f64::MIN_POSITIVE));
    if p == 0.0 {
        return Ok(tape.constant_scalar(0.0));
    }
    Ok(tape.pow_const(ratio, -0.5))
}

/// Recurrent generator mapping i.i.d. noise (plus the previous emitted input
/// and, with feedback, the previous channel output) to constrained channel
/// inputs. `lstm: None` gives the memoryless feedforward generator used for
/// mutual-information optimization.
#[derive(Debug, Clone)]
pub struct NdtNetwork {
    pub lstm: Option<LstmParams>,
    pub mlp: MlpParams,
    pub constraint: Constraint,
    pub feedback: bool,
    pub noise_dim: usize,
    pub output_dim: usize,
}

pub struct BoundNdt {
    pub lstm: Option<BoundLstm>,
    pub mlp: BoundMlp,
}

impl NdtNetwork {
    /// Recurrent generator: LSTM + fully-connected trunk + linear output.
    /// LSTM input is [noise, previous input] or [noise, previous input,
    /// previous output] with feedback.
    pub fn recurrent(
        rng: &mut Rng,
        noise_dim: usize,
        output_dim: usize,
        feedback_dim: Option<usize>,
        lstm_hidden: usize,
        fc_hidden: &[usize],
        constraint: Constraint,
        prefix: &str,
    ) -> Result<Self> {
        constraint.validate()?;
        let input_dim = noise_dim + output_dim + feedback_dim.unwrap_or(0);
        let lstm = LstmParams::new(rng, input_dim, lstm_hidden, prefix);
        let mut dims = vec![lstm_hidden];
        dims.extend_from_slice(fc_hidden);
        dims.push(output_dim);
        let mlp = MlpParams::new(rng, &dims, Activation::Relu, prefix);
        Ok(Self {
            lstm: Some(lstm),
            mlp,
            constraint,
            feedback: feedback_dim.is_some(),
            noise_dim,
            output_dim,
        })
    }

    /// Memoryless generator: fully-connected map from the noise alone.
    pub fn memoryless(
        rng: &mut Rng,
        noise_dim: usize,
        output_dim: usize,
        fc_hidden: &[usize],
        constraint: Constraint,
        prefix: &str,
    ) -> Result<Self> {
        constraint.validate()?;
        let mut dims = vec![noise_dim];
        dims.extend_from_slice(fc_hidden);
        dims.push(output_dim);
        let mlp = MlpParams::new(rng, &dims, Activation::Relu, prefix);
        Ok(Self {
            lstm: None,
            mlp,
            constraint,
            feedback: false,
            noise_dim,
            output_dim,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundNdt {
        BoundNdt {
            lstm: self.lstm.as_ref().map(|l| l.bind(tape)),
            mlp: self.mlp.bind(tape),
        }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundNdt {
        BoundNdt {
            lstm: self.lstm.as_ref().map(|l| l.bind_frozen(tape)),
            mlp: self.mlp.bind_frozen(tape),
        }
    }
}

impl Network for NdtNetwork {
    fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        if let Some(lstm) = &self.lstm {
            p.extend(lstm.params());
        }
        p.extend(self.mlp.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        if let Some(lstm) = &mut self.lstm {
            p.extend(lstm.params_mut());
        }
        p.extend(self.mlp.params_mut());
        p
    }
}

/// Generator recursion state while unrolling.
pub struct NdtState {
    h: NodeId,
    c: NodeId,
    x_prev: NodeId,
}

impl BoundNdt {
    /// Leaf ids in the same order as [`Network::params`].
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        if let Some(lstm) = &self.lstm {
            ids.extend(lstm.param_ids());
        }
        ids.extend(self.mlp.param_ids());
        ids
    }

    pub fn initial_state(&self, tape: &mut Tape, batch: usize, output_dim: usize) -> NdtState {
        let hidden = self.lstm.as_ref().map_or(0, |l| l.hidden);
        NdtState {
            h: tape.zeros(vec![batch, hidden.max(1)]),
            c: tape.zeros(vec![batch, hidden.max(1)]),
            x_prev: tape.zeros(vec![batch, output_dim]),
        }
    }

    /// Emit the raw (unconstrained) output for one step and advance the
    /// recursion. `feedback` must be Some exactly when the network was built
    /// with feedback.
    pub fn step_raw(
        &self,
        tape: &mut Tape,
        state: &mut NdtState,
        noise: NodeId,
        feedback: Option<NodeId>,
    ) -> Result<NodeId> {
        let raw = match &self.lstm {
            Some(lstm) => {
                let input = match feedback {
                    Some(y_prev) => tape.concat_cols(&[noise, state.x_prev, y_prev])?,
                    None => tape.concat_cols(&[noise, state.x_prev])?,
                };
                let (h, c) = lstm_step(tape, lstm, input, state.h, state.c)?;
                state.h = h;
                state.c = c;
                self.mlp.forward(tape, h)?
            }
            None => self.mlp.forward(tape, noise)?,
        };
        state.x_prev = raw;
        Ok(raw)
    }

    /// Record the constrained output as the value fed back on the next step.
    pub fn set_prev_output(&self, state: &mut NdtState, x: NodeId) {
        state.x_prev = x;
    }
}

/// Open-loop unroll of the generator on a noise sequence (no feedback).
/// `noise_steps[i]` is [b, noise_dim]. The constraint is applied jointly
/// over the whole batch and horizon.
pub fn ndt_forward(
    tape: &mut Tape,
    net: &NdtNetwork,
    bound: &BoundNdt,
    noise_steps: &[NodeId],
    feedback_steps: Option<&[NodeId]>,
) -> Result<Vec<NodeId>> {
    if net.feedback != feedback_steps.is_some() {
        return Err(Error::Config(
            "feedback sequence must be supplied iff the generator has feedback".into(),
        ));
    }
    if noise_steps.is_empty() {
        return Err(Error::EmptyInput("ndt_forward"));
    }
    let b = tape.shape(noise_steps[0])[0];
    let mut state = bound.initial_state(tape, b, net.output_dim);
    let mut raws = Vec::with_capacity(noise_steps.len());
    for (i, &u) in noise_steps.iter().enumerate() {
        let fb = feedback_steps.map(|f| f[i]);
        raws.push(bound.step_raw(tape, &mut state, u, fb)?);
    }
    constrain_steps(tape, &raws, net.output_dim, &net.constraint)
}

// ---------------------------------------------------------------------------
// Parameter checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Checkpoint {
    format_version: u32,
    params: Vec<CheckpointParam>,
}

/// Serialize all parameters of the given networks to a JSON checkpoint.
pub fn checkpoint_to_json(networks: &[&dyn Network]) -> serde_json::Value {
    let params: Vec<CheckpointParam> = networks
        .iter()
        .flat_map(|n| n.params())
        .map(|p| CheckpointParam {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.data.clone(),
        })
        .collect();
    serde_json::to_value(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        params,
    })
    .expect("checkpoint serialization cannot fail")
}

/// Restore parameters by name from a checkpoint produced by
/// [`checkpoint_to_json`]. Every parameter of every network must be present
/// with a matching shape.
pub fn checkpoint_from_json(
    value: &serde_json::Value,
    networks: &mut [&mut dyn Network],
) -> Result<()> {
    let ckpt: Checkpoint = serde_json::from_value(value.clone())
        .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
    if ckpt.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            ckpt.format_version
        )));
    }
    let by_name: std::collections::HashMap<&str, &CheckpointParam> =
        ckpt.params.iter().map(|p| (p.name.as_str(), p)).collect();
    for net in networks.iter_mut() {
        for param in net.params_mut() {
            let stored = by_name.get(param.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter {}", param.name))
            })?;
            if stored.shape != param.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    param.name, stored.shape, param.shape
                )));
            }
            param.data = stored.data.clone();
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &std::path::Path, networks: &[&dyn Network]) -> Result<()> {
    let json = checkpoint_to_json(networks);
    std::fs::write(path, serde_json::to_string(&json).unwrap())?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path, networks: &mut [&mut dyn Network]) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("invalid checkpoint json: {e}")))?;
    checkpoint_from_json(&value, networks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn zeroed_lstm(input_dim: usize, hidden: usize) -> LstmParams {
        let mut rng = rng::seeded(0);
        let mut lstm = LstmParams::new(&mut rng, input_dim, hidden, "t");
        for p in lstm.params_mut() {
            for v in p.data.iter_mut() {
                *v = 0.0;
            }
        }
        lstm
    }

    #[test]
    fn zero_params_zero_cell_gives_zero_state() {
        let lstm = zeroed_lstm(2, 3);
        let mut tape = Tape::new();
        let bound = lstm.bind(&mut tape);
        let x = tape.constant(vec![0.5, -0.5], vec![1, 2]);
        let h = tape.zeros(vec![1, 3]);
        let c = tape.zeros(vec![1, 3]);
        let (h1, c1) = lstm_step(&mut tape, &bound, x, h, c).unwrap();
        assert!(tape.value(h1).iter().all(|&v| v == 0.0));
        assert!(tape.value(c1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_nonzero_cell_halves_and_squashes() {
        // all gates sigmoid(0)=0.5, candidate tanh(0)=0:
        // c' = 0.5*v, h' = 0.5*tanh(0.5*v)
        let lstm = zeroed_lstm(1, 2);
        let mut tape = Tape::new();
        let bound = lstm.bind(&mut tape);
        let x = tape.constant(vec![1.0], vec![1, 1]);
        let h = tape.zeros(vec![1, 2]);
        let c = tape.constant(vec![0.8, -0.4], vec![1, 2]);
        let (h1, c1) = lstm_step(&mut tape, &bound, x, h, c).unwrap();
        assert!((tape.value(c1)[0] - 0.4).abs() < 1e-15);
        assert!((tape.value(c1)[1] + 0.2).abs() < 1e-15);
        assert!((tape.value(h1)[0] - 0.5 * (0.4_f64).tanh()).abs() < 1e-15);
        assert!((tape.value(h1)[1] - 0.5 * (-0.2_f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn reference_rows_match_joint_when_inputs_match() {
        let mut r = rng::seeded(3);
        let lstm = LstmParams::new(&mut r, 2, 4, "t");
        let mut tape = Tape::new();
        let bound = lstm.bind(&mut tape);
        let joint = tape.constant(vec![0.3, -0.7], vec![1, 2]);
        let refs = tape.constant(vec![0.3, -0.7, 0.3, -0.7], vec![2, 2]);
        let h = tape.zeros(vec![1, 4]);
        let c = tape.zeros(vec![1, 4]);
        let ((hj, _), (hr, _)) =
            modified_lstm_step(&mut tape, &bound, joint, refs, h, c, 2).unwrap();
        let hj = tape.value(hj).to_vec();
        let hr = tape.value(hr).to_vec();
        assert_eq!(&hr[0..4], &hj[..]);
        assert_eq!(&hr[4..8], &hj[..]);
    }

    #[test]
    fn reference_inputs_never_touch_the_recursion() {
        let mut r = rng::seeded(4);
        let lstm = LstmParams::new(&mut r, 1, 3, "t");
        let run = |ref_val: f64| {
            let mut tape = Tape::new();
            let bound = lstm.bind(&mut tape);
            let mut h = tape.zeros(vec![1, 3]);
            let mut c = tape.zeros(vec![1, 3]);
            for step in 0..3 {
                let joint = tape.constant(vec![step as f64 * 0.1], vec![1, 1]);
                let refs = tape.constant(vec![ref_val, -ref_val], vec![2, 1]);
                let ((hj, cj), _) =
                    modified_lstm_step(&mut tape, &bound, joint, refs, h, c, 2).unwrap();
                h = hj;
                c = cj;
            }
            tape.value(h).to_vec()
        };
        assert_eq!(run(0.5), run(123.0));
    }

    #[test]
    fn modified_rollout_equals_composed_plain_steps() {
        let mut r = rng::seeded(5);
        let lstm = LstmParams::new(&mut r, 1, 3, "t");
        let joints = [0.2, -0.4, 0.9];
        let refs = [0.7, -0.1, 0.3];

        // modified rollout
        let mut tape = Tape::new();
        let bound = lstm.bind(&mut tape);
        let mut h = tape.zeros(vec![1, 3]);
        let mut c = tape.zeros(vec![1, 3]);
        let mut ref_states = Vec::new();
        for i in 0..3 {
            let j = tape.constant(vec![joints[i]], vec![1, 1]);
            let rf = tape.constant(vec![refs[i]], vec![1, 1]);
            let ((hj, cj), (hr, _)) =
                modified_lstm_step(&mut tape, &bound, j, rf, h, c, 1).unwrap();
            ref_states.push(tape.value(hr).to_vec());
            h = hj;
            c = cj;
        }
        let joint_final = tape.value(h).to_vec();

        // plain steps on joint inputs, one-shot branch per step for refs
        let mut tape2 = Tape::new();
        let bound2 = lstm.bind(&mut tape2);
        let mut h2 = tape2.zeros(vec![1, 3]);
        let mut c2 = tape2.zeros(vec![1, 3]);
        for i in 0..3 {
            let rf = tape2.constant(vec![refs[i]], vec![1, 1]);
            let (hr, _) = lstm_step(&mut tape2, &bound2, rf, h2, c2).unwrap();
            assert_eq!(tape2.value(hr), &ref_states[i][..]);
            let j = tape2.constant(vec![joints[i]], vec![1, 1]);
            let (hj, cj) = lstm_step(&mut tape2, &bound2, j, h2, c2).unwrap();
            h2 = hj;
            c2 = cj;
        }
        assert_eq!(tape2.value(h2), &joint_final[..]);
    }

    #[test]
    fn dine_forward_zero_head_outputs_zero_and_t1_is_feedforward() {
        let mut r = rng::seeded(6);
        let mut net = DineNetwork::new(&mut r, 1, 4, &[5], 2, "t");
        for p in net.head.params_mut() {
            for v in p.data.iter_mut() {
                *v = 0.0;
            }
        }
        let (gj, gr) = net
            .score_sequence(&[0.4, -0.2], &[0.1, 0.9, -0.3, 0.2], 2)
            .unwrap();
        assert!(gj.iter().all(|&v| v == 0.0));
        assert!(gr.iter().all(|&v| v == 0.0));

        // T=1 with a live head: just a feedforward net on (input, zero state)
        let net1 = DineNetwork::new(&mut r, 1, 4, &[5], 1, "t");
        let (g1, _) = net1.score_sequence(&[0.4], &[0.1], 1).unwrap();
        assert_eq!(g1.len(), 1);
        assert!(g1[0].is_finite());
    }

    #[test]
    fn dine_output_is_causal() {
        let mut r = rng::seeded(7);
        let net = DineNetwork::new(&mut r, 1, 5, &[6], 1, "t");
        let joint_a = [0.1, 0.2, 0.3, 0.4];
        let mut joint_b = joint_a;
        joint_b[3] = -9.0; // perturb the future
        let refs = [0.5, 0.5, 0.5, 0.5];
        let (ga, _) = net.score_sequence(&joint_a, &refs, 4).unwrap();
        let (gb, _) = net.score_sequence(&joint_b, &refs, 4).unwrap();
        assert_eq!(&ga[..3], &gb[..3]);
        assert_ne!(ga[3], gb[3]);
    }

    #[test]
    fn shared_head_scores_joint_and_reference_identically() {
        let mut r = rng::seeded(8);
        let net = DineNetwork::new(&mut r, 1, 4, &[4], 1, "t");
        // same input as joint and reference: first-step scores must agree
        let (gj, gr) = net.score_sequence(&[0.6], &[0.6], 1).unwrap();
        assert_eq!(gj[0], gr[0]);
    }

    #[test]
    fn constraint_layer_examples() {
        let mut data = vec![1.0, -1.0];
        constraint_layer(&mut data, 1, &Constraint::AveragePower(4.0)).unwrap();
        assert_eq!(data, vec![2.0, -2.0]);

        let mut zero = vec![0.0; 4];
        constraint_layer(&mut zero, 1, &Constraint::PeakPower(2.0)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        let mut batch: Vec<f64> = (0..12).map(|i| i as f64 - 6.0).collect();
        constraint_layer(&mut batch, 3, &Constraint::AveragePower(2.5)).unwrap();
        let ms = batch.chunks(3).map(|v| v.iter().map(|x| x * x).sum::<f64>()).sum::<f64>()
            / (batch.len() / 3) as f64;
        assert!((ms - 2.5).abs() < 1e-12, "mean squared norm = {ms}");
    }

    #[test]
    fn constraint_rejects_bad_parameters() {
        assert!(Constraint::AveragePower(-1.0).validate().is_err());
        assert!(Constraint::PeakPower(0.0).validate().is_err());
    }

    #[test]
    fn ndt_zero_weights_with_power_guard_emits_zeros() {
        let mut r = rng::seeded(9);
        let mut net = NdtNetwork::recurrent(
            &mut r,
            1,
            1,
            None,
            3,
            &[4],
            Constraint::AveragePower(1.0),
            "t",
        )
        .unwrap();
        for p in net.params_mut() {
            for v in p.data.iter_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let steps: Vec<NodeId> = (0..3).map(|_| tape.constant(vec![0.7], vec![1, 1])).collect();
        let out = ndt_forward(&mut tape, &net, &bound, &steps, None).unwrap();
        for id in out {
            assert!(tape.value(id).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ndt_peak_constraint_bounds_every_coordinate() {
        let mut r = rng::seeded(10);
        let net =
            NdtNetwork::recurrent(&mut r, 1, 1, None, 4, &[8], Constraint::PeakPower(2.0), "t")
                .unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let steps: Vec<NodeId> = (0..6)
            .map(|i| tape.constant(vec![(i as f64 - 3.0) * 50.0], vec![1, 1]))
            .collect();
        let out = ndt_forward(&mut tape, &net, &bound, &steps, None).unwrap();
        for id in out {
            for &v in tape.value(id) {
                assert!(v > -2.0 && v < 2.0);
            }
        }
    }

    #[test]
    fn ndt_outputs_are_causal_in_the_noise() {
        let mut r = rng::seeded(11);
        let net = NdtNetwork::recurrent(&mut r, 1, 1, None, 4, &[6], Constraint::None, "t")
            .unwrap();
        let run = |u2: f64| {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let u = [0.3, u2, 0.9];
            let steps: Vec<NodeId> =
                u.iter().map(|&v| tape.constant(vec![v], vec![1, 1])).collect();
            let out = ndt_forward(&mut tape, &net, &bound, &steps, None).unwrap();
            out.iter().map(|&id| tape.value(id)[0]).collect::<Vec<_>>()
        };
        let a = run(0.5);
        let b = run(-4.0);
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn feedback_wiring_is_checked() {
        let mut r = rng::seeded(12);
        let net = NdtNetwork::recurrent(
            &mut r,
            1,
            1,
            Some(1),
            3,
            &[4],
            Constraint::None,
            "t",
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let steps = [tape.constant(vec![0.1], vec![1, 1])];
        assert!(ndt_forward(&mut tape, &net, &bound, &steps, None).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_restores_parameters() {
        let mut r = rng::seeded(13);
        let net = DineNetwork::new(&mut r, 2, 3, &[4], 2, "dine_y");
        let json = checkpoint_to_json(&[&net]);
        let mut other = DineNetwork::new(&mut r, 2, 3, &[4], 2, "dine_y");
        assert_ne!(other.lstm.w_i.data, net.lstm.w_i.data);
        checkpoint_from_json(&json, &mut [&mut other]).unwrap();
        assert_eq!(other.lstm.w_i.data, net.lstm.w_i.data);
        assert_eq!(other.head.layers[0].weight.data, net.head.layers[0].weight.data);
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let mut r = rng::seeded(14);
        let net = DineNetwork::new(&mut r, 2, 3, &[4], 2, "dine_y");
        let json = checkpoint_to_json(&[&net]);
        let mut wrong = DineNetwork::new(&mut r, 2, 5, &[4], 2, "dine_y");
        assert!(checkpoint_from_json(&json, &mut [&mut wrong]).is_err());
    }
}
