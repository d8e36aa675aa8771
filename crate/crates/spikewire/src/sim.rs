//! Discrete-time simulation of a converted graph, with spike and
//! synaptic-operation accounting and the AC/MAC energy estimate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::convert::{eval_stateless, Mode, SnnGraph, SnnKind};
use crate::error::{Error, Result};
use crate::graded::{BinaryGradedState, GradedFn, UnaryGradedState};
use crate::neuron::{FiringRule, NeuronLayerState, ThresholdLadder};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

/// Energy per multiply-accumulate, picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per accumulate, picojoules.
pub const E_AC_PJ: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimOptions {
    pub timesteps: usize,
    pub rule: FiringRule,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            timesteps: 64,
            rule: FiringRule::Argmin,
        }
    }
}

/// Step inputs carrying the constant `x` for `timesteps` steps.
pub fn encode_input(x: &Tensor, timesteps: usize, mode: Mode) -> Vec<Tensor> {
    (1..=timesteps)
        .map(|t| match mode {
            Mode::Differential if t > 1 => Tensor::zeros(x.shape()),
            _ => x.clone(),
        })
        .collect()
}

/// Decoded value after a step emitting `x` at time `t`, given the value
/// decoded at `t − 1`.
pub fn decode_step(prev: &Tensor, x: &Tensor, t: f64, mode: Mode) -> Result<Tensor> {
    match mode {
        Mode::Differential => prev.zip_map(x, |r, x| r + x / t),
        Mode::Rate => prev.zip_map(x, |r, x| (t - 1.0) / t * r + x / t),
    }
}

/// Decoded values `r[1..=T]` of an emitted stream.
pub fn decode(stream: &[Tensor], mode: Mode) -> Result<Vec<Tensor>> {
    let mut out: Vec<Tensor> = Vec::with_capacity(stream.len());
    for (k, x) in stream.iter().enumerate() {
        let r = match out.last() {
            None => x.clone(),
            Some(prev) => decode_step(prev, x, (k + 1) as f64, mode)?,
        };
        out.push(r);
    }
    Ok(out)
}

#[allow(clippy::large_enum_variant)]
enum State {
    Stateless,
    Input,
    Neuron {
        /// ReLU applied to the decoded input before spiking.
        front: Option<UnaryGradedState>,
        neuron: NeuronLayerState,
        init: Option<Tensor>,
    },
    Unary {
        unit: UnaryGradedState,
        init: Option<Tensor>,
    },
    Binary(BinaryGradedState),
    Output {
        init: Option<Tensor>,
    },
}

/// Stepwise driver over one sample. Every node's last output stays
/// inspectable between steps.
pub struct Simulator<'g> {
    snn: &'g SnnGraph,
    states: Vec<State>,
    last: Vec<Tensor>,
    acs: Vec<u64>,
    t: usize,
}

impl<'g> Simulator<'g> {
    pub fn new(snn: &'g SnnGraph, rule: FiringRule) -> Result<Self> {
        let mode = snn.mode();
        let mut states = Vec::with_capacity(snn.nodes().len());
        let mut last = Vec::with_capacity(snn.nodes().len());
        for node in snn.nodes() {
            let shape = snn.shape_of(&node.id)?;
            let state = match &node.kind {
                SnnKind::Input { .. } => State::Input,
                SnnKind::DiffNeuron { thetas, n, rectify } => {
                    let ladders = thetas
                        .iter()
                        .map(|&t| ThresholdLadder::new(t, *n))
                        .collect::<Result<Vec<_>>>()?;
                    let mut neuron = NeuronLayerState::new(shape, ladders, rule)?;
                    let mut init = node.init.clone();
                    let front = if *rectify {
                        let m0 = match mode {
                            Mode::Differential => init.take().unwrap_or_else(|| Tensor::zeros(shape)),
                            Mode::Rate => Tensor::zeros(shape),
                        };
                        Some(UnaryGradedState::new(GradedFn::Relu, m0)?)
                    } else {
                        None
                    };
                    if mode == Mode::Differential {
                        if let Some(b) = init.take() {
                            neuron = neuron.with_rate_memory(b)?;
                        }
                    }
                    State::Neuron { front, neuron, init }
                }
                SnnKind::UnaryGraded {
                    func,
                    in_scale,
                    out_scale,
                } => {
                    let in_shape = snn.shape_of(&node.inputs[0])?;
                    let (m0, init) = match mode {
                        Mode::Differential => (node.init.clone().unwrap_or_else(|| Tensor::zeros(in_shape)), None),
                        Mode::Rate => (Tensor::zeros(in_shape), node.init.clone()),
                    };
                    State::Unary {
                        unit: UnaryGradedState::with_scales(func.clone(), m0, *in_scale, *out_scale)?,
                        init,
                    }
                }
                SnnKind::BinaryGraded {
                    op,
                    in_scales,
                    out_scale,
                } => State::Binary(BinaryGradedState::with_scales(
                    *op,
                    Tensor::zeros(snn.shape_of(&node.inputs[0])?),
                    Tensor::zeros(snn.shape_of(&node.inputs[1])?),
                    *in_scales,
                    *out_scale,
                )?),
                SnnKind::Output { .. } => State::Output { init: node.init.clone() },
                _ => State::Stateless,
            };
            states.push(state);
            last.push(Tensor::zeros(shape));
        }
        Ok(Self {
            snn,
            acs: vec![0; states.len()],
            states,
            last,
            t: 0,
        })
    }

    /// Steps executed so far.
    pub fn t(&self) -> usize {
        self.t
    }

    /// Advances every node by one step. `inputs` are this step's encoded
    /// values for the Input nodes, in declaration order.
    pub fn step(&mut self, inputs: &[Tensor]) -> Result<()> {
        let input_ids = self.snn.input_ids();
        if inputs.len() != input_ids.len() {
            return Err(Error::Shape(format!(
                "graph has {} inputs, got {}",
                input_ids.len(),
                inputs.len()
            )));
        }
        self.t += 1;
        let t = self.t;
        let mode = self.snn.mode();
        let mut next_input = inputs.iter();
        for (k, node) in self.snn.nodes().iter().enumerate() {
            let idx: Vec<usize> = node.inputs.iter().map(|i| self.snn.position(i).unwrap()).collect();
            let out = match &mut self.states[k] {
                State::Input => {
                    let x = next_input.next().unwrap();
                    self.last[k].expect_same_shape(x)?;
                    x.clone()
                }
                State::Stateless => {
                    let args: Vec<&Tensor> = idx.iter().map(|&i| &self.last[i]).collect();
                    let (y, ops) = eval_stateless(&node.kind, &args)?;
                    self.acs[k] += ops;
                    y
                }
                State::Neuron { front, neuron, init } => {
                    let mut x = self.last[idx[0]].clone();
                    if let Some(b) = init {
                        x.add_assign(b)?;
                    }
                    let stepped = match (mode, front) {
                        (Mode::Differential, Some(f)) => {
                            let x = f.step_differential(&x)?;
                            neuron.step_differential(&x)
                        }
                        (Mode::Differential, None) => neuron.step_differential(&x),
                        (Mode::Rate, Some(f)) => {
                            let x = f.step_rate(&x)?;
                            neuron.step_rate(&x)
                        }
                        (Mode::Rate, None) => neuron.step_rate(&x),
                    };
                    stepped.map_err(|e| match e {
                        Error::Overflow { t, .. } => Error::Overflow {
                            node: node.id.clone(),
                            t,
                        },
                        e => e,
                    })?
                }
                State::Unary { unit, init } => {
                    let mut x = self.last[idx[0]].clone();
                    match mode {
                        Mode::Differential => unit.step_differential(&x)?,
                        Mode::Rate => {
                            if let Some(b) = init {
                                x.add_assign(b)?;
                            }
                            unit.step_rate(&x)?
                        }
                    }
                }
                State::Binary(unit) => {
                    let (xa, xb) = (&self.last[idx[0]], &self.last[idx[1]]);
                    self.acs[k] += unit.op().event_ops(xa, xb);
                    match mode {
                        Mode::Differential => unit.step_differential(xa, xb)?,
                        Mode::Rate => unit.step_rate(xa, xb)?,
                    }
                }
                State::Output { init } => {
                    let mut x = self.last[idx[0]].clone();
                    if let Some(b) = init {
                        if mode == Mode::Rate || t == 1 {
                            x.add_assign(b)?;
                        }
                    }
                    x
                }
            };
            if !out.all_finite() {
                return Err(Error::Overflow {
                    node: node.id.clone(),
                    t,
                });
            }
            self.last[k] = out;
        }
        Ok(())
    }

    /// Output of node `id` at the last step.
    pub fn output_of(&self, id: &str) -> Result<&Tensor> {
        let k = self.snn.position(id).ok_or_else(|| Error::UnknownNode(id.to_string()))?;
        Ok(&self.last[k])
    }

    /// Cumulative non-zero emissions of a neuron node.
    pub fn spikes(&self, id: &str) -> u64 {
        match self.snn.position(id).map(|k| &self.states[k]) {
            Some(State::Neuron { neuron, .. }) => neuron.spike_count,
            _ => 0,
        }
    }

    /// Cumulative accumulate operations triggered at node `id`.
    pub fn acs(&self, id: &str) -> u64 {
        self.snn.position(id).map_or(0, |k| self.acs[k])
    }

    /// Threshold indices fired at the last step (0 = silent).
    pub fn neuron_indices(&self, id: &str) -> Option<&[u16]> {
        match self.snn.position(id).map(|k| &self.states[k]) {
            Some(State::Neuron { neuron, .. }) => Some(neuron.last_indices()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputTrace {
    pub id: String,
    /// Real value of one output unit; absent means 1.
    pub scale: Option<Tensor>,
    /// Emitted value per step.
    pub x: Vec<Tensor>,
    /// Decoded value per step.
    pub r: Vec<Tensor>,
}

impl OutputTrace {
    /// Decoded output after `t` steps, in real units.
    pub fn real(&self, t: usize) -> Tensor {
        let r = &self.r[t - 1];
        match &self.scale {
            Some(s) => r.mul(s).unwrap(),
            None => r.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub timesteps: usize,
    pub mode: Mode,
    pub outputs: Vec<OutputTrace>,
    /// Cumulative spike count per neuron node, one entry per step.
    pub spikes: BTreeMap<String, Vec<u64>>,
    /// Cumulative accumulate count per weighted node, one entry per step.
    pub acs: BTreeMap<String, Vec<u64>>,
}

impl SimulationTrace {
    pub fn total_spikes_at(&self, t: usize) -> u64 {
        self.spikes.values().map(|v| v[t - 1]).sum()
    }

    pub fn total_acs_at(&self, t: usize) -> u64 {
        self.acs.values().map(|v| v[t - 1]).sum()
    }

    pub fn total_spikes(&self) -> u64 {
        self.total_spikes_at(self.timesteps)
    }

    pub fn total_acs(&self) -> u64 {
        self.total_acs_at(self.timesteps)
    }

    /// Decoded outputs after `t` steps, in real units.
    pub fn real_outputs(&self, t: usize) -> Vec<Tensor> {
        self.outputs.iter().map(|o| o.real(t)).collect()
    }

    /// Per-step CSV: totals, then every output element in real units.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,total_spikes,total_acs");
        for o in &self.outputs {
            for i in 0..o.r[0].len() {
                let _ = write!(s, ",{}[{i}]", o.id);
            }
        }
        s.push('\n');
        for t in 1..=self.timesteps {
            let _ = write!(s, "{t},{},{}", self.total_spikes_at(t), self.total_acs_at(t));
            for v in self.real_outputs(t) {
                for x in v.data() {
                    let _ = write!(s, ",{x:e}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            timesteps: self.timesteps,
            mode: self.mode,
            total_spikes: self.total_spikes(),
            total_acs: self.total_acs(),
            spikes: self.spikes.iter().map(|(k, v)| (k.clone(), *v.last().unwrap())).collect(),
            acs: self.acs.iter().map(|(k, v)| (k.clone(), *v.last().unwrap())).collect(),
            outputs: self
                .outputs
                .iter()
                .map(|o| (o.id.clone(), o.real(self.timesteps)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub timesteps: usize,
    pub mode: Mode,
    pub total_spikes: u64,
    pub total_acs: u64,
    pub spikes: BTreeMap<String, u64>,
    pub acs: BTreeMap<String, u64>,
    pub outputs: BTreeMap<String, Tensor>,
}

/// Runs `snn` on one sample (real-valued inputs, one per Input node).
pub fn run(snn: &SnnGraph, inputs: &[Tensor], opts: SimOptions) -> Result<SimulationTrace> {
    if opts.timesteps == 0 {
        return Err(Error::InvalidParam("timesteps must be at least 1".into()));
    }
    let mode = snn.mode();
    let streams: Vec<Vec<Tensor>> = snn
        .nodes()
        .iter()
        .filter_map(|n| match &n.kind {
            SnnKind::Input { scale, .. } => Some(scale),
            _ => None,
        })
        .zip(inputs)
        .map(|(scale, x)| {
            let raw = match scale {
                Some(s) => x.zip_map(s, |a, b| a / b)?,
                None => x.clone(),
            };
            Ok(encode_input(&raw, opts.timesteps, mode))
        })
        .collect::<Result<_>>()?;
    if streams.len() != inputs.len() || inputs.len() != snn.input_ids().len() {
        return Err(Error::Shape(format!(
            "graph has {} inputs, got {}",
            snn.input_ids().len(),
            inputs.len()
        )));
    }

    let mut sim = Simulator::new(snn, opts.rule)?;
    let out_ids = snn.output_ids();
    let mut outputs: Vec<OutputTrace> = out_ids
        .iter()
        .map(|id| OutputTrace {
            id: id.to_string(),
            scale: match &snn.node(id).unwrap().kind {
                SnnKind::Output { scale } => scale.clone(),
                _ => None,
            },
            x: Vec::with_capacity(opts.timesteps),
            r: Vec::with_capacity(opts.timesteps),
        })
        .collect();
    let neuron_ids = snn.neuron_ids();
    let weighted: Vec<&str> = snn
        .nodes()
        .iter()
        .filter(|n| n.kind.needs_spiking_input())
        .map(|n| n.id.as_str())
        .collect();
    let mut spikes: BTreeMap<String, Vec<u64>> = neuron_ids.iter().map(|id| (id.to_string(), Vec::new())).collect();
    let mut acs: BTreeMap<String, Vec<u64>> = weighted.iter().map(|id| (id.to_string(), Vec::new())).collect();

    for step in 0..opts.timesteps {
        let xs: Vec<Tensor> = streams.iter().map(|s| s[step].clone()).collect();
        sim.step(&xs)?;
        let t = (step + 1) as f64;
        for (o, id) in outputs.iter_mut().zip(&out_ids) {
            let x = sim.output_of(id)?.clone();
            let r = match o.r.last() {
                None => x.clone(),
                Some(prev) => decode_step(prev, &x, t, mode)?,
            };
            o.x.push(x);
            o.r.push(r);
        }
        for id in &neuron_ids {
            spikes.get_mut(*id).unwrap().push(sim.spikes(id));
        }
        for id in &weighted {
            acs.get_mut(*id).unwrap().push(sim.acs(id));
        }
    }
    Ok(SimulationTrace {
        timesteps: opts.timesteps,
        mode,
        outputs,
        spikes,
        acs,
    })
}

/// Runs every sample independently; results keep the input order.
pub fn run_batch(
    snn: &SnnGraph,
    samples: &[Vec<Tensor>],
    opts: SimOptions,
    exec: Execution,
) -> Result<Vec<SimulationTrace>> {
    par::try_map(exec, samples, |s| run(snn, s, opts))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            e_mac: E_MAC_PJ,
            e_ac: E_AC_PJ,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub id: String,
    pub acs: f64,
    pub energy_pj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub timesteps: usize,
    pub samples: usize,
    pub model: EnergyModel,
    pub ann_macs: u64,
    /// Mean accumulate count per sample.
    pub snn_acs: f64,
    /// Mean spike count per sample.
    pub spikes: f64,
    pub e_ann_pj: f64,
    pub e_snn_pj: f64,
    /// `E_SNN / E_ANN`, with the SNN charged for accumulates only.
    pub ratio: f64,
    pub layers: Vec<LayerEnergy>,
}

/// Energy estimate of one trace against the source network's MAC count.
pub fn energy_report(trace: &SimulationTrace, ann_macs: u64) -> Result<EnergyReport> {
    energy_report_mean(std::slice::from_ref(trace), ann_macs, trace.timesteps)
}

/// Mean energy estimate over a batch, using counts accumulated up to step `t`.
pub fn energy_report_mean(traces: &[SimulationTrace], ann_macs: u64, t: usize) -> Result<EnergyReport> {
    if ann_macs == 0 {
        return Err(Error::InvalidParam("the source network performs no MACs".into()));
    }
    let first = traces.first().ok_or(Error::EmptyDataset)?;
    if t == 0 || t > first.timesteps {
        return Err(Error::InvalidParam(format!("step {t} outside 1..={}", first.timesteps)));
    }
    let model = EnergyModel::default();
    let count = traces.len() as f64;
    let layers: Vec<LayerEnergy> = first
        .acs
        .keys()
        .map(|id| {
            let acs = traces.iter().map(|tr| tr.acs[id][t - 1] as f64).sum::<f64>() / count;
            LayerEnergy {
                id: id.clone(),
                acs,
                energy_pj: acs * model.e_ac,
            }
        })
        .collect();
    let snn_acs = traces.iter().map(|tr| tr.total_acs_at(t) as f64).sum::<f64>() / count;
    let spikes = traces.iter().map(|tr| tr.total_spikes_at(t) as f64).sum::<f64>() / count;
    let e_ann = ann_macs as f64 * model.e_mac;
    let e_snn = snn_acs * model.e_ac;
    Ok(EnergyReport {
        timesteps: t,
        samples: traces.len(),
        model,
        ann_macs,
        snn_acs,
        spikes,
        e_ann_pj: e_ann,
        e_snn_pj: e_snn,
        ratio: e_snn / e_ann,
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub linf: f64,
    pub l2: f64,
    pub linf_rel: f64,
    pub l2_rel: f64,
    /// Argmax of the decoded output equals the ANN's.
    pub argmax_agree: bool,
}

/// Errors of the decoded outputs after `t` steps against the ANN outputs.
pub fn compare(trace: &SimulationTrace, ann_out: &[Tensor], t: usize) -> Result<ErrorMetrics> {
    if t == 0 || t > trace.timesteps {
        return Err(Error::InvalidParam(format!("step {t} outside 1..={}", trace.timesteps)));
    }
    let snn = trace.real_outputs(t);
    if snn.len() != ann_out.len() {
        return Err(Error::Shape(format!("{} SNN outputs vs {} ANN outputs", snn.len(), ann_out.len())));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (s, r) in snn.iter().zip(ann_out) {
        s.expect_same_shape(r)?;
        a.extend_from_slice(s.data());
        b.extend_from_slice(r.data());
    }
    Ok(metrics(&a, &b))
}

/// Error metrics of `approx` against `reference`.
pub fn metrics(approx: &[f64], reference: &[f64]) -> ErrorMetrics {
    let linf = approx.iter().zip(reference).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let l2 = approx.iter().zip(reference).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let ref_inf = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let ref_l2 = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = |e: f64, d: f64| if e == 0.0 { 0.0 } else { e / d };
    ErrorMetrics {
        linf,
        l2,
        linf_rel: rel(linf, ref_inf),
        l2_rel: rel(l2, ref_l2),
        argmax_agree: argmax(approx) == argmax(reference),
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests;
