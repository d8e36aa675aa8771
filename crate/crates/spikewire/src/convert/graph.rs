use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graded::{BinaryOp, GradedFn};
use crate::tensor::{self, Tensor};

/// How activations are carried between layers over time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Each step emits a correction; the decoded value is `Σ x[i]/i`.
    #[default]
    Differential,
    /// Each step emits a sample; the decoded value is the running mean.
    Rate,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Differential => "differential",
            Mode::Rate => "rate",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "differential" => Ok(Mode::Differential),
            "rate" => Ok(Mode::Rate),
            _ => Err(Error::InvalidParam(format!("unknown mode `{s}`"))),
        }
    }
}

/// Where a neuron layer's thresholds came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Provenance {
    Iteration { quant_levels: u64, eps: f64 },
    Percentile { p: f64, c: f64 },
    Manual,
}

/// Thresholds for one insertion point: one value, or one per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub thetas: Vec<f64>,
    pub provenance: Provenance,
}

impl ThresholdSpec {
    pub fn manual(theta: f64) -> Self {
        Self {
            thetas: vec![theta],
            provenance: Provenance::Manual,
        }
    }
}

pub type Thresholds = BTreeMap<String, ThresholdSpec>;

#[derive(Clone, Debug, PartialEq)]
pub enum SnnKind {
    /// `scale` maps encoded input units to real units (all ones when absent).
    Input {
        shape: Vec<usize>,
        scale: Option<Tensor>,
    },
    LinearKernel {
        weight: Tensor,
    },
    ConvKernel {
        weight: Tensor,
        stride: [usize; 2],
        padding: [usize; 2],
    },
    AvgPool {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    /// MT neuron layer. With `rectify` it also applies ReLU to its decoded
    /// input, standing in for the ReLU it replaces.
    DiffNeuron {
        thetas: Vec<f64>,
        n: u32,
        rectify: bool,
    },
    UnaryGraded {
        func: GradedFn,
        in_scale: f64,
        out_scale: f64,
    },
    BinaryGraded {
        op: BinaryOp,
        in_scales: [f64; 2],
        out_scale: f64,
    },
    Add,
    Flatten,
    /// Graph output; `scale` maps its stream to real units.
    Output {
        scale: Option<Tensor>,
    },
}

impl SnnKind {
    pub fn name(&self) -> &'static str {
        match self {
            SnnKind::Input { .. } => "Input",
            SnnKind::LinearKernel { .. } => "LinearKernel",
            SnnKind::ConvKernel { .. } => "ConvKernel",
            SnnKind::AvgPool { .. } => "AvgPool",
            SnnKind::DiffNeuron { .. } => "DiffNeuron",
            SnnKind::UnaryGraded { .. } => "UnaryGraded",
            SnnKind::BinaryGraded { .. } => "BinaryGraded",
            SnnKind::Add => "Add",
            SnnKind::Flatten => "Flatten",
            SnnKind::Output { .. } => "Output",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            SnnKind::Input { .. } => 0,
            SnnKind::BinaryGraded { .. } | SnnKind::Add => 2,
            _ => 1,
        }
    }

    /// Kinds whose inputs are multiplied by weights and so must be spikes.
    pub fn needs_spiking_input(&self) -> bool {
        matches!(
            self,
            SnnKind::LinearKernel { .. } | SnnKind::ConvKernel { .. } | SnnKind::BinaryGraded { .. }
        )
    }

    /// Kinds that may carry a folded initial potential.
    pub fn takes_init(&self) -> bool {
        matches!(
            self,
            SnnKind::DiffNeuron { .. } | SnnKind::UnaryGraded { .. } | SnnKind::Output { .. }
        )
    }
}

impl fmt::Display for SnnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnnNode {
    pub id: String,
    pub kind: SnnKind,
    pub inputs: Vec<String>,
    /// Folded bias (the offset of the decoded input), if any.
    pub init: Option<Tensor>,
    pub provenance: Option<Provenance>,
}

impl SnnNode {
    pub fn new(id: impl Into<String>, kind: SnnKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            init: None,
            provenance: None,
        }
    }

    pub fn with_init(mut self, init: Option<Tensor>) -> Self {
        self.init = init;
        self
    }
}

/// Validated spiking graph; nodes are stored in execution order.
#[derive(Clone, Debug)]
pub struct SnnGraph {
    nodes: Vec<SnnNode>,
    index: HashMap<String, usize>,
    shapes: Vec<Vec<usize>>,
    mode: Mode,
}

impl SnnGraph {
    /// Builds and audits a graph. Nodes must be listed so that every input
    /// precedes its consumer.
    pub fn new(nodes: Vec<SnnNode>, mode: Mode) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::with_capacity(nodes.len());
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if n.inputs.len() != n.kind.arity() {
                return Err(Error::InvalidGraph(format!(
                    "`{}` ({}) takes {} inputs, got {}",
                    n.id,
                    n.kind,
                    n.kind.arity(),
                    n.inputs.len()
                )));
            }
            let in_shapes = n
                .inputs
                .iter()
                .map(|i| match index.get(i) {
                    Some(&k) => Ok(shapes[k].as_slice()),
                    None if nodes.iter().any(|m| &m.id == i) => Err(Error::InvalidGraph(format!(
                        "`{}` is listed before its input `{i}`",
                        n.id
                    ))),
                    None => Err(Error::UnknownNode(i.clone())),
                })
                .collect::<Result<Vec<_>>>()?;
            let shape = infer_shape(n, &in_shapes)?;
            if let Some(init) = &n.init {
                if !n.kind.takes_init() {
                    return Err(Error::InvalidGraph(format!(
                        "`{}` ({}) cannot carry an initial potential",
                        n.id, n.kind
                    )));
                }
                let want: &[usize] = if matches!(n.kind, SnnKind::DiffNeuron { .. } | SnnKind::Output { .. }) {
                    &shape
                } else {
                    in_shapes[0]
                };
                if init.shape() != want {
                    return Err(Error::Shape(format!(
                        "initial potential of `{}` is {:?}, expected {:?}",
                        n.id,
                        init.shape(),
                        want
                    )));
                }
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id `{}`", n.id)));
            }
            shapes.push(shape);
        }
        let graph = Self {
            nodes,
            index,
            shapes,
            mode,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn nodes(&self) -> &[SnnNode] {
        &self.nodes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn node(&self, id: &str) -> Result<&SnnNode> {
        self.index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn shape_of(&self, id: &str) -> Result<&[usize]> {
        self.index
            .get(id)
            .map(|&i| self.shapes[i].as_slice())
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn input_ids(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, SnnKind::Input { .. }))
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn output_ids(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, SnnKind::Output { .. }))
            .map(|n| n.id.as_str())
            .collect()
    }

    pub fn neuron_ids(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, SnnKind::DiffNeuron { .. }))
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Folded biases keyed by node id.
    pub fn init_potentials(&self) -> BTreeMap<&str, &Tensor> {
        self.nodes
            .iter()
            .filter_map(|n| n.init.as_ref().map(|t| (n.id.as_str(), t)))
            .collect()
    }

    /// Structural audit: every weighted input is fed by a spiking neuron
    /// (possibly through a Flatten), and every graph sink is an Output.
    pub fn validate(&self) -> Result<()> {
        let mut consumed = vec![false; self.nodes.len()];
        for n in &self.nodes {
            for i in &n.inputs {
                consumed[self.index[i]] = true;
            }
            if n.kind.needs_spiking_input() {
                for i in &n.inputs {
                    if !self.is_spiking(i) {
                        return Err(Error::InvalidGraph(format!(
                            "`{}` ({}) reads `{i}`, which is not a spiking neuron",
                            n.id, n.kind
                        )));
                    }
                }
            }
            if let SnnKind::DiffNeuron { thetas, n: levels, .. } = &n.kind {
                if thetas.is_empty() || thetas.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                    return Err(Error::InvalidParam(format!("`{}` has a non-positive threshold", n.id)));
                }
                let shape = &self.shapes[self.index[&n.id]];
                let len: usize = shape.iter().product();
                if thetas.len() != 1 && (shape.len() != 3 || thetas.len() != shape[0]) {
                    return Err(Error::Shape(format!(
                        "`{}` has {} thresholds for an activation of shape {shape:?}",
                        n.id,
                        thetas.len()
                    )));
                }
                if *levels == 0 || len == 0 {
                    return Err(Error::InvalidParam(format!("`{}` has no thresholds", n.id)));
                }
            }
        }
        for (n, used) in self.nodes.iter().zip(&consumed) {
            if !used && !matches!(n.kind, SnnKind::Output { .. }) {
                return Err(Error::InvalidGraph(format!("`{}` ({}) is a sink but not an Output", n.id, n.kind)));
            }
        }
        if self.output_ids().is_empty() {
            return Err(Error::InvalidGraph("graph has no Output".into()));
        }
        Ok(())
    }

    /// True when `id` emits spikes: a neuron, or a Flatten of one.
    pub fn is_spiking(&self, id: &str) -> bool {
        let mut cur = id;
        loop {
            let Some(&i) = self.index.get(cur) else {
                return false;
            };
            match &self.nodes[i].kind {
                SnnKind::DiffNeuron { .. } => return true,
                SnnKind::Flatten => cur = &self.nodes[i].inputs[0],
                _ => return false,
            }
        }
    }

    /// Full per-element threshold tensor of a neuron node.
    pub fn expanded_thetas(&self, id: &str) -> Result<Tensor> {
        let node = self.node(id)?;
        let SnnKind::DiffNeuron { thetas, .. } = &node.kind else {
            return Err(Error::InvalidParam(format!("`{id}` is not a neuron")));
        };
        let shape = self.shape_of(id)?;
        Ok(expand_per_channel(thetas, shape))
    }
}

/// Tiles one value per leading-axis channel (or a single value) over `shape`.
pub fn expand_per_channel(values: &[f64], shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let stride = (len / values.len()).max(1);
    Tensor::new(shape.to_vec(), (0..len).map(|i| values[i / stride]).collect()).unwrap()
}

fn infer_shape(n: &SnnNode, ins: &[&[usize]]) -> Result<Vec<usize>> {
    let zeros: Vec<Tensor> = ins.iter().map(|s| Tensor::zeros(s)).collect();
    Ok(match &n.kind {
        SnnKind::Input { shape, scale } => {
            if let Some(s) = scale {
                if s.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!("input scale of `{}` has the wrong shape", n.id)));
                }
            }
            shape.clone()
        }
        SnnKind::DiffNeuron { .. } | SnnKind::Output { .. } => ins[0].to_vec(),
        SnnKind::UnaryGraded { func, .. } => func.apply(&zeros[0])?.shape().to_vec(),
        SnnKind::BinaryGraded { op, .. } => op.apply(&zeros[0], &zeros[1])?.shape().to_vec(),
        kind => {
            let args: Vec<&Tensor> = zeros.iter().collect();
            eval_stateless(kind, &args)?.0.shape().to_vec()
        }
    })
}

/// Evaluates a stateless node on one step's inputs, returning the output
/// and the number of accumulate operations the step triggered.
pub fn eval_stateless(kind: &SnnKind, args: &[&Tensor]) -> Result<(Tensor, u64)> {
    match kind {
        SnnKind::LinearKernel { weight } => {
            let out = tensor::linear(args[0], weight, None)?;
            Ok((out, args[0].count_nonzero() as u64 * weight.shape()[0] as u64))
        }
        SnnKind::ConvKernel {
            weight,
            stride,
            padding,
        } => tensor::conv2d_counted(args[0], weight, None, *stride, *padding),
        SnnKind::AvgPool { kernel, stride } => Ok((tensor::avg_pool2d(args[0], *kernel, *stride)?, 0)),
        SnnKind::Add => Ok((args[0].add(args[1])?, 0)),
        SnnKind::Flatten => Ok((args[0].flatten(), 0)),
        other => Err(Error::InvalidGraph(format!("{other} is stateful"))),
    }
}
