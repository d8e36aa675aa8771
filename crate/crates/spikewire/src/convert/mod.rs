//! ANN-to-SNN conversion.
//!
//! Weighted layers become bias-free kernels fed by differential MT neurons,
//! ReLUs become rectifying neurons, other nonlinearities and bilinear ops
//! become graded units, and every bias is folded into the initial potential
//! of the first stateful node downstream.

mod graph;
mod io;
mod normalize;

use std::collections::HashMap;

use crate::ann::{AnnGraph, LayerKind};
use crate::error::{Error, Result};
use crate::graded::{BinaryOp, GradedFn};
use crate::tensor::{self, Tensor};

pub use graph::{
    eval_stateless, expand_per_channel, Mode, Provenance, SnnGraph, SnnKind, SnnNode, ThresholdSpec, Thresholds,
};
pub use io::SNN_SCHEMA;
pub use normalize::normalize_weights;

/// A place where conversion puts a spiking neuron layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertionPoint {
    /// Threshold key and id of the neuron node in the converted graph.
    pub key: String,
    /// ANN node whose activation the neuron encodes.
    pub source: String,
    /// The neuron replaces this ReLU (its statistics are those of the ReLU input).
    pub rectify: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvertOptions {
    pub mode: Mode,
    pub n_thresholds: u32,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Differential,
            n_thresholds: 4,
        }
    }
}

/// Neuron id for a non-ReLU insertion point at `source`.
pub fn spike_id(source: &str) -> String {
    format!("{source}/spk")
}

/// Output id for an ANN sink.
pub fn output_id(sink: &str) -> String {
    format!("{sink}/out")
}

/// Every neuron layer [`convert`] will create, in execution order.
pub fn insertion_points(graph: &AnnGraph) -> Vec<InsertionPoint> {
    fn ensure<'g>(src: &'g str, points: &mut Vec<InsertionPoint>, spiking: &mut HashMap<&'g str, bool>) {
        if !spiking.get(src).copied().unwrap_or(false) {
            points.push(InsertionPoint {
                key: spike_id(src),
                source: src.to_string(),
                rectify: false,
            });
            spiking.insert(src, true);
        }
    }

    let mut points = Vec::new();
    // whether the stream of an ANN node is (already) spiking
    let mut spiking: HashMap<&str, bool> = HashMap::new();
    for node in graph.topo() {
        let id = node.id.as_str();
        match &node.kind {
            LayerKind::Relu => {
                points.push(InsertionPoint {
                    key: id.to_string(),
                    source: id.to_string(),
                    rectify: true,
                });
                spiking.insert(id, true);
            }
            LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => ensure(&node.inputs[0], &mut points, &mut spiking),
            LayerKind::MatMul { .. } | LayerKind::ElemMul => {
                ensure(&node.inputs[0], &mut points, &mut spiking);
                ensure(&node.inputs[1], &mut points, &mut spiking);
            }
            LayerKind::Flatten => {
                let s = spiking.get(node.inputs[0].as_str()).copied().unwrap_or(false);
                spiking.insert(id, s);
            }
            _ => {}
        }
    }
    points
}

struct Builder<'a> {
    thresholds: &'a Thresholds,
    opts: ConvertOptions,
    nodes: Vec<SnnNode>,
    /// ANN id -> SNN node carrying its (offset-free) encoding.
    stream: HashMap<String, String>,
    /// ANN id -> constant still to be added to the decoded stream.
    offset: HashMap<String, Option<Tensor>>,
    /// SNN ids of nodes that emit spikes.
    spiking: HashMap<String, bool>,
}

impl Builder<'_> {
    fn push(&mut self, node: SnnNode, spiking: bool) {
        self.spiking.insert(node.id.clone(), spiking);
        self.nodes.push(node);
    }

    fn neuron(&mut self, key: &str, input: &str, init: Option<Tensor>, rectify: bool) -> Result<()> {
        let spec = self
            .thresholds
            .get(key)
            .ok_or_else(|| Error::MissingThreshold(key.to_string()))?;
        let mut node = SnnNode::new(
            key,
            SnnKind::DiffNeuron {
                thetas: spec.thetas.clone(),
                n: self.opts.n_thresholds,
                rectify,
            },
            &[input],
        )
        .with_init(init);
        node.provenance = Some(spec.provenance.clone());
        self.push(node, true);
        Ok(())
    }

    /// Makes sure the stream of ANN node `src` is spiking, inserting a
    /// neuron if needed, and returns its SNN id.
    fn spiking_stream(&mut self, src: &str) -> Result<String> {
        let cur = self.stream[src].clone();
        if self.spiking[&cur] && self.offset[src].is_none() {
            return Ok(cur);
        }
        let key = spike_id(src);
        let init = self.offset[src].clone();
        self.neuron(&key, &cur, init, false)?;
        self.stream.insert(src.to_string(), key.clone());
        self.offset.insert(src.to_string(), None);
        Ok(key)
    }

    fn set(&mut self, ann_id: &str, snn_id: &str, offset: Option<Tensor>) {
        self.stream.insert(ann_id.to_string(), snn_id.to_string());
        self.offset.insert(ann_id.to_string(), offset);
    }
}

/// Converts `graph` into a spiking graph. Every insertion point (see
/// [`insertion_points`]) must have an entry in `thresholds`.
pub fn convert(graph: &AnnGraph, thresholds: &Thresholds, opts: ConvertOptions) -> Result<SnnGraph> {
    if opts.n_thresholds == 0 {
        return Err(Error::InvalidParam("n_thresholds must be at least 1".into()));
    }
    let mut b = Builder {
        thresholds,
        opts,
        nodes: Vec::new(),
        stream: HashMap::new(),
        offset: HashMap::new(),
        spiking: HashMap::new(),
    };
    for node in graph.topo() {
        let id = node.id.as_str();
        let ins = &node.inputs;
        match &node.kind {
            LayerKind::Input { shape } => {
                b.push(
                    SnnNode::new(
                        id,
                        SnnKind::Input {
                            shape: shape.clone(),
                            scale: None,
                        },
                        &[],
                    ),
                    false,
                );
                b.set(id, id, None);
            }
            LayerKind::Linear { weight, bias } => {
                // the neuron in front absorbs any upstream offset
                let src = b.spiking_stream(&ins[0])?;
                b.push(SnnNode::new(id, SnnKind::LinearKernel { weight: weight.clone() }, &[&src]), false);
                b.set(id, id, bias.as_ref().map(|bias| broadcast_bias(bias, graph.shape_of(id).unwrap())));
            }
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let src = b.spiking_stream(&ins[0])?;
                b.push(
                    SnnNode::new(
                        id,
                        SnnKind::ConvKernel {
                            weight: weight.clone(),
                            stride: *stride,
                            padding: *padding,
                        },
                        &[&src],
                    ),
                    false,
                );
                let shape = graph.shape_of(id)?;
                b.set(id, id, bias.as_ref().map(|bias| expand_per_channel(bias.data(), shape)));
            }
            LayerKind::Relu => {
                let src = b.stream[&ins[0]].clone();
                let init = b.offset[&ins[0]].clone();
                b.neuron(id, &src, init, true)?;
                b.set(id, id, None);
            }
            LayerKind::Gelu | LayerKind::Silu | LayerKind::MaxPool { .. } | LayerKind::LayerNorm { .. } | LayerKind::Softmax { .. } => {
                let func = graded_fn(&node.kind);
                let src = b.stream[&ins[0]].clone();
                let init = b.offset[&ins[0]].clone();
                b.push(
                    SnnNode::new(
                        id,
                        SnnKind::UnaryGraded {
                            func,
                            in_scale: 1.0,
                            out_scale: 1.0,
                        },
                        &[&src],
                    )
                    .with_init(init),
                    false,
                );
                b.set(id, id, None);
            }
            LayerKind::MatMul { transpose_b } => {
                binary(&mut b, id, ins, BinaryOp::MatMul { transpose_b: *transpose_b })?;
            }
            LayerKind::ElemMul => binary(&mut b, id, ins, BinaryOp::ElemMul)?,
            LayerKind::Add => {
                let (a, c) = (b.stream[&ins[0]].clone(), b.stream[&ins[1]].clone());
                let offset = match (b.offset[&ins[0]].clone(), b.offset[&ins[1]].clone()) {
                    (Some(x), Some(y)) => Some(x.add(&y)?),
                    (x, y) => x.or(y),
                };
                b.push(SnnNode::new(id, SnnKind::Add, &[&a, &c]), false);
                b.set(id, id, offset);
            }
            LayerKind::Flatten => {
                let src = b.stream[&ins[0]].clone();
                let offset = b.offset[&ins[0]].as_ref().map(|o| o.flatten());
                let spiking = b.spiking[&src];
                b.push(SnnNode::new(id, SnnKind::Flatten, &[&src]), spiking);
                b.set(id, id, offset);
            }
            LayerKind::AvgPool { kernel, stride } => {
                let src = b.stream[&ins[0]].clone();
                let offset = b.offset[&ins[0]]
                    .as_ref()
                    .map(|o| tensor::avg_pool2d(o, *kernel, *stride))
                    .transpose()?;
                b.push(
                    SnnNode::new(
                        id,
                        SnnKind::AvgPool {
                            kernel: *kernel,
                            stride: *stride,
                        },
                        &[&src],
                    ),
                    false,
                );
                b.set(id, id, offset);
            }
        }
    }
    for sink in graph.output_ids() {
        let src = b.stream[sink].clone();
        let init = b.offset[sink].clone();
        b.push(
            SnnNode::new(output_id(sink), SnnKind::Output { scale: None }, &[&src]).with_init(init),
            false,
        );
    }
    SnnGraph::new(b.nodes, opts.mode)
}

fn binary(b: &mut Builder, id: &str, ins: &[String], op: BinaryOp) -> Result<()> {
    let x = b.spiking_stream(&ins[0])?;
    let y = b.spiking_stream(&ins[1])?;
    b.push(
        SnnNode::new(
            id,
            SnnKind::BinaryGraded {
                op,
                in_scales: [1.0, 1.0],
                out_scale: 1.0,
            },
            &[&x, &y],
        ),
        false,
    );
    b.set(id, id, None);
    Ok(())
}

fn graded_fn(kind: &LayerKind) -> GradedFn {
    match kind {
        LayerKind::Gelu => GradedFn::Gelu,
        LayerKind::Silu => GradedFn::Silu,
        LayerKind::MaxPool { kernel, stride } => GradedFn::MaxPool {
            kernel: *kernel,
            stride: *stride,
        },
        LayerKind::LayerNorm { gamma, beta, eps } => GradedFn::LayerNorm {
            gamma: gamma.clone(),
            beta: beta.clone(),
            eps: *eps,
        },
        LayerKind::Softmax { axis } => GradedFn::Softmax { axis: *axis },
        _ => unreachable!("not a graded unary layer"),
    }
}

/// Repeats a last-axis bias over every leading position of `shape`.
fn broadcast_bias(bias: &Tensor, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let d = bias.len();
    Tensor::new(shape.to_vec(), (0..len).map(|i| bias.data()[i % d]).collect()).unwrap()
}
