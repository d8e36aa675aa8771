use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input {
        shape: Vec<usize>,
    },
    /// `y = x Wᵀ + b` over the last axis, `W` shaped `[out, in]`.
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    /// `[C, H, W]` cross-correlation with a `[C_out, C, kh, kw]` kernel.
    Conv2d {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Relu,
    Gelu,
    Silu,
    MaxPool {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    AvgPool {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    /// Normalizes over the last axis.
    LayerNorm {
        gamma: Option<Tensor>,
        beta: Option<Tensor>,
        eps: f64,
    },
    Softmax {
        axis: isize,
    },
    /// `A · B` (or `A · Bᵀ` when `transpose_b`) on matrices.
    MatMul {
        transpose_b: bool,
    },
    ElemMul,
    Add,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "Input",
            LayerKind::Linear { .. } => "Linear",
            LayerKind::Conv2d { .. } => "Conv2d",
            LayerKind::Relu => "ReLU",
            LayerKind::Gelu => "GeLU",
            LayerKind::Silu => "SiLU",
            LayerKind::MaxPool { .. } => "MaxPool",
            LayerKind::AvgPool { .. } => "AvgPool",
            LayerKind::LayerNorm { .. } => "LayerNorm",
            LayerKind::Softmax { .. } => "Softmax",
            LayerKind::MatMul { .. } => "MatMul",
            LayerKind::ElemMul => "ElemMul",
            LayerKind::Add => "Add",
            LayerKind::Flatten => "Flatten",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::MatMul { .. } | LayerKind::ElemMul | LayerKind::Add => 2,
            _ => 1,
        }
    }

    /// Nonlinear single-input maps that become graded units.
    pub fn is_graded_unary(&self) -> bool {
        matches!(
            self,
            LayerKind::Gelu
                | LayerKind::Silu
                | LayerKind::MaxPool { .. }
                | LayerKind::LayerNorm { .. }
                | LayerKind::Softmax { .. }
        )
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Validated DAG of layers. Immutable once built.
#[derive(Clone, Debug)]
pub struct AnnGraph {
    nodes: Vec<LayerNode>,
    index: HashMap<String, usize>,
    order: Vec<usize>,
    input_ids: Vec<String>,
    output_ids: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl AnnGraph {
    pub fn new(nodes: Vec<LayerNode>) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id `{}`", n.id)));
            }
        }
        for n in &nodes {
            if n.inputs.len() != n.kind.arity() {
                return Err(Error::InvalidGraph(format!(
                    "`{}` ({}) takes {} inputs, got {}",
                    n.id,
                    n.kind,
                    n.kind.arity(),
                    n.inputs.len()
                )));
            }
            for i in &n.inputs {
                if !index.contains_key(i) {
                    return Err(Error::UnknownNode(i.clone()));
                }
            }
        }
        let order = topo_order(&nodes, &index)?;
        let input_ids: Vec<String> = nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Input { .. }))
            .map(|n| n.id.clone())
            .collect();
        if input_ids.is_empty() {
            return Err(Error::InvalidGraph("graph has no Input node".into()));
        }
        let mut consumed = vec![false; nodes.len()];
        for n in &nodes {
            for i in &n.inputs {
                consumed[index[i]] = true;
            }
        }
        let output_ids = order
            .iter()
            .filter(|&&i| !consumed[i] && !matches!(nodes[i].kind, LayerKind::Input { .. }))
            .map(|&i| nodes[i].id.clone())
            .collect();

        let mut graph = Self {
            nodes,
            index,
            order,
            input_ids,
            output_ids,
            shapes: Vec::new(),
        };
        graph.shapes = graph.infer_shapes()?;
        Ok(graph)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Result<&LayerNode> {
        self.index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Nodes in evaluation order.
    pub fn topo(&self) -> impl Iterator<Item = &LayerNode> {
        self.order.iter().map(move |&i| &self.nodes[i])
    }

    pub fn input_ids(&self) -> &[String] {
        &self.input_ids
    }

    /// Nodes nobody consumes, in evaluation order.
    pub fn output_ids(&self) -> &[String] {
        &self.output_ids
    }

    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        self.input_ids
            .iter()
            .map(|id| match &self.node(id).unwrap().kind {
                LayerKind::Input { shape } => shape.clone(),
                _ => unreachable!(),
            })
            .collect()
    }

    pub fn shape_of(&self, id: &str) -> Result<&[usize]> {
        let i = self
            .position(id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))?;
        Ok(&self.shapes[i])
    }

    pub fn consumers(&self, id: &str) -> Vec<&LayerNode> {
        self.topo()
            .filter(|n| n.inputs.iter().any(|i| i == id))
            .collect()
    }

    pub fn has_relu(&self) -> bool {
        self.nodes.iter().any(|n| n.kind == LayerKind::Relu)
    }

    /// True when every nonlinearity is a ReLU (a "ReLU network").
    pub fn is_relu_network(&self) -> bool {
        self.has_relu()
            && !self.nodes.iter().any(|n| {
                n.kind.is_graded_unary() || matches!(n.kind, LayerKind::MatMul { .. } | LayerKind::ElemMul)
            })
    }

    /// Multiply-accumulate count of one forward pass, over fully connected,
    /// convolutional and matrix-product layers.
    pub fn macs(&self) -> u64 {
        let mut total = 0u64;
        for n in self.topo() {
            let out = &self.shapes[self.index[&n.id]];
            total += match &n.kind {
                LayerKind::Linear { weight, .. } => {
                    let numel: usize = out.iter().product();
                    (numel * weight.shape()[1]) as u64
                }
                LayerKind::Conv2d { weight, .. } => {
                    let numel: usize = out.iter().product();
                    let s = weight.shape();
                    (numel * s[1] * s[2] * s[3]) as u64
                }
                LayerKind::MatMul { transpose_b } => {
                    let a = self.shape_of(&n.inputs[0]).unwrap();
                    let b = self.shape_of(&n.inputs[1]).unwrap();
                    let r = if *transpose_b { b[0] } else { b[1] };
                    (a[0] * a[1] * r) as u64
                }
                LayerKind::ElemMul => out.iter().product::<usize>() as u64,
                _ => 0,
            };
        }
        total
    }

    fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let zeros: Vec<Tensor> = self
            .input_shapes()
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        let acts = self.forward(&zeros)?;
        Ok(self
            .nodes
            .iter()
            .map(|n| acts[&n.id].shape().to_vec())
            .collect())
    }
}

fn topo_order(nodes: &[LayerNode], index: &HashMap<String, usize>) -> Result<Vec<usize>> {
    // Kahn's algorithm, ties broken by declaration order so the result is stable
    let mut indeg = vec![0usize; nodes.len()];
    let mut succ = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for inp in &n.inputs {
            indeg[i] += 1;
            succ[index[inp]].push(i);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..nodes.len()).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &s in &succ[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|&i| indeg[i] > 0).unwrap();
        return Err(Error::Cycle(nodes[stuck].id.clone()));
    }
    Ok(order)
}
