use std::collections::HashMap;

use super::graph::{AnnGraph, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Every node's activation, keyed by node id.
pub type Activations = HashMap<String, Tensor>;

impl AnnGraph {
    /// Evaluates the graph in topological order. `inputs` are matched to the
    /// Input nodes in declaration order.
    pub fn forward(&self, inputs: &[Tensor]) -> Result<Activations> {
        if inputs.len() != self.input_ids().len() {
            return Err(Error::Shape(format!(
                "graph declares {} inputs, got {}",
                self.input_ids().len(),
                inputs.len()
            )));
        }
        let mut acts: Activations = HashMap::with_capacity(self.nodes().len());
        let mut next_input = inputs.iter();
        for node in self.topo() {
            let args: Vec<&Tensor> = node.inputs.iter().map(|i| &acts[i]).collect();
            let out = match &node.kind {
                LayerKind::Input { shape } => {
                    let x = next_input.next().unwrap();
                    if x.shape() != shape.as_slice() {
                        return Err(Error::Shape(format!(
                            "input `{}` declared {:?}, got {:?}",
                            node.id,
                            shape,
                            x.shape()
                        )));
                    }
                    x.clone()
                }
                kind => eval_layer(kind, &args)?,
            };
            acts.insert(node.id.clone(), out);
        }
        Ok(acts)
    }

    /// Convenience wrapper returning only the graph outputs, in order.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut acts = self.forward(inputs)?;
        Ok(self
            .output_ids()
            .iter()
            .map(|id| acts.remove(id).unwrap())
            .collect())
    }
}

/// Applies one non-input layer to its evaluated arguments.
pub fn eval_layer(kind: &LayerKind, args: &[&Tensor]) -> Result<Tensor> {
    match kind {
        LayerKind::Input { .. } => Err(Error::InvalidGraph("Input has no arguments".into())),
        LayerKind::Linear { weight, bias } => tensor::linear(args[0], weight, bias.as_ref()),
        LayerKind::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => tensor::conv2d(args[0], weight, bias.as_ref(), *stride, *padding),
        LayerKind::Relu => Ok(args[0].map(tensor::relu)),
        LayerKind::Gelu => Ok(args[0].map(tensor::gelu)),
        LayerKind::Silu => Ok(args[0].map(tensor::silu)),
        LayerKind::MaxPool { kernel, stride } => tensor::max_pool2d(args[0], *kernel, *stride),
        LayerKind::AvgPool { kernel, stride } => tensor::avg_pool2d(args[0], *kernel, *stride),
        LayerKind::LayerNorm { gamma, beta, eps } => {
            tensor::layer_norm(args[0], gamma.as_ref(), beta.as_ref(), *eps)
        }
        LayerKind::Softmax { axis } => tensor::softmax(args[0], *axis),
        LayerKind::MatMul { transpose_b } => {
            if *transpose_b {
                tensor::matmul(args[0], &args[1].transpose2d()?)
            } else {
                tensor::matmul(args[0], args[1])
            }
        }
        LayerKind::ElemMul => args[0].mul(args[1]),
        LayerKind::Add => args[0].add(args[1]),
        LayerKind::Flatten => Ok(args[0].flatten()),
    }
}
