use std::path::Path;

use super::graph::{AnnGraph, LayerKind, LayerNode};
use crate::error::{Error, Result};
use crate::manifest::{self, required, BlobReader, BlobWriter, Dtype, Manifest, NodeRecord, Params};

pub const ANN_SCHEMA: &str = "spikewire.ann/1";

impl AnnGraph {
    /// Serializes to a manifest and an f32 weight blob.
    pub fn to_manifest(&self, weights_name: &str) -> (Manifest, Vec<u8>) {
        let mut blob = BlobWriter::new(Dtype::F32);
        let nodes = self
            .nodes()
            .iter()
            .map(|n| NodeRecord {
                id: n.id.clone(),
                kind: n.kind.name().to_string(),
                params: encode_params(&n.kind, &mut blob),
                inputs: n.inputs.clone(),
            })
            .collect();
        (
            Manifest {
                schema: ANN_SCHEMA.into(),
                weights: weights_name.into(),
                mode: None,
                nodes,
            },
            blob.into_bytes(),
        )
    }

    pub fn from_manifest(m: &Manifest, blob: &BlobReader) -> Result<Self> {
        if m.schema != ANN_SCHEMA {
            return Err(Error::Format(format!(
                "expected schema `{ANN_SCHEMA}`, found `{}`",
                m.schema
            )));
        }
        let nodes = m
            .nodes
            .iter()
            .map(|r| {
                Ok(LayerNode {
                    id: r.id.clone(),
                    kind: decode_params(r, blob)?,
                    inputs: r.inputs.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        AnnGraph::new(nodes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_path = manifest::blob_path_for(path);
        let name = blob_path.file_name().unwrap().to_string_lossy().into_owned();
        let (m, blob) = self.to_manifest(&name);
        manifest::write(path, &m, blob)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, blob) = manifest::read(path)?;
        Self::from_manifest(&m, &blob)
    }
}

fn encode_params(kind: &LayerKind, blob: &mut BlobWriter) -> Params {
    let mut p = Params::default();
    match kind {
        LayerKind::Input { shape } => p.shape = Some(shape.clone()),
        LayerKind::Linear { weight, bias } => {
            p.weight = Some(blob.push(weight));
            p.bias = blob.push_opt(bias.as_ref());
        }
        LayerKind::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => {
            p.weight = Some(blob.push(weight));
            p.bias = blob.push_opt(bias.as_ref());
            p.stride = Some(*stride);
            p.padding = Some(*padding);
        }
        LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
            p.kernel = Some(*kernel);
            p.stride = Some(*stride);
        }
        LayerKind::LayerNorm { gamma, beta, eps } => {
            p.gamma = blob.push_opt(gamma.as_ref());
            p.beta = blob.push_opt(beta.as_ref());
            p.eps = Some(*eps);
        }
        LayerKind::Softmax { axis } => p.axis = Some(*axis),
        LayerKind::MatMul { transpose_b } => p.transpose_b = Some(*transpose_b),
        LayerKind::Relu | LayerKind::Gelu | LayerKind::Silu | LayerKind::ElemMul | LayerKind::Add | LayerKind::Flatten => {}
    }
    p
}

fn decode_params(r: &NodeRecord, blob: &BlobReader) -> Result<LayerKind> {
    let p = &r.params;
    let id = r.id.as_str();
    Ok(match r.kind.as_str() {
        "Input" => LayerKind::Input {
            shape: required(&p.shape, id, "shape")?.clone(),
        },
        "Linear" => LayerKind::Linear {
            weight: blob.get(required(&p.weight, id, "weight")?)?,
            bias: blob.get_opt(p.bias.as_ref())?,
        },
        "Conv2d" => LayerKind::Conv2d {
            weight: blob.get(required(&p.weight, id, "weight")?)?,
            bias: blob.get_opt(p.bias.as_ref())?,
            stride: p.stride.unwrap_or([1, 1]),
            padding: p.padding.unwrap_or([0, 0]),
        },
        "ReLU" => LayerKind::Relu,
        "GeLU" => LayerKind::Gelu,
        "SiLU" => LayerKind::Silu,
        "MaxPool" => LayerKind::MaxPool {
            kernel: *required(&p.kernel, id, "kernel")?,
            stride: p.stride.or(p.kernel).unwrap(),
        },
        "AvgPool" => LayerKind::AvgPool {
            kernel: *required(&p.kernel, id, "kernel")?,
            stride: p.stride.or(p.kernel).unwrap(),
        },
        "LayerNorm" => LayerKind::LayerNorm {
            gamma: blob.get_opt(p.gamma.as_ref())?,
            beta: blob.get_opt(p.beta.as_ref())?,
            eps: p.eps.unwrap_or(crate::graded::LAYER_NORM_EPS),
        },
        "Softmax" => LayerKind::Softmax {
            axis: p.axis.unwrap_or(-1),
        },
        "MatMul" => LayerKind::MatMul {
            transpose_b: p.transpose_b.unwrap_or(false),
        },
        "ElemMul" => LayerKind::ElemMul,
        "Add" => LayerKind::Add,
        "Flatten" => LayerKind::Flatten,
        other => {
            return Err(Error::Unsupported {
                id: id.to_string(),
                kind: other.to_string(),
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn manifest_round_trip_with_f32_weights() {
        let w = Tensor::new(vec![2, 3], vec![0.5, -0.25, 1.0, 2.0, 0.125, -4.0]).unwrap();
        let g = AnnGraph::new(vec![
            LayerNode::new("x", LayerKind::Input { shape: vec![3] }, &[]),
            LayerNode::new("fc", LayerKind::Linear { weight: w, bias: Some(Tensor::from_vec(vec![0.5, 0.75])) }, &["x"]),
            LayerNode::new("ln", LayerKind::LayerNorm { gamma: None, beta: None, eps: 1e-5 }, &["fc"]),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        g.save(&path).unwrap();
        let back = AnnGraph::load(&path).unwrap();
        assert_eq!(back.nodes(), g.nodes());

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"schema\": \"spikewire.ann/1\""));
        assert_eq!(std::fs::metadata(dir.path().join("model.bin")).unwrap().len(), 8 * 4);
    }

    #[test]
    fn unknown_kind_is_reported_by_name() {
        let m = Manifest {
            schema: ANN_SCHEMA.into(),
            weights: "w.bin".into(),
            mode: None,
            nodes: vec![NodeRecord {
                id: "q".into(),
                kind: "Dropout".into(),
                params: Params::default(),
                inputs: vec![],
            }],
        };
        match AnnGraph::from_manifest(&m, &BlobReader::new(vec![])) {
            Err(Error::Unsupported { kind, .. }) => assert_eq!(kind, "Dropout"),
            other => panic!("{other:?}"),
        }
    }
}
