use std::path::Path;

use super::graph::{Mode, Provenance, SnnGraph, SnnKind, SnnNode};
use crate::error::{Error, Result};
use crate::graded::{BinaryOp, GradedFn, LAYER_NORM_EPS};
use crate::manifest::{self, required, BlobReader, BlobWriter, Dtype, Manifest, NodeRecord, Params};

pub const SNN_SCHEMA: &str = "spikewire.snn/1";

impl SnnGraph {
    /// Serializes to a manifest and an f64 blob (lossless round trip).
    pub fn to_manifest(&self, weights_name: &str) -> Result<(Manifest, Vec<u8>)> {
        let mut blob = BlobWriter::new(Dtype::F64);
        let nodes = self
            .nodes()
            .iter()
            .map(|n| {
                let mut params = encode_params(&n.kind, &mut blob);
                params.init = blob.push_opt(n.init.as_ref());
                params.provenance = n.provenance.as_ref().map(serde_json::to_value).transpose()?;
                Ok(NodeRecord {
                    id: n.id.clone(),
                    kind: n.kind.name().to_string(),
                    params,
                    inputs: n.inputs.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Manifest {
                schema: SNN_SCHEMA.into(),
                weights: weights_name.into(),
                mode: Some(self.mode().name().into()),
                nodes,
            },
            blob.into_bytes(),
        ))
    }

    pub fn from_manifest(m: &Manifest, blob: &BlobReader) -> Result<Self> {
        if m.schema != SNN_SCHEMA {
            return Err(Error::Format(format!(
                "expected schema `{SNN_SCHEMA}`, found `{}`",
                m.schema
            )));
        }
        let mode: Mode = m.mode.as_deref().unwrap_or("differential").parse()?;
        let nodes = m
            .nodes
            .iter()
            .map(|r| {
                let provenance: Option<Provenance> = r
                    .params
                    .provenance
                    .clone()
                    .map(serde_json::from_value)
                    .transpose()?;
                Ok(SnnNode {
                    id: r.id.clone(),
                    kind: decode_params(r, blob)?,
                    inputs: r.inputs.clone(),
                    init: blob.get_opt(r.params.init.as_ref())?,
                    provenance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SnnGraph::new(nodes, mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_path = manifest::blob_path_for(path);
        let name = blob_path.file_name().unwrap().to_string_lossy().into_owned();
        let (m, blob) = self.to_manifest(&name)?;
        manifest::write(path, &m, blob)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, blob) = manifest::read(path)?;
        Self::from_manifest(&m, &blob)
    }
}

fn encode_params(kind: &SnnKind, blob: &mut BlobWriter) -> Params {
    let mut p = Params::default();
    match kind {
        SnnKind::Input { shape, scale } => {
            p.shape = Some(shape.clone());
            p.scales = blob.push_opt(scale.as_ref());
        }
        SnnKind::LinearKernel { weight } => p.weight = Some(blob.push(weight)),
        SnnKind::ConvKernel { weight, stride, padding } => {
            p.weight = Some(blob.push(weight));
            p.stride = Some(*stride);
            p.padding = Some(*padding);
        }
        SnnKind::AvgPool { kernel, stride } => {
            p.kernel = Some(*kernel);
            p.stride = Some(*stride);
        }
        SnnKind::DiffNeuron { thetas, n, rectify } => {
            p.thetas = Some(thetas.clone());
            p.n = Some(*n);
            p.rectify = Some(*rectify);
        }
        SnnKind::UnaryGraded { func, in_scale, out_scale } => {
            p.func = Some(func.name().to_string());
            p.in_scales = Some(vec![*in_scale]);
            p.scale = Some(*out_scale);
            match func {
                GradedFn::MaxPool { kernel, stride } => {
                    p.kernel = Some(*kernel);
                    p.stride = Some(*stride);
                }
                GradedFn::LayerNorm { gamma, beta, eps } => {
                    p.gamma = blob.push_opt(gamma.as_ref());
                    p.beta = blob.push_opt(beta.as_ref());
                    p.eps = Some(*eps);
                }
                GradedFn::Softmax { axis } => p.axis = Some(*axis),
                _ => {}
            }
        }
        SnnKind::BinaryGraded { op, in_scales, out_scale } => {
            p.op = Some(op.name().to_string());
            p.in_scales = Some(in_scales.to_vec());
            p.scale = Some(*out_scale);
        }
        SnnKind::Add | SnnKind::Flatten => {}
        SnnKind::Output { scale } => p.scales = blob.push_opt(scale.as_ref()),
    }
    p
}

fn decode_params(r: &NodeRecord, blob: &BlobReader) -> Result<SnnKind> {
    let p = &r.params;
    let id = r.id.as_str();
    Ok(match r.kind.as_str() {
        "Input" => SnnKind::Input {
            shape: required(&p.shape, id, "shape")?.clone(),
            scale: blob.get_opt(p.scales.as_ref())?,
        },
        "LinearKernel" => SnnKind::LinearKernel {
            weight: blob.get(required(&p.weight, id, "weight")?)?,
        },
        "ConvKernel" => SnnKind::ConvKernel {
            weight: blob.get(required(&p.weight, id, "weight")?)?,
            stride: p.stride.unwrap_or([1, 1]),
            padding: p.padding.unwrap_or([0, 0]),
        },
        "AvgPool" => SnnKind::AvgPool {
            kernel: *required(&p.kernel, id, "kernel")?,
            stride: p.stride.or(p.kernel).unwrap(),
        },
        "DiffNeuron" => SnnKind::DiffNeuron {
            thetas: required(&p.thetas, id, "thetas")?.clone(),
            n: *required(&p.n, id, "n")?,
            rectify: p.rectify.unwrap_or(false),
        },
        "UnaryGraded" => {
            let func = match required(&p.func, id, "func")?.as_str() {
                "Identity" => GradedFn::Identity,
                "ReLU" => GradedFn::Relu,
                "GeLU" => GradedFn::Gelu,
                "SiLU" => GradedFn::Silu,
                "MaxPool" => GradedFn::MaxPool {
                    kernel: *required(&p.kernel, id, "kernel")?,
                    stride: p.stride.or(p.kernel).unwrap(),
                },
                "LayerNorm" => GradedFn::LayerNorm {
                    gamma: blob.get_opt(p.gamma.as_ref())?,
                    beta: blob.get_opt(p.beta.as_ref())?,
                    eps: p.eps.unwrap_or(LAYER_NORM_EPS),
                },
                "Softmax" => GradedFn::Softmax {
                    axis: p.axis.unwrap_or(-1),
                },
                other => {
                    return Err(Error::Unsupported {
                        id: id.to_string(),
                        kind: format!("UnaryGraded({other})"),
                    })
                }
            };
            SnnKind::UnaryGraded {
                func,
                in_scale: p.in_scales.as_ref().and_then(|s| s.first().copied()).unwrap_or(1.0),
                out_scale: p.scale.unwrap_or(1.0),
            }
        }
        "BinaryGraded" => {
            let s = p.in_scales.clone().unwrap_or_else(|| vec![1.0, 1.0]);
            if s.len() != 2 {
                return Err(Error::Format(format!("`{id}` needs two input scales")));
            }
            SnnKind::BinaryGraded {
                op: BinaryOp::from_name(required(&p.op, id, "op")?)?,
                in_scales: [s[0], s[1]],
                out_scale: p.scale.unwrap_or(1.0),
            }
        }
        "Add" => SnnKind::Add,
        "Flatten" => SnnKind::Flatten,
        "Output" => SnnKind::Output {
            scale: blob.get_opt(p.scales.as_ref())?,
        },
        other => {
            return Err(Error::Unsupported {
                id: id.to_string(),
                kind: other.to_string(),
            })
        }
    })
}
