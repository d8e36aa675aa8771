//! Threshold normalization: rescale weights so neuron layers have θ = 1.
//!
//! Each stream gets a scale `s` with `real = raw · s`. A kernel absorbs the
//! ratio of its input and output scales into its weights and picks its
//! output scale to match the threshold of the neuron it feeds. A neuron
//! keeps the scale of its input and divides its threshold by it, which is
//! exactly 1 when a kernel could absorb it. Graded units and outputs record
//! the scales they see.

use std::collections::HashMap;

use super::graph::{expand_per_channel, SnnGraph, SnnKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returns an equivalent graph whose neuron thresholds are 1 wherever a
/// kernel precedes the neuron (possibly through Flatten, AvgPool or Add).
///
/// Decoded outputs of the result, multiplied by each Output's recorded
/// scale, equal those of `snn`.
pub fn normalize_weights(snn: &SnnGraph) -> Result<SnnGraph> {
    let demand = demands(snn)?;
    let mut scale: HashMap<String, Tensor> = HashMap::new();
    let mut nodes = Vec::with_capacity(snn.nodes().len());
    for node in snn.nodes() {
        let shape = snn.shape_of(&node.id)?.to_vec();
        let wanted = demand.get(&node.id);
        let s_in: Vec<&Tensor> = node.inputs.iter().map(|i| &scale[i]).collect();
        let mut out = node.clone();
        let s_out = match &node.kind {
            SnnKind::Input { scale: own, .. } => {
                let s = match wanted {
                    Some(d) => d.clone(),
                    None => own.clone().unwrap_or_else(|| Tensor::full(&shape, 1.0)),
                };
                if let SnnKind::Input { scale: own, .. } = &mut out.kind {
                    *own = if s.data().iter().all(|&v| v == 1.0) { None } else { Some(s.clone()) };
                }
                s
            }
            SnnKind::DiffNeuron { thetas, .. } => {
                // θ / s_in is 1 whenever a kernel upstream could absorb θ
                let ratio = expand_per_channel(thetas, &shape).zip_map(s_in[0], |a, b| a / b)?;
                let relative = match uniform(&node.id, &ratio) {
                    Ok(v) if thetas.len() == 1 => vec![v],
                    _ if shape.len() == 3 => channel_profile(&node.id, &ratio)?,
                    other => vec![other?],
                };
                if let SnnKind::DiffNeuron { thetas, .. } = &mut out.kind {
                    *thetas = relative;
                }
                out.init = node.init.as_ref().map(|i| i.zip_map(s_in[0], |a, b| a / b)).transpose()?;
                s_in[0].clone()
            }
            SnnKind::LinearKernel { weight } => {
                let s = free_scale(wanted, &shape);
                let (fi, fo) = (last_axis_profile(&node.id, s_in[0])?, last_axis_profile(&node.id, &s)?);
                let (o_n, i_n) = (weight.shape()[0], weight.shape()[1]);
                let data = (0..o_n * i_n)
                    .map(|k| weight.data()[k] * fi[k % i_n] / fo[k / i_n])
                    .collect();
                out.kind = SnnKind::LinearKernel {
                    weight: Tensor::new(weight.shape().to_vec(), data)?,
                };
                s
            }
            SnnKind::ConvKernel { weight, stride, padding } => {
                let s = free_scale(wanted, &shape);
                let (fi, fo) = (channel_profile(&node.id, s_in[0])?, channel_profile(&node.id, &s)?);
                let ws = weight.shape();
                let per_out = ws[1] * ws[2] * ws[3];
                let per_in = ws[2] * ws[3];
                let data = (0..weight.len())
                    .map(|k| weight.data()[k] * fi[(k % per_out) / per_in] / fo[k / per_out])
                    .collect();
                out.kind = SnnKind::ConvKernel {
                    weight: Tensor::new(ws.to_vec(), data)?,
                    stride: *stride,
                    padding: *padding,
                };
                s
            }
            SnnKind::AvgPool { .. } => {
                let per_channel = channel_profile(&node.id, s_in[0])?;
                expand_per_channel(&per_channel, &shape)
            }
            SnnKind::Flatten => s_in[0].flatten(),
            SnnKind::Add => {
                require_equal(&node.id, s_in[0], s_in[1])?;
                s_in[0].clone()
            }
            SnnKind::UnaryGraded { func, in_scale, out_scale } => {
                let si = uniform(&node.id, s_in[0])? * in_scale;
                let so = match wanted {
                    Some(d) => uniform(&node.id, d)?,
                    None => *out_scale,
                };
                out.kind = SnnKind::UnaryGraded {
                    func: func.clone(),
                    in_scale: si,
                    out_scale: so,
                };
                out.init = node.init.as_ref().map(|i| i.scale(in_scale / si));
                Tensor::full(&shape, so)
            }
            SnnKind::BinaryGraded { op, in_scales, out_scale } => {
                let sa = uniform(&node.id, s_in[0])? * in_scales[0];
                let sb = uniform(&node.id, s_in[1])? * in_scales[1];
                let so = match wanted {
                    Some(d) => uniform(&node.id, d)?,
                    None => *out_scale,
                };
                out.kind = SnnKind::BinaryGraded {
                    op: *op,
                    in_scales: [sa, sb],
                    out_scale: so,
                };
                Tensor::full(&shape, so)
            }
            SnnKind::Output { scale: own } => {
                let s = match own {
                    Some(o) => s_in[0].mul(o)?,
                    None => s_in[0].clone(),
                };
                out.init = node.init.as_ref().map(|i| i.zip_map(s_in[0], |a, b| a / b)).transpose()?;
                if let SnnKind::Output { scale } = &mut out.kind {
                    *scale = if s.data().iter().all(|&v| v == 1.0) { None } else { Some(s.clone()) };
                }
                s
            }
        };
        scale.insert(node.id.clone(), s_out);
        nodes.push(out);
    }
    SnnGraph::new(nodes, snn.mode())
}

/// Scale each node's consumers require of its output, propagated backwards
/// through scale-transparent nodes. Conflicting requirements cancel out.
fn demands(snn: &SnnGraph) -> Result<HashMap<String, Tensor>> {
    fn put(demand: &mut HashMap<String, Option<Tensor>>, id: &str, d: Tensor) {
        let entry = demand.entry(id.to_string()).or_insert_with(|| Some(d.clone()));
        if entry.as_ref().is_some_and(|prev| require_equal(id, prev, &d).is_err()) {
            *entry = None;
        }
    }

    let mut demand: HashMap<String, Option<Tensor>> = HashMap::new();
    for node in snn.nodes().iter().rev() {
        let own = demand.get(&node.id).cloned().flatten();
        match (&node.kind, own) {
            (SnnKind::DiffNeuron { .. }, _) => put(&mut demand, &node.inputs[0], snn.expanded_thetas(&node.id)?),
            (SnnKind::Add, Some(d)) => {
                put(&mut demand, &node.inputs[0], d.clone());
                put(&mut demand, &node.inputs[1], d);
            }
            (SnnKind::Flatten, Some(d)) => {
                let shape = snn.shape_of(&node.inputs[0])?;
                put(&mut demand, &node.inputs[0], d.reshape(shape)?);
            }
            (SnnKind::AvgPool { .. }, Some(d)) => {
                if let Ok(per_channel) = channel_profile(&node.id, &d) {
                    let shape = snn.shape_of(&node.inputs[0])?;
                    put(&mut demand, &node.inputs[0], expand_per_channel(&per_channel, shape));
                }
            }
            _ => {}
        }
    }
    Ok(demand.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect())
}

fn free_scale(wanted: Option<&Tensor>, shape: &[usize]) -> Tensor {
    wanted.cloned().unwrap_or_else(|| Tensor::full(shape, 1.0))
}

fn mismatch(id: &str) -> Error {
    Error::InvalidGraph(format!(
        "cannot normalize: streams meeting at `{id}` need incompatible threshold scales"
    ))
}

fn require_equal(id: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    let close = a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()));
    if close {
        Ok(())
    } else {
        Err(mismatch(id))
    }
}

fn uniform(id: &str, s: &Tensor) -> Result<f64> {
    let v = s.data()[0];
    if s.data().iter().all(|&x| x == v) {
        Ok(v)
    } else {
        Err(Error::InvalidGraph(format!(
            "cannot normalize: `{id}` needs a single scale per operand"
        )))
    }
}

/// Scale per position of the last axis; must not vary along leading axes.
fn last_axis_profile(id: &str, s: &Tensor) -> Result<Vec<f64>> {
    let d = *s.shape().last().unwrap_or(&1);
    let row = s.data()[..d].to_vec();
    if s.data().chunks(d).all(|r| r == row.as_slice()) {
        Ok(row)
    } else {
        Err(mismatch(id))
    }
}

/// Scale per leading-axis channel of a `[C, H, W]` stream.
fn channel_profile(id: &str, s: &Tensor) -> Result<Vec<f64>> {
    let c = s.shape()[0];
    let per = s.len() / c.max(1);
    let values: Vec<f64> = (0..c).map(|k| s.data()[k * per]).collect();
    let flat = s.data().chunks(per.max(1)).zip(&values).all(|(chunk, &v)| chunk.iter().all(|&x| x == v));
    if flat {
        Ok(values)
    } else {
        Err(mismatch(id))
    }
}
