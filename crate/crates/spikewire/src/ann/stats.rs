//! Activation statistics gathered by running the source network over a
//! dataset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{AnnGraph, LayerKind};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

/// Lower bound applied to every finalized standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Smallest threshold the percentile path will emit; keeps dead insertion
/// points from producing a zero ladder.
pub const THRESHOLD_FLOOR: f64 = 1e-6;

/// One input sample: one tensor per graph Input, in declaration order.
pub type Sample = Vec<Tensor>;

/// Per-channel Gaussian fit (population variance).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: u64,
}

impl GaussianStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// How activations at one point are grouped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    #[default]
    PerTensor,
    /// Axis 0 of a `[C, H, W]` activation.
    PerChannel,
}

impl Granularity {
    /// Channel-wise for convolutional feature maps, per-tensor otherwise.
    pub fn for_shape(shape: &[usize]) -> Self {
        if shape.len() == 3 {
            Granularity::PerChannel
        } else {
            Granularity::PerTensor
        }
    }

    pub fn channels(self, shape: &[usize]) -> usize {
        match self {
            Granularity::PerChannel if shape.len() == 3 => shape[0],
            _ => 1,
        }
    }

    /// Channel of flat element `i` in a tensor of `shape`.
    pub fn channel_of(self, shape: &[usize], i: usize) -> usize {
        match self {
            Granularity::PerChannel if shape.len() == 3 => i / (shape[1] * shape[2]),
            _ => 0,
        }
    }
}

/// Single-pass mean/variance accumulator that merges associatively.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentAccumulator {
    count: Vec<u64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            count: vec![0; channels],
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn push(&mut self, channel: usize, x: f64) {
        self.count[channel] += 1;
        let n = self.count[channel] as f64;
        let delta = x - self.mean[channel];
        self.mean[channel] += delta / n;
        self.m2[channel] += delta * (x - self.mean[channel]);
    }

    pub fn push_tensor(&mut self, x: &Tensor, granularity: Granularity) {
        for (i, &v) in x.data().iter().enumerate() {
            self.push(granularity.channel_of(x.shape(), i), v);
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        for c in 0..self.count.len() {
            let (na, nb) = (self.count[c], other.count[c]);
            if nb == 0 {
                continue;
            }
            if na == 0 {
                self.count[c] = nb;
                self.mean[c] = other.mean[c];
                self.m2[c] = other.m2[c];
                continue;
            }
            let n = (na + nb) as f64;
            let delta = other.mean[c] - self.mean[c];
            self.mean[c] += delta * nb as f64 / n;
            self.m2[c] += other.m2[c] + delta * delta * na as f64 * nb as f64 / n;
            self.count[c] = na + nb;
        }
    }

    pub fn finalize(&self) -> Result<GaussianStats> {
        if self.count.contains(&0) {
            return Err(Error::EmptyDataset);
        }
        let std = self
            .m2
            .iter()
            .zip(&self.count)
            .map(|(m2, &n)| (m2 / n as f64).sqrt().max(SIGMA_FLOOR))
            .collect();
        Ok(GaussianStats {
            mean: self.mean.clone(),
            std,
            count: self.count.iter().copied().max().unwrap_or(0),
        })
    }
}

/// Mean and standard deviation of the tensor feeding every ReLU, per channel
/// for feature maps and per tensor otherwise.
pub fn collect_relu_stats(
    graph: &AnnGraph,
    dataset: &[Sample],
    exec: Execution,
) -> Result<BTreeMap<String, GaussianStats>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let relus: Vec<(String, String, Granularity, usize)> = graph
        .topo()
        .filter(|n| n.kind == LayerKind::Relu)
        .map(|n| {
            let shape = graph.shape_of(&n.inputs[0]).unwrap();
            let g = Granularity::for_shape(shape);
            (n.id.clone(), n.inputs[0].clone(), g, g.channels(shape))
        })
        .collect();

    let partials = par::try_map(exec, dataset, |sample| {
        let acts = graph.forward(sample)?;
        Ok::<_, Error>(
            relus
                .iter()
                .map(|(_, src, g, ch)| {
                    let mut acc = MomentAccumulator::new(*ch);
                    acc.push_tensor(&acts[src], *g);
                    acc
                })
                .collect::<Vec<_>>(),
        )
    })?;

    let mut out = BTreeMap::new();
    for (k, (id, _, _, ch)) in relus.iter().enumerate() {
        let mut acc = MomentAccumulator::new(*ch);
        for p in &partials {
            acc.merge(&p[k]);
        }
        out.insert(id.clone(), acc.finalize()?);
    }
    Ok(out)
}

/// Linear-interpolated `p`-quantile of `values` (sorted in place).
pub fn quantile(values: &mut [f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let h = (values.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    Some(values[lo] + (h - lo as f64) * (values[hi] - values[lo]))
}

/// `c` times the `p`-quantile of absolute activations observed at each
/// listed node's output. Returns one value per channel (a single value for
/// per-tensor granularity).
pub fn percentile_thresholds(
    graph: &AnnGraph,
    dataset: &[Sample],
    points: &[String],
    p: f64,
    c: f64,
    granularity: Granularity,
    exec: Execution,
) -> Result<BTreeMap<String, Vec<f64>>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParam(format!("percentile p = {p} must lie in (0, 1)")));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidParam(format!("scale c = {c} must be positive")));
    }
    let layout: Vec<(Vec<usize>, usize)> = points
        .iter()
        .map(|id| {
            let shape = graph.shape_of(id)?.to_vec();
            let ch = granularity.channels(&shape);
            Ok((shape, ch))
        })
        .collect::<Result<_>>()?;

    let per_sample = par::try_map(exec, dataset, |sample| {
        let acts = graph.forward(sample)?;
        Ok::<_, Error>(
            points
                .iter()
                .zip(&layout)
                .map(|(id, (shape, ch))| {
                    let mut buckets = vec![Vec::new(); *ch];
                    for (i, v) in acts[id].data().iter().enumerate() {
                        buckets[granularity.channel_of(shape, i)].push(v.abs());
                    }
                    buckets
                })
                .collect::<Vec<_>>(),
        )
    })?;

    let mut out = BTreeMap::new();
    for (k, id) in points.iter().enumerate() {
        let ch = layout[k].1;
        let mut thresholds = Vec::with_capacity(ch);
        for channel in 0..ch {
            let mut values: Vec<f64> = per_sample
                .iter()
                .flat_map(|s| s[k][channel].iter().copied())
                .collect();
            let q = quantile(&mut values, p).ok_or(Error::EmptyDataset)?;
            thresholds.push((c * q).max(THRESHOLD_FLOOR));
        }
        out.insert(id.clone(), thresholds);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::graph::LayerNode;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn relu_graph(width: usize) -> AnnGraph {
        AnnGraph::new(vec![
            LayerNode::new("x", LayerKind::Input { shape: vec![width] }, &[]),
            LayerNode::new("r", LayerKind::Relu, &["x"]),
        ])
        .unwrap()
    }

    fn samples(values: &[f64]) -> Vec<Sample> {
        values.iter().map(|&v| vec![Tensor::scalar(v)]).collect()
    }

    #[test]
    fn constant_dataset_hits_sigma_floor() {
        let stats = collect_relu_stats(&relu_graph(1), &samples(&[2.5; 10]), Execution::Sequential).unwrap();
        assert_eq!(stats["r"].mean, vec![2.5]);
        assert_eq!(stats["r"].std, vec![SIGMA_FLOOR]);
    }

    #[test]
    fn population_variance_convention() {
        let stats = collect_relu_stats(&relu_graph(1), &samples(&[0.0, 2.0]), Execution::Sequential).unwrap();
        assert_eq!(stats["r"].mean, vec![1.0]);
        assert_eq!(stats["r"].std, vec![1.0]);
        assert_eq!(stats["r"].count, 2);
    }

    #[test]
    fn standard_normal_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let stats = collect_relu_stats(&relu_graph(1), &samples(&xs), Execution::Parallel).unwrap();
        assert!(stats["r"].mean[0].abs() < 0.05);
        assert!((stats["r"].std[0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn conv_maps_are_per_channel() {
        let g = AnnGraph::new(vec![
            LayerNode::new("x", LayerKind::Input { shape: vec![2, 1, 2] }, &[]),
            LayerNode::new("r", LayerKind::Relu, &["x"]),
        ])
        .unwrap();
        let data = vec![vec![Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, -5.0, -5.0]).unwrap()]];
        let stats = collect_relu_stats(&g, &data, Execution::Sequential).unwrap();
        assert_eq!(stats["r"].mean, vec![2.0, -5.0]);
        assert_eq!(stats["r"].std, vec![1.0, SIGMA_FLOOR]);
    }

    #[test]
    fn empty_dataset_errors() {
        assert!(matches!(
            collect_relu_stats(&relu_graph(1), &[], Execution::Sequential),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            percentile_thresholds(&relu_graph(1), &[], &["x".into()], 0.5, 1.0, Granularity::PerTensor, Execution::Sequential),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn percentile_single_value() {
        let th = percentile_thresholds(
            &relu_graph(1),
            &samples(&[-0.8]),
            &["x".into()],
            0.999,
            4.0,
            Granularity::PerTensor,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(th["x"], vec![3.2]);
    }

    #[test]
    fn percentile_of_uniform_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Uniform::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..20_000).map(|_| u.sample(&mut rng)).collect();
        let th = percentile_thresholds(
            &relu_graph(1),
            &samples(&xs),
            &["x".into()],
            0.5,
            1.0,
            Granularity::PerTensor,
            Execution::Parallel,
        )
        .unwrap();
        assert!((th["x"][0] - 0.5).abs() < 0.02);
    }

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        (mean, var)
    }

    proptest! {
        #[test]
        fn streaming_matches_two_pass(
            xs in prop::collection::vec(-1e3f64..1e3, 1..200),
            split in 0usize..200,
        ) {
            let split = split.min(xs.len());
            let mut a = MomentAccumulator::new(1);
            let mut b = MomentAccumulator::new(1);
            xs[..split].iter().for_each(|&x| a.push(0, x));
            xs[split..].iter().for_each(|&x| b.push(0, x));
            a.merge(&b);
            let (mean, var) = two_pass(&xs);
            // relative to the data scale, since the mean itself may be ~0
            let scale = xs.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            prop_assert!((a.mean[0] - mean).abs() <= 1e-9 * scale);
            let got_var = a.m2[0] / xs.len() as f64;
            prop_assert!((got_var - var).abs() <= 1e-9 * scale * scale);
        }
    }
}
