//! Bundled toy models, synthetic datasets and dataset file IO.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ann::{AnnGraph, LayerKind, LayerNode, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// He-initialized linear layer with small random biases.
fn linear(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> LayerKind {
    LayerKind::Linear {
        weight: gaussian(&[fan_out, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
        bias: Some(gaussian(&[fan_out], 0.1, rng)),
    }
}

fn conv(c_in: usize, c_out: usize, k: usize, padding: usize, rng: &mut impl Rng) -> LayerKind {
    LayerKind::Conv2d {
        weight: gaussian(&[c_out, c_in, k, k], (2.0 / (c_in * k * k) as f64).sqrt(), rng),
        bias: Some(gaussian(&[c_out], 0.1, rng)),
        stride: [1, 1],
        padding: [padding, padding],
    }
}

/// ReLU MLP with the given layer widths; the last layer has no activation.
pub fn random_mlp(sizes: &[usize], seed: u64) -> Result<AnnGraph> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidParam("an MLP needs at least two non-zero widths".into()));
    }
    let mut rng = rng(seed);
    let mut nodes = vec![LayerNode::new("x", LayerKind::Input { shape: vec![sizes[0]] }, &[])];
    let mut prev = "x".to_string();
    let layers = sizes.len() - 1;
    for (l, w) in sizes.windows(2).enumerate() {
        let fc = format!("fc{}", l + 1);
        nodes.push(LayerNode::new(&fc, linear(w[0], w[1], &mut rng), &[&prev]));
        prev = fc;
        if l + 1 < layers {
            let act = format!("relu{}", l + 1);
            nodes.push(LayerNode::new(&act, LayerKind::Relu, &[&prev]));
            prev = act;
        }
    }
    AnnGraph::new(nodes)
}

/// Two conv blocks and a linear head over a `[1, 8, 8]` image.
pub fn tiny_cnn(seed: u64) -> Result<AnnGraph> {
    let mut rng = rng(seed);
    let nodes = vec![
        LayerNode::new("x", LayerKind::Input { shape: vec![1, 8, 8] }, &[]),
        LayerNode::new("conv1", conv(1, 4, 3, 1, &mut rng), &["x"]),
        LayerNode::new("relu1", LayerKind::Relu, &["conv1"]),
        LayerNode::new(
            "pool1",
            LayerKind::AvgPool {
                kernel: [2, 2],
                stride: [2, 2],
            },
            &["relu1"],
        ),
        LayerNode::new("conv2", conv(4, 8, 3, 0, &mut rng), &["pool1"]),
        LayerNode::new("relu2", LayerKind::Relu, &["conv2"]),
        LayerNode::new("flat", LayerKind::Flatten, &["relu2"]),
        LayerNode::new("fc", linear(8 * 2 * 2, 4, &mut rng), &["flat"]),
    ];
    AnnGraph::new(nodes)
}

/// Single-head self-attention over a `[seq, dim]` input with an output
/// projection. The `1/√dim` score scale is folded into the query weights.
pub fn attention_head(dim: usize, seq: usize, seed: u64) -> Result<AnnGraph> {
    if dim == 0 || seq == 0 {
        return Err(Error::InvalidParam("attention needs non-zero dim and seq".into()));
    }
    let mut rng = rng(seed);
    let std = (1.0 / dim as f64).sqrt();
    let proj = |rng: &mut ChaCha8Rng, k: f64| LayerKind::Linear {
        weight: gaussian(&[dim, dim], std * k, rng),
        bias: Some(gaussian(&[dim], 0.1, rng)),
    };
    let q = proj(&mut rng, 1.0 / (dim as f64).sqrt());
    let k = proj(&mut rng, 1.0);
    let v = proj(&mut rng, 1.0);
    let o = proj(&mut rng, 1.0);
    let nodes = vec![
        LayerNode::new("x", LayerKind::Input { shape: vec![seq, dim] }, &[]),
        LayerNode::new("q", q, &["x"]),
        LayerNode::new("k", k, &["x"]),
        LayerNode::new("v", v, &["x"]),
        LayerNode::new("scores", LayerKind::MatMul { transpose_b: true }, &["q", "k"]),
        LayerNode::new("attn", LayerKind::Softmax { axis: -1 }, &["scores"]),
        LayerNode::new("ctx", LayerKind::MatMul { transpose_b: false }, &["attn", "v"]),
        LayerNode::new("proj", o, &["ctx"]),
    ];
    AnnGraph::new(nodes)
}

/// `count` samples with i.i.d. `N(mean, std²)` entries, one tensor per input.
pub fn gaussian_dataset(shapes: &[Vec<usize>], count: usize, mean: f64, std: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(std >= 0.0) || !mean.is_finite() {
        return Err(Error::InvalidParam(format!("bad Gaussian N({mean}, {std}²)")));
    }
    let mut rng = rng(seed);
    let normal = Normal::new(mean, std).map_err(|e| Error::InvalidParam(e.to_string()))?;
    Ok((0..count)
        .map(|_| {
            shapes
                .iter()
                .map(|s| {
                    let len = s.iter().product();
                    Tensor::new(s.clone(), (0..len).map(|_| normal.sample(&mut rng)).collect()).unwrap()
                })
                .collect()
        })
        .collect())
}

fn single_input(shapes: &[Vec<usize>]) -> Result<&[usize]> {
    match shapes {
        [s] => Ok(s),
        _ => Err(Error::InvalidParam(format!(
            "dataset files hold single-input samples, the model has {} inputs",
            shapes.len()
        ))),
    }
}

/// Reads a dataset: a CSV file with one flattened sample per row, or a
/// directory of raw little-endian f32 files (one sample each, name order).
pub fn load_dataset(path: &Path, shapes: &[Vec<usize>]) -> Result<Vec<Sample>> {
    let shape = single_input(shapes)?;
    let len: usize = shape.iter().product();
    let rows: Vec<Vec<f64>> = if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        files
            .iter()
            .map(|f| {
                let bytes = fs::read(f)?;
                if bytes.len() % 4 != 0 {
                    return Err(Error::Format(format!("{} is not a whole number of f32 values", f.display())));
                }
                Ok(bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect())
            })
            .collect::<Result<_>>()?
    } else {
        fs::read_to_string(path)?
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?
    };
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != len {
                return Err(Error::Shape(format!("sample {i} has {} values, expected {len}", r.len())));
            }
            Ok(vec![Tensor::new(shape.to_vec(), r)?])
        })
        .collect()
}

/// Writes single-input samples as CSV rows (round-trips through
/// [`load_dataset`] exactly).
pub fn save_dataset_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let [x] = s.as_slice() else {
            return Err(Error::InvalidParam("CSV datasets hold single-input samples".into()));
        };
        let row: Vec<String> = x.data().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_build_valid_graphs() {
        let mlp = random_mlp(&[16, 8, 4], 1).unwrap();
        assert!(mlp.is_relu_network());
        assert_eq!(mlp.shape_of("fc2").unwrap(), &[4]);
        assert_eq!(mlp.macs(), 16 * 8 + 8 * 4);
        let cnn = tiny_cnn(1).unwrap();
        assert_eq!(cnn.shape_of("fc").unwrap(), &[4]);
        let att = attention_head(4, 3, 1).unwrap();
        assert!(!att.has_relu());
        assert_eq!(att.shape_of("proj").unwrap(), &[3, 4]);
    }

    #[test]
    fn seeds_are_deterministic() {
        assert_eq!(random_mlp(&[3, 2], 9).unwrap().nodes(), random_mlp(&[3, 2], 9).unwrap().nodes());
        assert_ne!(random_mlp(&[3, 2], 9).unwrap().nodes(), random_mlp(&[3, 2], 10).unwrap().nodes());
        let a = gaussian_dataset(&[vec![5]], 3, 0.0, 1.0, 4).unwrap();
        assert_eq!(a, gaussian_dataset(&[vec![5]], 3, 0.0, 1.0, 4).unwrap());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let data = gaussian_dataset(&[vec![2, 3]], 4, 0.5, 2.0, 7).unwrap();
        save_dataset_csv(&path, &data).unwrap();
        assert_eq!(load_dataset(&path, &[vec![2, 3]]).unwrap(), data);
    }

    #[test]
    fn raw_f32_directory() {
        let dir = tempfile::tempdir().unwrap();
        for (name, vals) in [("b.bin", [3.0f32, 4.0]), ("a.bin", [1.0, 2.0])] {
            let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.path().join(name), bytes).unwrap();
        }
        let d = load_dataset(dir.path(), &[vec![2]]).unwrap();
        assert_eq!(d[0][0].data(), &[1.0, 2.0]);
        assert_eq!(d[1][0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn empty_and_ragged_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        fs::write(&path, "\n").unwrap();
        assert!(matches!(load_dataset(&path, &[vec![2]]), Err(Error::EmptyDataset)));
        fs::write(&path, "1,2\n3\n").unwrap();
        assert!(matches!(load_dataset(&path, &[vec![2]]), Err(Error::Shape(_))));
    }
}
