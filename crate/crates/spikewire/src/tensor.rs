//! Dense row-major tensors with a fixed accumulation order.
//!
//! Every reduction in this module sums left to right over the reduced index,
//! so identical inputs give bit-identical outputs on every platform and thread
//! count. Traces and golden tests rely on that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn flatten(&self) -> Self {
        Self::from_vec(self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Resolves a possibly negative axis against this tensor's rank.
    pub fn resolve_axis(&self, axis: isize) -> Result<usize> {
        let rank = self.rank() as isize;
        let a = if axis < 0 { rank + axis } else { axis };
        if a < 0 || a >= rank {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for rank {rank}"
            )));
        }
        Ok(a as usize)
    }

    /// (outer, axis extent, inner) decomposition around `axis`.
    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected a matrix, got {s:?}"))),
        }
    }
}

/// Matrix product with left-to-right accumulation over the inner index.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner extents {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Fully connected map over the last axis: `y = x Wᵀ + b` with `W` shaped
/// `[out, in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (out_f, in_f) = weight.dims2()?;
    let last = *x
        .shape
        .last()
        .ok_or_else(|| Error::Shape("linear input has rank 0".into()))?;
    if last != in_f {
        return Err(Error::Shape(format!(
            "linear expects last extent {in_f}, got {last}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != out_f {
            return Err(Error::Shape(format!(
                "bias has {} values for {out_f} outputs",
                b.len()
            )));
        }
    }
    let rows = x.len() / in_f;
    let mut out = vec![0.0; rows * out_f];
    for r in 0..rows {
        let xr = &x.data[r * in_f..(r + 1) * in_f];
        for o in 0..out_f {
            let wr = &weight.data[o * in_f..(o + 1) * in_f];
            let mut acc = 0.0;
            for i in 0..in_f {
                acc += xr[i] * wr[i];
            }
            if let Some(b) = bias {
                acc += b.data[o];
            }
            out[r * out_f + o] = acc;
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new(shape, out)
}

pub fn conv2d_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<(usize, usize)> {
    if stride[0] == 0 || stride[1] == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let ph = h + 2 * pad[0];
    let pw = w + 2 * pad[1];
    if ph < kh || pw < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
        )));
    }
    Ok(((ph - kh) / stride[0] + 1, (pw - kw) / stride[1] + 1))
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape.as_slice() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Shape(format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Zero-padded cross-correlation of a `[C, H, W]` input with a
/// `[C_out, C, kh, kw]` kernel.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<Tensor> {
    conv2d_counted(x, weight, bias, stride, pad).map(|(t, _)| t)
}

/// As [`conv2d`], also returning the number of multiply terms whose input
/// element was non-zero (the event-driven accumulate count).
pub fn conv2d_counted(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<(Tensor, u64)> {
    let (c, h, w) = dims3(x)?;
    let (co, ci, kh, kw) = match weight.shape.as_slice() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => return Err(Error::Shape(format!("conv weight must be rank 4, got {s:?}"))),
    };
    if ci != c {
        return Err(Error::Shape(format!(
            "conv expects {ci} input channels, got {c}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != co {
            return Err(Error::Shape(format!(
                "conv bias has {} values for {co} channels",
                b.len()
            )));
        }
    }
    let (ho, wo) = conv2d_output_hw(h, w, kh, kw, stride, pad)?;
    let mut out = vec![0.0; co * ho * wo];
    let mut events = 0u64;
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride[0] + ky) as isize - pad[0] as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride[1] + kx) as isize - pad[1] as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv = x.data[(ic * h + iy as usize) * w + ix as usize];
                            if xv != 0.0 {
                                events += 1;
                            }
                            acc += xv * weight.data[((o * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b.data[o];
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Ok((Tensor::new(vec![co, ho, wo], out)?, events))
}

fn pool2d(
    x: &Tensor,
    kernel: [usize; 2],
    stride: [usize; 2],
    init: f64,
    fold: impl Fn(f64, f64) -> f64,
    finish: impl Fn(f64) -> f64,
) -> Result<Tensor> {
    let (c, h, w) = dims3(x)?;
    let (ho, wo) = conv2d_output_hw(h, w, kernel[0], kernel[1], stride, [0, 0])?;
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = init;
                for ky in 0..kernel[0] {
                    for kx in 0..kernel[1] {
                        let v = x.data[(ch * h + oy * stride[0] + ky) * w + ox * stride[1] + kx];
                        acc = fold(acc, v);
                    }
                }
                out[(ch * ho + oy) * wo + ox] = finish(acc);
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

pub fn max_pool2d(x: &Tensor, kernel: [usize; 2], stride: [usize; 2]) -> Result<Tensor> {
    pool2d(x, kernel, stride, f64::NEG_INFINITY, f64::max, |v| v)
}

pub fn avg_pool2d(x: &Tensor, kernel: [usize; 2], stride: [usize; 2]) -> Result<Tensor> {
    let area = (kernel[0] * kernel[1]) as f64;
    pool2d(x, kernel, stride, 0.0, |a, v| a + v, |a| a / area)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: isize) -> Result<Tensor> {
    let ax = x.resolve_axis(axis)?;
    let (outer, len, inner) = x.axis_split(ax);
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).fold(f64::NEG_INFINITY, |m, k| m.max(x.data[idx(k)]));
            let mut sum = 0.0;
            for k in 0..len {
                let e = (x.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[idx(k)] /= sum;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm(
    x: &Tensor,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f64,
) -> Result<Tensor> {
    let d = *x
        .shape
        .last()
        .ok_or_else(|| Error::Shape("layer norm on rank-0 tensor".into()))?;
    for p in [gamma, beta].into_iter().flatten() {
        if p.len() != d {
            return Err(Error::Shape(format!(
                "layer norm affine has {} values for width {d}",
                p.len()
            )));
        }
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d.max(1)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            let mut y = (*v - mean) * inv;
            if let Some(g) = gamma {
                y *= g.data[j];
            }
            if let Some(b) = beta {
                y += b.data[j];
            }
            *v = y;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Exact GeLU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + crate::special::erf(x / std::f64::consts::SQRT_2))
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = numel(shape);
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data[i * k + p] * b.data[p * n + j];
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&eye, &col).unwrap(), col);
        let row = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_loops_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(16, 16, 16), (1, 32, 5), (32, 3, 32), (7, 1, 9)] {
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 4, 5], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &w, None, [1, 1], [0, 0]).unwrap(), x);
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let (y, events) = conv2d_counted(&Tensor::zeros(&[2, 5, 5]), &w, None, [1, 1], [1, 1]).unwrap();
        assert!(y.is_zero());
        assert_eq!(events, 0);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let got = conv2d(&x, &w, None, [1, 1], [0, 0]).unwrap();
        assert_eq!(got.shape(), &[3, 3, 3]);
        for o in 0..3 {
            for y in 0..3 {
                for xx in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += x.data[(c * 5 + y + ky) * 5 + xx + kx]
                                    * w.data[((o * 2 + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    assert_eq!(got.data[(o * 3 + y) * 3 + xx], s);
                }
            }
        }
    }

    #[test]
    fn conv_padding_and_stride_shape() {
        let x = Tensor::full(&[1, 6, 6], 1.0);
        let w = Tensor::full(&[2, 1, 3, 3], 1.0);
        let (y, events) = conv2d_counted(&x, &w, None, [2, 2], [1, 1]).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        // corner output sees a 2x2 window of the input
        assert_eq!(y.data[0], 4.0);
        assert_eq!(events as f64, y.data.iter().sum::<f64>());
    }

    #[test]
    fn pools() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(max_pool2d(&x, [2, 2], [2, 2]).unwrap().data(), &[3.0]);
        assert_eq!(avg_pool2d(&x, [2, 2], [2, 2]).unwrap().data(), &[0.625]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_rows(&[vec![2.0, 0.0], vec![-1.0, 5.0]]).unwrap();
        let s = softmax(&x, -1).unwrap();
        assert!((s.data[0] - 0.8807970779778823).abs() < 1e-15);
        assert!((s.data[0] + s.data[1] - 1.0).abs() < 1e-15);
        let s0 = softmax(&x, 0).unwrap();
        assert!((s0.data[0] + s0.data[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_zero_variance_is_finite() {
        let x = Tensor::full(&[2, 4], 3.0);
        let y = layer_norm(&x, None, None, 1e-5).unwrap();
        assert!(y.is_zero());
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
