//! Graded units: stateful non-spiking replacements for nonlinear layers.
//!
//! A unary unit accumulates the decoded input in `m` and emits the scaled
//! change of `F(m)`, so the decoded output is `F` of the decoded input at
//! every step. A binary unit does the same for a bilinear product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Epsilon used inside LayerNorm when the model file does not give one.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum GradedFn {
    Identity,
    Relu,
    Gelu,
    Silu,
    MaxPool {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    LayerNorm {
        gamma: Option<Tensor>,
        beta: Option<Tensor>,
        eps: f64,
    },
    Softmax {
        axis: isize,
    },
}

impl GradedFn {
    pub fn name(&self) -> &'static str {
        match self {
            GradedFn::Identity => "Identity",
            GradedFn::Relu => "ReLU",
            GradedFn::Gelu => "GeLU",
            GradedFn::Silu => "SiLU",
            GradedFn::MaxPool { .. } => "MaxPool",
            GradedFn::LayerNorm { .. } => "LayerNorm",
            GradedFn::Softmax { .. } => "Softmax",
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            GradedFn::Identity => Ok(x.clone()),
            GradedFn::Relu => Ok(x.map(tensor::relu)),
            GradedFn::Gelu => Ok(x.map(tensor::gelu)),
            GradedFn::Silu => Ok(x.map(tensor::silu)),
            GradedFn::MaxPool { kernel, stride } => tensor::max_pool2d(x, *kernel, *stride),
            GradedFn::LayerNorm { gamma, beta, eps } => {
                tensor::layer_norm(x, gamma.as_ref(), beta.as_ref(), *eps)
            }
            GradedFn::Softmax { axis } => tensor::softmax(x, *axis),
        }
    }

    /// True when `F(s·x) = s·F(x)` for every `s > 0`.
    pub fn is_positively_homogeneous(&self) -> bool {
        matches!(self, GradedFn::Identity | GradedFn::Relu | GradedFn::MaxPool { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinaryOp {
    /// `A · B`, or `A · Bᵀ` when `transpose_b`.
    MatMul { transpose_b: bool },
    ElemMul,
}

impl BinaryOp {
    pub fn name(&self) -> &'static str {
        match self {
            BinaryOp::MatMul { transpose_b: false } => "matmul",
            BinaryOp::MatMul { transpose_b: true } => "matmul_t",
            BinaryOp::ElemMul => "elemmul",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "matmul" => Ok(BinaryOp::MatMul { transpose_b: false }),
            "matmul_t" => Ok(BinaryOp::MatMul { transpose_b: true }),
            "elemmul" => Ok(BinaryOp::ElemMul),
            _ => Err(Error::Format(format!("unknown binary op `{s}`"))),
        }
    }

    pub fn apply(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        match self {
            BinaryOp::MatMul { transpose_b: false } => tensor::matmul(a, b),
            BinaryOp::MatMul { transpose_b: true } => tensor::matmul(a, &b.transpose2d()?),
            BinaryOp::ElemMul => a.mul(b),
        }
    }

    /// Accumulates triggered by the non-zero entries of the two step inputs:
    /// each one is multiplied into every partner entry it meets.
    pub fn event_ops(&self, xa: &Tensor, xb: &Tensor) -> u64 {
        let (na, nb) = (xa.count_nonzero() as u64, xb.count_nonzero() as u64);
        match self {
            BinaryOp::MatMul { transpose_b } => {
                let p = xa.shape()[0] as u64;
                let r = if *transpose_b { xb.shape()[0] } else { xb.shape()[1] } as u64;
                na * r + nb * p
            }
            BinaryOp::ElemMul => na + nb,
        }
    }
}

/// Differential graded unit for a single-input nonlinearity.
///
/// Streams are carried in scaled units: the unit reads `x·in_scale` and
/// emits values in units of `out_scale`. Both default to 1.
#[derive(Clone, Debug)]
pub struct UnaryGradedState {
    /// Decoded input so far (plus the folded bias).
    pub m: Tensor,
    /// `F` at the previous step; zero before the first step.
    pub f_cache: Tensor,
    pub t: usize,
    func: GradedFn,
    in_scale: f64,
    out_scale: f64,
}

impl UnaryGradedState {
    pub fn new(func: GradedFn, init: Tensor) -> Result<Self> {
        Self::with_scales(func, init, 1.0, 1.0)
    }

    pub fn with_scales(func: GradedFn, init: Tensor, in_scale: f64, out_scale: f64) -> Result<Self> {
        if !(in_scale > 0.0 && out_scale > 0.0) {
            return Err(Error::InvalidParam("graded unit scales must be positive".into()));
        }
        let out_shape = func.apply(&init)?.shape().to_vec();
        Ok(Self {
            m: init,
            f_cache: Tensor::zeros(&out_shape),
            t: 1,
            func,
            in_scale,
            out_scale,
        })
    }

    pub fn func(&self) -> &GradedFn {
        &self.func
    }

    fn eval(&self, m: &Tensor) -> Result<Tensor> {
        if self.in_scale == 1.0 && self.out_scale == 1.0 {
            return self.func.apply(m);
        }
        let f = self.func.apply(&m.scale(self.in_scale))?;
        Ok(f.scale(1.0 / self.out_scale))
    }

    /// `m += x/t`, emit `t·(F(m) − F_prev)`.
    pub fn step_differential(&mut self, x_in: &Tensor) -> Result<Tensor> {
        self.m.expect_same_shape(x_in)?;
        let t = self.t as f64;
        for (m, &x) in self.m.data_mut().iter_mut().zip(x_in.data()) {
            *m += x / t;
        }
        let f = self.eval(&self.m)?;
        if !f.all_finite() {
            return Err(Error::Domain(format!("{} produced a non-finite value", self.func.name())));
        }
        let out = f.zip_map(&self.f_cache, |a, b| t * (a - b))?;
        self.f_cache = f;
        self.t += 1;
        Ok(out)
    }

    /// Rate-coded variant: `m` is the running mean of the inputs and the
    /// unit emits `t·F(m[t]) − (t−1)·F(m[t−1])`.
    pub fn step_rate(&mut self, x_in: &Tensor) -> Result<Tensor> {
        self.m.expect_same_shape(x_in)?;
        let t = self.t as f64;
        for (m, &x) in self.m.data_mut().iter_mut().zip(x_in.data()) {
            *m = (t - 1.0) / t * *m + x / t;
        }
        let f = self.eval(&self.m)?;
        if !f.all_finite() {
            return Err(Error::Domain(format!("{} produced a non-finite value", self.func.name())));
        }
        let out = f.zip_map(&self.f_cache, |a, b| t * a - (t - 1.0) * b)?;
        self.f_cache = f;
        self.t += 1;
        Ok(out)
    }
}

/// Differential graded unit for a bilinear operation.
#[derive(Clone, Debug)]
pub struct BinaryGradedState {
    pub m_a: Tensor,
    pub m_b: Tensor,
    pub t: usize,
    op: BinaryOp,
    /// `scale_a · scale_b / out_scale`, applied to every emitted value.
    factor: f64,
    cache: Option<Tensor>,
}

impl BinaryGradedState {
    pub fn new(op: BinaryOp, shape_a: &[usize], shape_b: &[usize]) -> Result<Self> {
        Self::with_scales(op, Tensor::zeros(shape_a), Tensor::zeros(shape_b), [1.0, 1.0], 1.0)
    }

    pub fn with_scales(
        op: BinaryOp,
        init_a: Tensor,
        init_b: Tensor,
        in_scales: [f64; 2],
        out_scale: f64,
    ) -> Result<Self> {
        if !(in_scales[0] > 0.0 && in_scales[1] > 0.0 && out_scale > 0.0) {
            return Err(Error::InvalidParam("graded unit scales must be positive".into()));
        }
        op.apply(&init_a, &init_b)?;
        Ok(Self {
            m_a: init_a,
            m_b: init_b,
            t: 1,
            op,
            factor: in_scales[0] * in_scales[1] / out_scale,
            cache: None,
        })
    }

    pub fn op(&self) -> BinaryOp {
        self.op
    }

    fn check(&self, xa: &Tensor, xb: &Tensor) -> Result<()> {
        self.m_a.expect_same_shape(xa)?;
        self.m_b.expect_same_shape(xb)
    }

    /// Emits `xA·xB/t + xA·m_B + m_A·xB` from the pre-update membranes,
    /// then integrates both inputs.
    pub fn step_differential(&mut self, xa: &Tensor, xb: &Tensor) -> Result<Tensor> {
        self.check(xa, xb)?;
        let t = self.t as f64;
        let mut out = self.op.apply(xa, xb)?.scale(1.0 / t);
        out.add_assign(&self.op.apply(xa, &self.m_b)?)?;
        out.add_assign(&self.op.apply(&self.m_a, xb)?)?;
        if self.t == 1 && !(self.m_a.is_zero() || self.m_b.is_zero()) {
            // non-zero starting membranes decode to their own product
            out.add_assign(&self.op.apply(&self.m_a, &self.m_b)?)?;
        }
        for (m, &x) in self.m_a.data_mut().iter_mut().zip(xa.data()) {
            *m += x / t;
        }
        for (m, &x) in self.m_b.data_mut().iter_mut().zip(xb.data()) {
            *m += x / t;
        }
        self.t += 1;
        Ok(if self.factor == 1.0 { out } else { out.scale(self.factor) })
    }

    /// Rate-coded variant on running means of both operands.
    pub fn step_rate(&mut self, xa: &Tensor, xb: &Tensor) -> Result<Tensor> {
        self.check(xa, xb)?;
        let t = self.t as f64;
        for (m, &x) in self.m_a.data_mut().iter_mut().zip(xa.data()) {
            *m = (t - 1.0) / t * *m + x / t;
        }
        for (m, &x) in self.m_b.data_mut().iter_mut().zip(xb.data()) {
            *m = (t - 1.0) / t * *m + x / t;
        }
        let f = self.op.apply(&self.m_a, &self.m_b)?.scale(self.factor);
        let out = match &self.cache {
            Some(prev) => f.zip_map(prev, |a, b| t * a - (t - 1.0) * b)?,
            None => f.scale(t),
        };
        self.cache = Some(f);
        self.t += 1;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decode(outs: &[Tensor]) -> Vec<Tensor> {
        let mut r = Tensor::zeros(outs[0].shape());
        outs.iter()
            .enumerate()
            .map(|(i, x)| {
                let t = (i + 1) as f64;
                r = r.zip_map(x, |a, b| a + b / t).unwrap();
                r.clone()
            })
            .collect()
    }

    fn constant_stream(v: &Tensor, steps: usize) -> Vec<Tensor> {
        (0..steps)
            .map(|i| if i == 0 { v.clone() } else { Tensor::zeros(v.shape()) })
            .collect()
    }

    #[test]
    fn relu_of_negative_constant_stays_zero() {
        let mut s = UnaryGradedState::new(GradedFn::Relu, Tensor::scalar(0.0)).unwrap();
        for x in constant_stream(&Tensor::scalar(-0.3), 6) {
            assert_eq!(s.step_differential(&x).unwrap().data(), &[0.0]);
        }
    }

    #[test]
    fn zero_stream_is_silent() {
        let mut s = UnaryGradedState::new(GradedFn::Gelu, Tensor::zeros(&[4])).unwrap();
        for _ in 0..10 {
            assert!(s.step_differential(&Tensor::zeros(&[4])).unwrap().is_zero());
        }
    }

    #[test]
    fn softmax_constant_source_is_exact_after_one_step() {
        let v = Tensor::from_vec(vec![2.0, 0.0]);
        let want = tensor::softmax(&v, -1).unwrap();
        let mut s = UnaryGradedState::new(GradedFn::Softmax { axis: -1 }, Tensor::zeros(&[2])).unwrap();
        let outs: Vec<Tensor> = constant_stream(&v, 8)
            .iter()
            .map(|x| s.step_differential(x).unwrap())
            .collect();
        for r in decode(&outs) {
            assert_eq!(r, want);
        }
        assert!((want.data()[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn folded_bias_is_part_of_the_input() {
        let b = Tensor::from_vec(vec![0.5, -1.0]);
        let v = Tensor::from_vec(vec![0.25, 0.25]);
        let mut s = UnaryGradedState::new(GradedFn::Silu, b.clone()).unwrap();
        let outs: Vec<Tensor> = constant_stream(&v, 3)
            .iter()
            .map(|x| s.step_differential(x).unwrap())
            .collect();
        let want = b.add(&v).unwrap().map(tensor::silu);
        assert_eq!(decode(&outs)[2], want);
    }

    #[test]
    fn scaled_unit_matches_rescaled_reference() {
        let v = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let (s_in, s_out) = (0.5, 4.0);
        let mut s = UnaryGradedState::with_scales(GradedFn::Gelu, Tensor::zeros(&[3]), s_in, s_out).unwrap();
        let r = decode(&[s.step_differential(&v).unwrap()]);
        let want = v.scale(s_in).map(tensor::gelu).scale(1.0 / s_out);
        for (a, b) in r[0].data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn telescoping_holds_for_arbitrary_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let funcs = [
            GradedFn::Gelu,
            GradedFn::Softmax { axis: -1 },
            GradedFn::LayerNorm { gamma: None, beta: None, eps: LAYER_NORM_EPS },
            GradedFn::Identity,
        ];
        for func in funcs {
            let mut s = UnaryGradedState::new(func.clone(), Tensor::zeros(&[2, 3])).unwrap();
            let mut r_in = Tensor::zeros(&[2, 3]);
            let mut r_out = Tensor::zeros(&[2, 3]);
            for step in 1..=32 {
                let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
                let t = step as f64;
                r_in = r_in.zip_map(&x, |a, b| a + b / t).unwrap();
                let y = s.step_differential(&x).unwrap();
                r_out = r_out.zip_map(&y, |a, b| a + b / t).unwrap();
                let want = func.apply(&r_in).unwrap();
                for (a, b) in r_out.data().iter().zip(want.data()) {
                    assert!((a - b).abs() < 1e-9, "{} step {step}", func.name());
                }
            }
        }
    }

    #[test]
    fn rate_unit_tracks_function_of_mean() {
        let mut s = UnaryGradedState::new(GradedFn::Gelu, Tensor::zeros(&[1])).unwrap();
        let xs = [0.4, -1.0, 2.0, 0.3];
        let mut sum_out = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            sum_out += s.step_rate(&Tensor::scalar(x)).unwrap().data()[0];
            let t = (i + 1) as f64;
            let mean = xs[..=i].iter().sum::<f64>() / t;
            assert!((sum_out / t - tensor::gelu(mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_scalar_product() {
        let mut s = BinaryGradedState::new(BinaryOp::ElemMul, &[1], &[1]).unwrap();
        let a = constant_stream(&Tensor::scalar(2.0), 5);
        let b = constant_stream(&Tensor::scalar(3.0), 5);
        let outs: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| s.step_differential(x, y).unwrap().data()[0])
            .collect();
        assert_eq!(outs, vec![6.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn binary_zero_operand_is_silent() {
        let mut s = BinaryGradedState::new(BinaryOp::ElemMul, &[3], &[3]).unwrap();
        for _ in 0..5 {
            let a = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
            assert!(s.step_differential(&a, &Tensor::zeros(&[3])).unwrap().is_zero());
        }
    }

    #[test]
    fn binary_matmul_constant_source() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 3.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.25, -1.0], vec![4.0, 2.0]]).unwrap();
        let op = BinaryOp::MatMul { transpose_b: false };
        let mut s = BinaryGradedState::new(op, &[2, 2], &[2, 2]).unwrap();
        let outs: Vec<Tensor> = constant_stream(&a, 4)
            .iter()
            .zip(constant_stream(&b, 4))
            .map(|(x, y)| s.step_differential(x, &y).unwrap())
            .collect();
        let want = tensor::matmul(&a, &b).unwrap();
        for r in decode(&outs) {
            assert_eq!(r, want);
        }
    }

    #[test]
    fn binary_telescoping_and_initial_membranes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = BinaryOp::MatMul { transpose_b: true };
        let init_a = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let init_b = Tensor::new(vec![2, 4], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut s = BinaryGradedState::with_scales(op, init_a.clone(), init_b.clone(), [1.0, 1.0], 1.0).unwrap();
        let (mut ra, mut rb) = (init_a, init_b);
        let mut r_out = Tensor::zeros(&[3, 2]);
        for step in 1..=32 {
            let t = step as f64;
            let xa = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let xb = Tensor::new(vec![2, 4], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            ra = ra.zip_map(&xa, |a, b| a + b / t).unwrap();
            rb = rb.zip_map(&xb, |a, b| a + b / t).unwrap();
            let y = s.step_differential(&xa, &xb).unwrap();
            r_out = r_out.zip_map(&y, |a, b| a + b / t).unwrap();
            let want = op.apply(&ra, &rb).unwrap();
            for (a, b) in r_out.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn binary_rate_tracks_product_of_means() {
        let mut s = BinaryGradedState::new(BinaryOp::ElemMul, &[1], &[1]).unwrap();
        let xs = [(1.0, 2.0), (0.0, -1.0), (3.0, 0.5)];
        let mut sum = 0.0;
        let (mut sa, mut sb) = (0.0, 0.0);
        for (i, &(a, b)) in xs.iter().enumerate() {
            sum += s.step_rate(&Tensor::scalar(a), &Tensor::scalar(b)).unwrap().data()[0];
            sa += a;
            sb += b;
            let t = (i + 1) as f64;
            assert!((sum / t - (sa / t) * (sb / t)).abs() < 1e-12);
        }
    }

    #[test]
    fn event_ops_count_fan_out() {
        let op = BinaryOp::MatMul { transpose_b: false };
        let xa = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let xb = Tensor::from_rows(&[vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0], vec![0.0; 4]]).unwrap();
        // 2 non-zeros in A each reach 4 columns, 1 in B reaches 2 rows
        assert_eq!(op.event_ops(&xa, &xb), 2 * 4 + 2);
        assert_eq!(BinaryOp::ElemMul.event_ops(&xa, &xa), 4);
    }
}
