//! Multi-threshold (MT) spiking neurons.
//!
//! A layer with base threshold θ and `n` levels owns the ladder
//! `±θ, ±θ/2, …, ±θ/2^(n-1)` and emits at most one ladder value per element
//! per step. The membrane is soft-reset by subtracting what was emitted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Membranes within this distance (relative to θ) of the dead-zone edge are
/// treated as on the edge. Absorbs rounding in accumulated potentials, which
/// otherwise leaves a membrane that should sit exactly on λₙ one ulp short.
pub const DEAD_ZONE_SLACK: f64 = 1e-12;

/// |m| beyond this multiple of θ is reported as a miscalibration.
pub const OVERFLOW_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FiringRule {
    /// Nearest ladder entry outside the dead zone.
    #[default]
    Argmin,
    /// Sign/exponent extraction from the 32-bit float `4m/3` (θ normalized).
    Hw,
}

impl std::str::FromStr for FiringRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmin" => Ok(FiringRule::Argmin),
            "hw" => Ok(FiringRule::Hw),
            _ => Err(Error::InvalidParam(format!("unknown firing rule `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdLadder {
    theta: f64,
    n: u32,
    lambdas: Vec<f64>,
}

impl ThresholdLadder {
    pub fn new(theta: f64, n: u32) -> Result<Self> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::InvalidParam(format!("threshold {theta} must be positive")));
        }
        if n == 0 || n > 126 {
            return Err(Error::InvalidParam(format!("threshold count n = {n} out of range")));
        }
        let pos: Vec<f64> = (0..n).map(|k| theta * 0.5f64.powi(k as i32)).collect();
        let lambdas = pos.iter().copied().chain(pos.iter().map(|l| -l)).collect();
        Ok(Self { theta, n, lambdas })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    /// All 2n thresholds; entry `i - 1` is λᵢ.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// λᵢ for a 1-based index.
    pub fn lambda(&self, index: usize) -> f64 {
        self.lambdas[index - 1]
    }

    /// The smallest positive threshold λₙ.
    pub fn smallest(&self) -> f64 {
        self.lambdas[self.n as usize - 1]
    }
}

/// Threshold index (1-based) fired by membrane `m`, or `None` inside the
/// dead zone `(λ_2n, λₙ)`. Exact ties go to the smaller index.
pub fn mth_select(m: f64, ladder: &ThresholdLadder) -> Option<usize> {
    let edge = ladder.smallest() - DEAD_ZONE_SLACK * ladder.theta;
    if m < edge && m > -edge {
        return None;
    }
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, &l) in ladder.lambdas.iter().enumerate() {
        let d = (m - l).abs();
        if d < best_dist {
            best = i;
            best_dist = d;
        }
    }
    Some(best + 1)
}

/// Bit-level firing rule on a θ-normalized membrane: the sign bit and
/// unbiased exponent of the f32 value `4m/3` pick the threshold directly.
pub fn mth_select_hw(m: f64, n: u32) -> Option<usize> {
    let scaled = (m as f32) * 4.0 / 3.0;
    let bits = scaled.to_bits() & !MANTISSA_MASK;
    let sign = bits >> 31;
    let exponent = ((bits & EXPONENT_MASK) >> 23) as i32 - 127;
    if exponent <= -(n as i32) {
        return None;
    }
    let index = (1 - exponent.min(0)) as usize;
    Some(if sign == 0 { index } else { n as usize + index })
}

const MANTISSA_MASK: u32 = (1 << 23) - 1;
const EXPONENT_MASK: u32 = 0xFF << 23;

/// One step of the branch-free f32 kernel: integrate `x`, emit
/// `±2^E` (or zero) built directly from the exponent field, soft-reset.
/// Returns the new membrane and the emitted value.
pub fn hw_kernel_step(m: f32, x: f32, n: u32) -> (f32, f32) {
    let m = m + x;
    let mut bits = (m * 4.0 / 3.0).to_bits() & !MANTISSA_MASK;
    let mut exponent = (bits & EXPONENT_MASK) >> 23;
    let unbiased = exponent as i32 - 127;
    if unbiased <= -(n as i32) {
        exponent = 0;
    } else if unbiased > 0 {
        exponent = 127;
    }
    bits = (bits & !EXPONENT_MASK) | (exponent << 23);
    let spike = f32::from_bits(bits);
    (m - spike, spike)
}

/// Mutable state of one MT neuron layer.
#[derive(Clone, Debug)]
pub struct NeuronLayerState {
    /// Post-spike potential.
    pub v: Tensor,
    /// Pre-spike potential of the last step.
    pub m: Tensor,
    /// Rate memory of the differential neuron, `r_in[t-1] - r_out[t-1]`.
    pub m_r: Tensor,
    /// The step about to be executed, starting at 1.
    pub t: usize,
    pub spike_count: u64,
    ladders: Vec<ThresholdLadder>,
    channel_stride: usize,
    rule: FiringRule,
    last_indices: Vec<u16>,
}

impl NeuronLayerState {
    /// One ladder for the whole tensor, or one per leading-axis channel.
    pub fn new(shape: &[usize], ladders: Vec<ThresholdLadder>, rule: FiringRule) -> Result<Self> {
        let len: usize = shape.iter().product();
        if ladders.is_empty() || !len.is_multiple_of(ladders.len()) {
            return Err(Error::Shape(format!(
                "{} ladders do not tile a tensor of shape {shape:?}",
                ladders.len()
            )));
        }
        Ok(Self {
            v: Tensor::zeros(shape),
            m: Tensor::zeros(shape),
            m_r: Tensor::zeros(shape),
            t: 1,
            spike_count: 0,
            channel_stride: (len / ladders.len()).max(1),
            ladders,
            rule,
            last_indices: vec![0; len],
        })
    }

    pub fn single(shape: &[usize], ladder: ThresholdLadder, rule: FiringRule) -> Result<Self> {
        Self::new(shape, vec![ladder], rule)
    }

    /// Seeds the rate memory (a folded bias for differential neurons).
    pub fn with_rate_memory(mut self, m_r: Tensor) -> Result<Self> {
        self.m_r.expect_same_shape(&m_r)?;
        self.m_r = m_r;
        Ok(self)
    }

    pub fn ladders(&self) -> &[ThresholdLadder] {
        &self.ladders
    }

    pub fn ladder_for(&self, element: usize) -> &ThresholdLadder {
        &self.ladders[element / self.channel_stride]
    }

    /// Threshold indices fired in the last step, 0 meaning silent.
    pub fn last_indices(&self) -> &[u16] {
        &self.last_indices
    }

    /// Rate-coded step: the input is the current.
    pub fn step_rate(&mut self, x_in: &Tensor) -> Result<Tensor> {
        let out = self.fire(x_in)?;
        self.t += 1;
        Ok(out)
    }

    /// Differential step: the current is corrected by the rate memory.
    pub fn step_differential(&mut self, x_in: &Tensor) -> Result<Tensor> {
        let current = self.m_r.add(x_in)?;
        let out = self.fire(&current)?;
        let t = self.t as f64;
        for ((mr, &x), &y) in self.m_r.data_mut().iter_mut().zip(x_in.data()).zip(out.data()) {
            *mr = *mr + x / t - y / t;
        }
        self.t += 1;
        Ok(out)
    }

    fn fire(&mut self, current: &Tensor) -> Result<Tensor> {
        self.v.expect_same_shape(current)?;
        let mut out = Tensor::zeros(current.shape());
        for i in 0..current.len() {
            let ladder = &self.ladders[i / self.channel_stride];
            let m = self.v.data()[i] + current.data()[i];
            if !(m.abs() <= OVERFLOW_FACTOR * ladder.theta) {
                return Err(Error::Overflow {
                    node: String::new(),
                    t: self.t,
                });
            }
            let index = match self.rule {
                FiringRule::Argmin => mth_select(m, ladder),
                FiringRule::Hw => mth_select_hw(m / ladder.theta, ladder.n),
            };
            let x = index.map_or(0.0, |k| ladder.lambda(k));
            self.m.data_mut()[i] = m;
            self.v.data_mut()[i] = m - x;
            out.data_mut()[i] = x;
            self.last_indices[i] = index.unwrap_or(0) as u16;
            if index.is_some() {
                self.spike_count += 1;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ladder(theta: f64, n: u32) -> ThresholdLadder {
        ThresholdLadder::new(theta, n).unwrap()
    }

    #[test]
    fn ladder_layout() {
        let l = ladder(2.0, 3);
        assert_eq!(l.lambdas(), &[2.0, 1.0, 0.5, -2.0, -1.0, -0.5]);
        assert_eq!(l.lambda(1), 2.0);
        assert_eq!(l.lambda(4), -2.0);
        assert!(ThresholdLadder::new(0.0, 3).is_err());
        assert!(ThresholdLadder::new(1.0, 0).is_err());
    }

    #[test]
    fn argmin_examples() {
        let l = ladder(1.0, 3);
        assert_eq!(mth_select(0.1, &l), None);
        assert_eq!(mth_select(0.8, &l), Some(1));
        assert_eq!(mth_select(0.3, &l), Some(3));
        assert_eq!(mth_select(-0.6, &l), Some(5));
    }

    #[test]
    fn dead_zone_edges_fire() {
        let l = ladder(1.0, 3);
        assert_eq!(mth_select(0.25, &l), Some(3));
        assert_eq!(mth_select(-0.25, &l), Some(6));
        assert_eq!(mth_select(0.2499, &l), None);
        // exact midpoint between 1 and 0.5 goes to the larger magnitude
        assert_eq!(mth_select(0.75, &l), Some(1));
        assert_eq!(mth_select(-0.75, &l), Some(4));
    }

    #[test]
    fn hw_examples() {
        assert_eq!(mth_select_hw(0.8, 3), Some(1));
        assert_eq!(mth_select_hw(0.1, 3), None);
        assert_eq!(mth_select_hw(-0.6, 3), Some(3 + 2));
        assert_eq!(mth_select_hw(0.0, 3), None);
        // exponent clamp: anything at or above 3/4 maps to the top threshold
        assert_eq!(mth_select_hw(57.0, 3), Some(1));
        assert_eq!(mth_select_hw(-57.0, 3), Some(4));
    }

    #[test]
    fn hw_kernel_matches_index_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100_000 {
            let n = rng.random_range(1..=8);
            let m: f32 = rng.random_range(-4.0..4.0);
            let (rest, spike) = hw_kernel_step(0.0, m, n);
            let want = mth_select_hw(m as f64, n).map_or(0.0, |k| ladder(1.0, n).lambda(k));
            assert_eq!(spike.abs() as f64, want.abs(), "m = {m}");
            if want != 0.0 {
                assert_eq!(spike as f64, want);
            }
            assert_eq!(rest, m - spike);
        }
    }

    #[test]
    fn rate_step_examples() {
        let mut s = NeuronLayerState::single(&[1], ladder(1.0, 1), FiringRule::Argmin).unwrap();
        assert_eq!(s.step_rate(&Tensor::scalar(0.0)).unwrap().data(), &[0.0]);
        assert_eq!(s.v.data(), &[0.0]);

        let mut s = NeuronLayerState::single(&[1], ladder(1.0, 1), FiringRule::Argmin).unwrap();
        assert_eq!(s.step_rate(&Tensor::scalar(1.3)).unwrap().data(), &[1.0]);
        assert!((s.v.data()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rate_coding_constant_input() {
        // n = 1 ladder {1, -1}: cumulative input 0.6 t crosses 1, 2, ... so
        // spikes at t = 2, 4, 5, 7, 9, 10 -> 6 spikes in 10 steps
        let mut s = NeuronLayerState::single(&[1], ladder(1.0, 1), FiringRule::Argmin).unwrap();
        let total: f64 = (0..10)
            .map(|_| s.step_rate(&Tensor::scalar(0.6)).unwrap().data()[0])
            .sum();
        assert_eq!(total / 10.0, 0.6);
        assert_eq!(s.spike_count, 6);
    }

    #[test]
    fn differential_single_neuron_trace() {
        let mut s = NeuronLayerState::single(&[1], ladder(1.0, 2), FiringRule::Argmin).unwrap();
        let inputs = [0.6, 0.0, 0.0, 0.0, 0.0];
        let mut r = 0.0;
        let mut outs = Vec::new();
        for (k, &x) in inputs.iter().enumerate() {
            let y = s.step_differential(&Tensor::scalar(x)).unwrap().data()[0];
            r += y / (k + 1) as f64;
            outs.push(y);
        }
        assert_eq!(outs, vec![0.5, 0.0, 0.0, 0.0, 0.5]);
        assert_eq!(r, 0.6);
        assert_eq!(s.spike_count, 2);
    }

    #[test]
    fn differential_zero_input_is_silent() {
        let mut s = NeuronLayerState::single(&[3], ladder(1.0, 4), FiringRule::Argmin).unwrap();
        for _ in 0..50 {
            assert!(s.step_differential(&Tensor::zeros(&[3])).unwrap().is_zero());
        }
        assert_eq!(s.spike_count, 0);
    }

    #[test]
    fn bias_seeded_rate_memory_decodes_to_bias() {
        let b = 0.7;
        let mut s = NeuronLayerState::single(&[1], ladder(1.0, 4), FiringRule::Argmin)
            .unwrap()
            .with_rate_memory(Tensor::scalar(b))
            .unwrap();
        let mut r = 0.0;
        let t_max = 64;
        for t in 1..=t_max {
            r += s.step_differential(&Tensor::scalar(0.0)).unwrap().data()[0] / t as f64;
        }
        // residual membrane is below one finest threshold, spread over t steps
        assert!((r - b).abs() <= 0.125 / t_max as f64, "r = {r}");
    }

    #[test]
    fn overflow_guard() {
        let mut s = NeuronLayerState::single(&[1], ladder(1.0, 1), FiringRule::Argmin).unwrap();
        assert!(matches!(s.step_rate(&Tensor::scalar(2e6)), Err(Error::Overflow { .. })));
    }

    #[test]
    fn per_channel_ladders() {
        let ladders = vec![ladder(1.0, 1), ladder(4.0, 1)];
        let mut s = NeuronLayerState::new(&[2, 1, 2], ladders, FiringRule::Argmin).unwrap();
        let out = s.step_rate(&Tensor::new(vec![2, 1, 2], vec![1.5, 0.5, 1.5, 4.5]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 4.0]);
        assert_eq!(s.last_indices(), &[1, 0, 0, 1]);
    }

    proptest! {
        #[test]
        fn soft_reset_and_one_hot(
            theta in 0.1f64..10.0,
            n in 1u32..8,
            xs in prop::collection::vec(-1.0f64..1.0, 1..40),
            differential in any::<bool>(),
        ) {
            let l = ladder(theta, n);
            let mut s = NeuronLayerState::single(&[1], l.clone(), FiringRule::Argmin).unwrap();
            for x in xs {
                let x_in = Tensor::scalar(x * theta);
                let v_prev = s.v.data()[0];
                let out = if differential {
                    s.step_differential(&x_in).unwrap()
                } else {
                    s.step_rate(&x_in).unwrap()
                };
                let y = out.data()[0];
                prop_assert_eq!(s.v.data()[0], s.m.data()[0] - y);
                prop_assert!(y == 0.0 || l.lambdas().contains(&y));
                if !differential {
                    // |input| <= θ keeps the residual inside one threshold plus the dead zone
                    prop_assert!(s.v.data()[0].abs() < theta + l.smallest(), "v_prev {}", v_prev);
                }
            }
        }
    }
}
