//! Globally adaptive Gauss–Kronrod (7/15) integration.
//!
//! The interval is first split at caller-supplied breakpoints; the piece with
//! the largest error estimate is then bisected until the summed estimate is
//! below the tolerance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];

// Gauss weights for the odd Kronrod nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

pub const DEFAULT_MAX_SUBDIVISIONS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    /// Summed |K15 - G7| over the final partition.
    pub error: f64,
    pub subdivisions: usize,
}

#[derive(Clone, Copy, Debug)]
struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}

impl Eq for Piece {}

impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Piece {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Piece {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Integrates `f` over `[a, b]` to an absolute error estimate of `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    integrate_with_breaks(f, &[a, b], tol, DEFAULT_MAX_SUBDIVISIONS).map(|r| r.value)
}

/// Integrates over `[breaks[0], breaks[last]]`, treating every interior
/// breakpoint as a possible kink. `breaks` must be sorted ascending.
pub fn integrate_with_breaks<F: Fn(f64) -> f64>(
    f: F,
    breaks: &[f64],
    tol: f64,
    max_subdivisions: usize,
) -> Result<QuadResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParam(format!("quadrature tolerance {tol}")));
    }
    if breaks.len() < 2 {
        return Err(Error::InvalidParam("need at least two breakpoints".into()));
    }
    if breaks.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidParam("breakpoints must be sorted".into()));
    }

    let mut heap: BinaryHeap<Piece> = breaks
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| gauss_kronrod(&f, w[0], w[1]))
        .collect();
    let mut total_err: f64 = heap.iter().map(|p| p.error).sum();
    let mut subdivisions = 0;

    while total_err > tol {
        let worst = match heap.peek() {
            Some(p) => *p,
            None => break,
        };
        let mid = 0.5 * (worst.a + worst.b);
        if !(mid > worst.a && mid < worst.b) {
            // cannot split further in floating point
            break;
        }
        if subdivisions >= max_subdivisions {
            return Err(Error::Quadrature {
                subdivisions,
                estimate: total_err,
                tol,
            });
        }
        heap.pop();
        let left = gauss_kronrod(&f, worst.a, mid);
        let right = gauss_kronrod(&f, mid, worst.b);
        total_err += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
        subdivisions += 1;
        // periodic resummation keeps the running total from drifting
        if subdivisions % 256 == 0 {
            total_err = heap.iter().map(|p| p.error).sum();
        }
    }

    // Sum in left-to-right order so the result does not depend on heap layout.
    let mut pieces = heap.into_vec();
    pieces.sort_by(|p, q| p.a.total_cmp(&q.a));
    let value = pieces.iter().map(|p| p.value).sum();
    let error = pieces.iter().map(|p| p.error).sum();
    if !f64::is_finite(value) {
        return Err(Error::NonFinite("quadrature result".into()));
    }
    Ok(QuadResult {
        value,
        error,
        subdivisions,
    })
}
