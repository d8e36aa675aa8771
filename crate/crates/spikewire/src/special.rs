//! Error function and friends.

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// `1 - erf(x)` without cancellation for large `x`.
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n 2^n x^(2n+1) / (2n+1)!!
    /// Every term is positive, so the partial sums do not cancel.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-18 * sum.abs() {
            n += 1.0;
            term *= 2.0 * x * x / (2.0 * n + 1.0);
            sum += term;
        }
        2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp() * sum
    }

    #[test]
    fn fixed_points() {
        assert_eq!(erf(0.0), 0.0);
        assert!((erf(10.0) - 1.0).abs() <= 1e-12);
        assert!((erf(1.0) - 0.8427007929497149).abs() <= 1e-12);
        assert!((erf_series(1.0) - 0.8427007929497149).abs() <= 1e-15);
    }

    #[test]
    fn matches_series_oracle() {
        for i in -600..=600 {
            let x = i as f64 / 100.0;
            assert!((erf(x) - erf_series(x)).abs() <= 1e-12, "x = {x}");
        }
    }

    #[test]
    fn erfc_tail() {
        // erfc(6) from the asymptotic continued fraction, 2.151973671249892e-17
        assert!((erfc(6.0) / 2.151973671249892e-17 - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn odd_monotone_bounded(a in -8.0f64..8.0, b in -8.0f64..8.0) {
            prop_assert_eq!(erf(-a), -erf(a));
            prop_assert!(erf(a).abs() <= 1.0);
            if a < b {
                prop_assert!(erf(a) <= erf(b));
            }
        }
    }
}
