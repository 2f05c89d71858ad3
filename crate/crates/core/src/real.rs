//! Scalar abstraction and the handful of numeric kernels shared by the model.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar the model math is generic over.
pub trait Real:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` constant.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Real")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count is representable in every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Largest argument for which `ln_gamma` uses the exact log-factorial sum.
const EXACT_FACTORIAL_LIMIT: f64 = 32.0;

/// `ln Γ(x)` for `x > 0`.
///
/// Small positive integers go through `Σ ln i` so that `ln Γ(1) = ln Γ(2) = 0`
/// hold exactly; everything else is delegated to `statrs`.
pub fn ln_gamma<T: Real>(x: T) -> T {
    let v = x.as_f64();
    if v.fract() == 0.0 && (1.0..=EXACT_FACTORIAL_LIMIT).contains(&v) {
        let n = v as u32;
        let mut acc = 0.0f64;
        for i in 2..n {
            acc += f64::from(i).ln();
        }
        return T::of(acc);
    }
    T::of(statrs::function::gamma::ln_gamma(v))
}

/// Digamma function `ψ(x)`.
pub fn digamma<T: Real>(x: T) -> T {
    T::of(statrs::function::gamma::digamma(x.as_f64()))
}

/// `ln B(a, b)`.
pub fn ln_beta<T: Real>(a: T, b: T) -> T {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// `ln Σ exp(x_i)`; `-inf` for an empty slice or when every entry is `-inf`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let mut acc = T::zero();
    for &x in xs {
        acc = acc + (x - max).exp();
    }
    max + acc.ln()
}

/// Turns log-weights into a probability vector in place.
///
/// Returns `false` (leaving the slice untouched) when no entry is finite.
pub fn normalize_log_weights<T: Real>(xs: &mut [T]) -> bool {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return false;
    }
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
    true
}

/// Scales non-negative weights to sum to one. Returns `false` when the total
/// is zero or not finite.
pub fn normalize_weights<T: Real>(xs: &mut [T]) -> bool {
    let total: T = xs.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        return false;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
    true
}

/// Inverse-CDF draw from unnormalized non-negative weights.
///
/// `u` is a uniform variate in `[0, 1)`. Zero-weight entries are never
/// returned; the last positive entry absorbs rounding at the top end.
pub fn sample_weighted<T: Real>(weights: &[T], u: f64) -> usize {
    let total: T = weights.iter().copied().sum();
    let target = T::of(u) * total;
    let mut acc = T::zero();
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > T::zero() {
            acc = acc + w;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_small_integers_exact() {
        assert_eq!(ln_gamma(1.0f64), 0.0);
        assert_eq!(ln_gamma(2.0f64), 0.0);
        assert!((ln_gamma(5.0f64) - 24f64.ln()).abs() < 1e-14);
        assert!((ln_gamma(0.5f64) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
        assert!((ln_gamma(40.0f64) - statrs::function::gamma::ln_gamma(40.0)).abs() < 1e-10);
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[-1000.0f64, -1000.0]);
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = log_sum_exp(&[f64::NEG_INFINITY, 0.0]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn sampling_skips_zero_weights() {
        let w = [0.0f64, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(sample_weighted(&w, 0.0), 1);
        assert_eq!(sample_weighted(&w, 0.49), 1);
        assert_eq!(sample_weighted(&w, 0.51), 3);
        assert_eq!(sample_weighted(&w, 0.999_999_999), 3);
    }

    #[test]
    fn normalize_rejects_all_neg_inf() {
        let mut w = [f64::NEG_INFINITY; 3];
        assert!(!normalize_log_weights(&mut w));
        let mut w = [0.0f32, (2.0f32).ln()];
        assert!(normalize_log_weights(&mut w));
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn normalized_log_weights_form_a_simplex(xs in proptest::collection::vec(-700.0f64..700.0, 1..30)) {
            let mut p = xs.clone();
            proptest::prop_assert!(normalize_log_weights(&mut p));
            proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            proptest::prop_assert_eq!(argmax(&p), argmax(&xs));
            let lse = log_sum_exp(&xs);
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(lse >= max && lse <= max + (xs.len() as f64).ln() + 1e-9);
        }
    }
}
