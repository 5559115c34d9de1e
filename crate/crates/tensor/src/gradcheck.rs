//! Central finite differences, used as the independent oracle for backward.

use crate::Real;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
/// `f` is evaluated in `T`; differences are accumulated in `f64`.
pub fn numeric_gradient<T: Real>(mut f: impl FnMut(&[T]) -> T, x: &[T], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = T::from_f64(orig.as_f64() + h);
            let up = f(&probe).as_f64();
            probe[i] = T::from_f64(orig.as_f64() - h);
            let down = f(&probe).as_f64();
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over paired entries.
pub fn max_rel_error<T: Real>(analytic: &[T], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, &n)| {
            let a = a.as_f64();
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// `||a - n|| / max(||a||, ||n||)`: relative error of the whole gradient vector.
/// Less sensitive than the entrywise form to round-off in tiny components,
/// which dominates when the loss itself is evaluated in single precision.
pub fn rel_error_norm<T: Real>(analytic: &[T], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (a, &n) in analytic.iter().zip(numeric) {
        let a = a.as_f64();
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let g = numeric_gradient(|x: &[f64]| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }
}
