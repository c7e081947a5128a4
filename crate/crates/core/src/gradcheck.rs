//! Central finite differences and gradient comparison.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `∂f/∂x` by central differences with step `h` on every coordinate.
/// Non-finite evaluations are reported with the offending coordinate.
pub fn finite_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f32) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is {plus} / {minus} at coordinate {i} ± {h}"
            )));
        }
        // The actual spacing after f32 rounding.
        let span = ((orig + h) as f64) - ((orig - h) as f64);
        grad.push(((plus - minus) / span) as f32);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `⟨∇f(x), v⟩` by a central difference along `v`.
pub fn directional_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, v: &Tensor, h: f32) -> Result<f64> {
    let plus = f(&x.zip_map(v, |a, b| a + h * b)?);
    let minus = f(&x.zip_map(v, |a, b| a - h * b)?);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite(format!("objective is {plus} / {minus} along direction")));
    }
    Ok((plus - minus) / (2.0 * h as f64))
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8)`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = finite_difference(|t| t.data().iter().map(|&v| (v as f64).powi(2)).sum(), &x, 1e-2).unwrap();
        let expected = x.scale(2.0);
        assert!(relative_error(&g, &expected) < 1e-5);
    }

    #[test]
    fn directional_matches_dot() {
        let x = Tensor::vector(vec![0.3, 0.7]);
        let v = Tensor::vector(vec![1.0, -1.0]);
        let d = directional_difference(|t| (t.data()[0] as f64).powi(3) + t.data()[1] as f64, &x, &v, 1e-2).unwrap();
        assert!((d - (3.0 * 0.09 - 1.0)).abs() < 1e-3);
    }

    #[test]
    fn reports_non_finite_coordinate() {
        let x = Tensor::vector(vec![1.0, 0.0]);
        let err = finite_difference(|t| (t.data()[1] as f64).ln(), &x, 1e-2).unwrap_err();
        assert!(err.to_string().contains("coordinate 0"), "{err}");
    }

    #[test]
    fn relative_error_floor() {
        let z = Tensor::zeros(&[3]);
        assert_eq!(relative_error(&z, &z), 0.0);
    }
}
