use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Central-difference estimate of `∂f/∂x`, element by element.
pub fn finite_difference_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, step: f64) -> Result<Tensor> {
    finite_difference_at(&mut f, x, step, 0..x.len())
}

/// Central differences restricted to the flat indices in `indices`; the
/// remaining entries of the result are zero.
pub fn finite_difference_at(
    f: &mut impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
    indices: impl IntoIterator<Item = usize>,
) -> Result<Tensor> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {}", step)));
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericOverflow {
                op: "finite_difference",
            });
        }
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sin_at_zero() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v.sin()).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = finite_difference_gradient(|t| Ok(t.data()[0].ln()), &x, 1e-5);
        assert!(r.is_err());
    }
}
