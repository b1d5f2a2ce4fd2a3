use crate::error::{AutodiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference estimate of `∇f(x)`:
/// entry `i` is `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "finite_diff_grad",
            reason: format!("step must be positive, got {eps}"),
        });
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + eps);
        let up = f(&probe).as_f64();
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - eps);
        let down = f(&probe).as_f64();
        probe.data_mut()[i] = orig;
        out.push(T::from_f64((up - down) / (2.0 * eps)));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `max|a − b| / max(max|b|, floor)`: the error measure used by gradient checks.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    let scale = b
        .data()
        .iter()
        .map(|x| x.as_f64().abs())
        .fold(floor, f64::max);
    a.max_abs_diff(b) / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-4).unwrap();
        assert!((g.data()[0] - 2.0).abs() <= 1e-7);
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::new(vec![3], vec![0.3f64, -1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|_| 4.2, &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        assert!(finite_diff_grad(|t| t.data()[0], &x, 0.0).is_err());
        assert!(finite_diff_grad(|t| t.data()[0], &x, -1e-3).is_err());
    }
}
