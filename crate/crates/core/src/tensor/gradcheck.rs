use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// Entry `i` of the result is `(f(x + step e_i) - f(x - step e_i)) / (2 step)`.
/// `f` must be deterministic; any non-finite evaluation is an error.
pub fn finite_diff_grad<T: Scalar, F>(mut f: F, x: &Tensor4<T>, step: T) -> Result<Tensor4<T>>
where
    F: FnMut(&Tensor4<T>) -> T,
{
    if !(step > T::zero()) {
        return Err(Error::InvalidArgument(format!("finite difference step must be positive, got {step}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor4::zeros(x.dims());
    let two = T::one() + T::one();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("finite difference probe at coordinate {i}")));
        }
        grad.data_mut()[i] = (plus - minus) / (two * step);
    }
    Ok(grad)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
///
/// The floor keeps entries that are zero in both tensors from dividing by
/// zero; pass something well below the gradient scale under test.
pub fn max_relative_error<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, floor: T) -> Result<T> {
    a.expect_dims(b.dims(), "relative error operand")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(T::zero(), T::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::<f64>::uniform([1, 2, 3, 3], -2.0, 2.0, &mut rng);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn gradient_of_half_square_norm_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::<f64>::uniform([2, 1, 2, 3], -2.0, 2.0, &mut rng);
        let g = finite_diff_grad(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &x, 1e-3).unwrap();
        assert!(g.max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_f() {
        let x = Tensor4::<f64>::zeros([1, 1, 1, 1]);
        assert!(finite_diff_grad(|t| t.sum(), &x, 0.0).is_err());
        assert!(matches!(finite_diff_grad(|_| f64::NAN, &x, 1e-3), Err(Error::NonFinite(_))));
    }

    #[test]
    fn relative_error_uses_floor() {
        let a = Tensor4::<f64>::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let b = Tensor4::<f64>::new([1, 1, 1, 2], vec![1e-12, 2.002]).unwrap();
        let e = max_relative_error(&a, &b, 1e-6).unwrap();
        assert!((e - 0.002 / 2.002).abs() < 1e-12);
    }
}
