use super::{backward, Tensor};
use crate::error::{Error, Result};

/// Largest relative disagreement between reverse-mode gradients and
/// fourth-order central differences for a scalar function of `x`.
///
/// Per element: `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
/// where `floor` is `1e-4` of the largest gradient magnitude in the tensor
/// (and at least `1e-12`), since entries far below the tensor's scale sit
/// under the finite-difference roundoff.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Input(format!("finite-difference step must be positive, got {eps}")));
    }
    let xp = x.detach().param();
    let out = f(&xp)?;
    let analytic = backward(&out)?.get_or_zeros(&xp);

    let base = x.to_vec();
    let mut worst: f64 = 0.0;
    let at = |i: usize, d: f64| -> Result<f64> {
        let mut v = base.clone();
        v[i] += d;
        f(&Tensor::new(v, x.shape())?)?.item()
    };
    let numeric = (0..base.len())
        .map(|i| Ok((8.0 * (at(i, eps)? - at(i, -eps)?) - (at(i, 2.0 * eps)? - at(i, -2.0 * eps)?)) / (12.0 * eps)))
        .collect::<Result<Vec<f64>>>()?;
    let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-4 * scale).max(1e-12);
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![0.3, -1.2, 2.0], &[3]).unwrap();
        let w = Tensor::new(vec![1.5, -0.5, 2.5], &[3]).unwrap();
        let err = grad_check(|x| Ok(x.mul(&w)?.sum()), &x, 1e-3).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_reports_zero() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let err = grad_check(|_| Ok(Tensor::scalar(4.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }
}
