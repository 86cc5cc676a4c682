use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
///
/// `f` receives a fresh graph with every tensor of `params` inserted as a
/// gradient-tracking leaf and must return the scalar sink. The result is the
/// largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |ps: &[Tensor], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars = ps.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
        let sink = f(&mut g, &vars)?;
        let value = g.value(sink).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(sink)?;
        let gs =
            vars.iter().zip(ps).map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)).collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for (ci, &a) in grad.iter().enumerate() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let (up, _) = eval(&work, false)?;
            work[pi].data_mut()[ci] = orig - h;
            let (down, _) = eval(&work, false)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let p = vec![Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()];
        let err = finite_difference_check(|g, _| g.constant(Tensor::scalar(4.0)), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let p = vec![Tensor::scalar(1.0)];
        let err = finite_difference_check(|g, v| g.mul(v[0], v[0]), &p, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = vec![Tensor::scalar(1.0)];
        assert!(finite_difference_check(|g, v| g.mul(v[0], v[0]), &p, 0.0).is_err());
    }
}
