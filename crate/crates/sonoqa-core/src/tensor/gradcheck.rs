//! Finite-difference gradient checking (64-bit only).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Compare reverse-mode gradients of a scalar function against central
/// differences, over every coordinate of every input.
///
/// Returns the maximum of |analytic − fd| / max(1, |fd|). The probe step
/// `eps` must lie in (0, 1e-2]. Functions containing kinks (relu, clamps,
/// pooling ties) must be evaluated at points whose margin to the kink
/// exceeds `eps`; see [`Tape::min_kink_margin`].
pub fn grad_check_multi<F>(f: F, points: &[(Vec<usize>, Vec<f64>)], eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Parameter(alloc::format!(
            "grad_check eps must be in (0, 1e-2], got {eps}"
        )));
    }
    if points.is_empty() {
        return Err(Error::Parameter("grad_check needs at least one input".into()));
    }

    // Analytic gradients in one reverse pass.
    let tape = Tape::new();
    let inputs: Vec<Tensor> = points
        .iter()
        .map(|(shape, values)| tape.variable(shape, values.clone()))
        .collect::<Result<_>>()?;
    let out = f(&tape, &inputs)?;
    if tape.values(out).len() != 1 {
        return Err(Error::Contract("grad_check function must return a scalar".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(points)
        .map(|(t, (_, values))| tape.grad(*t).unwrap_or_else(|| vec![0.0; values.len()]))
        .collect();

    let eval = |probe_input: usize, coord: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new();
        let inputs: Vec<Tensor> = points
            .iter()
            .enumerate()
            .map(|(pi, (shape, values))| {
                let mut v = values.clone();
                if pi == probe_input {
                    v[coord] += delta;
                }
                tape.constant(shape, v)
            })
            .collect::<Result<_>>()?;
        let out = f(&tape, &inputs)?;
        tape.value(out)
    };

    let mut max_err = 0.0f64;
    for (pi, (_, values)) in points.iter().enumerate() {
        for (ci, &exact) in analytic[pi].iter().enumerate().take(values.len()) {
            let fd = (eval(pi, ci, eps)? - eval(pi, ci, -eps)?) / (2.0 * eps);
            let err = (exact - fd).abs() / fd.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(f: F, shape: &[usize], values: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Tensor) -> Result<Tensor>,
{
    grad_check_multi(
        |tape, ins| f(tape, ins[0]),
        &[(shape.to_vec(), values.to_vec())],
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        // Central differences are exact (up to roundoff) on quadratics.
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &[4],
            &[0.5, -1.2, 2.0, 3.3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let err = grad_check(
            |g, x| {
                let c = g.constant(&[1], alloc::vec![7.0])?;
                // x enters through a zero multiplier so the result is constant.
                let zero = g.scale(g.sum(x)?, 0.0)?;
                g.add(c, zero)
            },
            &[3],
            &[1.0, 2.0, 3.0],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_domain_is_validated() {
        let r = grad_check(|g, x| g.sum(x), &[1], &[1.0], 0.5);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }
}
