//! Central finite-difference check for tape-built scalar functions.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn evaluate<F>(forward: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = forward(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Max over every parameter entry of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `forward` receives one leaf per entry of `params` and must return a scalar.
pub fn grad_check<F>(forward: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!("grad_check step must be positive, got {step}")));
    }

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = forward(&mut tape, &vars)?;
    let base = tape.value(out).item();
    let grads = tape.backward(out)?;

    if evaluate(&forward, params)? != base {
        return Err(Error::contract("grad_check: forward is not deterministic"));
    }

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        for k in 0..params[pi].numel() {
            let orig = params[pi].data()[k];
            probe[pi].data_mut()[k] = orig + step;
            let plus = evaluate(&forward, &probe)?;
            probe[pi].data_mut()[k] = orig - step;
            let minus = evaluate(&forward, &probe)?;
            probe[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_has_identity_gradient() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |tape, p| {
                let xt = tape.transpose(p[0])?;
                let sq = tape.matmul(p[0], xt)?;
                let half = tape.scale(sq, 0.5)?;
                tape.sum(half)
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let mut tape = Tape::new();
        let v = tape.param(x).unwrap();
        let vt = tape.transpose(v).unwrap();
        let sq = tape.matmul(v, vt).unwrap();
        let half = tape.scale(sq, 0.5).unwrap();
        let loss = tape.sum(half).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 4.0]).unwrap();
        let err = grad_check(|tape, _| tape.constant(Tensor::scalar(7.0)), &[x], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|tape, p| tape.sum(p[0]), &[x], 0.0).is_err());
    }

    #[test]
    fn nondeterministic_forward_is_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::scalar(1.0);
        let res = grad_check(
            |tape, p| {
                calls.set(calls.get() + 1.0);
                let c = tape.constant(Tensor::scalar(calls.get()))?;
                tape.add(p[0], c)
            },
            &[x],
            1e-5,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }
}
