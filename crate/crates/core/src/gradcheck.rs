//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a
/// scalar function of several tensor inputs.
pub fn check_gradients_multi<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |probe: &[Tensor], index: usize, offset: f64| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&t, &vs)?;
        let v = t.value(y).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteProbe { index, offset })
        }
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut flat = 0;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe, flat, h)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe, flat, -h)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            flat += 1;
        }
    }
    Ok(worst)
}

/// Single-input form of [`check_gradients_multi`].
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    check_gradients_multi(|t, v| f(t, v[0]), std::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::ElementwiseOp;

    fn input(shape: &[usize], seed: u64) -> Tensor {
        // Deterministic values spread over [-1, 1].
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn linear_function_is_exact() {
        let x = input(&[3, 4], 1);
        let err = check_gradients(|t, v| Ok(t.sum(v)), &x, 1e-4).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = input(&[2], 1);
        assert!(check_gradients(|t, v| Ok(t.sum(v)), &x, 1e-2).is_err());
    }

    #[test]
    fn non_finite_probe_reported() {
        // c / (x - c) has a pole at x + h when c == h.
        let x = Tensor::from_vec(vec![0.0]);
        let f = |t: &Tape, v: Var| {
            let c = t.constant(Tensor::scalar(1e-4));
            let d = t.sub(v, c)?;
            let r = t.elementwise(ElementwiseOp::Div, c, Some(d))?;
            Ok(t.sum(r))
        };
        assert!(matches!(
            check_gradients(f, &x, 1e-4),
            Err(Error::NonFiniteProbe { .. })
        ));
    }

    #[test]
    fn every_elementwise_op() {
        use ElementwiseOp::*;
        for (k, op) in [Add, Sub, Mul, Div, Neg, Exp, Softplus, Silu, Gelu, Sqrt, Abs, Square]
            .into_iter()
            .enumerate()
        {
            let a = input(&[2, 3], 10 + k as u64);
            // Keep operands away from the kinks and poles of Div/Sqrt/Abs.
            let a = a.map(|v| if matches!(op, Sqrt | Abs) { v.abs() + 0.2 } else { v });
            let b = input(&[3], 50 + k as u64).map(|v| v.signum() * (v.abs() + 0.5));
            let err = check_gradients_multi(
                |t, v| {
                    let second = if matches!(op, Add | Sub | Mul | Div) { Some(v[1]) } else { None };
                    let y = t.elementwise(op, v[0], second)?;
                    let w = t.constant(input(&[2, 3], 99));
                    let y = t.mul(y, w)?;
                    Ok(t.sum(y))
                },
                &[a, b],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{op:?}: {err}");
        }
    }

    #[test]
    fn structural_ops() {
        let x = input(&[2, 3, 4], 3);
        let w = input(&[4, 5], 4);
        let err = check_gradients_multi(
            |t, v| {
                let g = t.constant(input(&[4], 5).map(|a| a + 1.5));
                let b = t.constant(input(&[4], 6));
                let y = t.layer_norm(v[0], g, b, 1e-5)?;
                let y = t.reverse_axis(y, 1)?;
                let y = t.permute_axis(y, 2, &[2, 0, 3, 1])?;
                let y = t.matmul(y, v[1])?;
                let y = t.transpose_last2(y)?;
                let a = t.narrow(y, 1, 0, 2)?;
                let c = t.narrow(y, 1, 2, 3)?;
                let y = t.concat(&[c, a], 1)?;
                let y = t.sum_axis(y, 2)?;
                let y = t.reshape(y, &[10])?;
                let y = t.clamp(y, -5.0, 5.0);
                let y = t.square(y);
                Ok(t.mean(y))
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn layer_norm_gain_and_bias() {
        let x = input(&[3, 5], 7);
        let g = input(&[5], 8);
        let b = input(&[5], 9);
        let err = check_gradients_multi(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let w = t.constant(input(&[3, 5], 10));
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            &[x, g, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
