use super::tape::{GradTape, Var};
use super::tensor::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

fn scalar_output<T: Scalar>(tape: &mut GradTape<T>, out: Var) -> Var {
    if tape.value(out).len() == 1 {
        out
    } else {
        tape.sum(out)
    }
}

fn evaluate<T, F>(f: &F, point: Tensor<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut GradTape<T>, Var) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let x = tape.constant(point);
    let out = f(&mut tape, x)?;
    let out = scalar_output(&mut tape, out);
    let v = tape.value(out).data()[0];
    if !v.is_finite() {
        return Err(TensorError::Instability(format!("non-finite objective {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of `f` at `point` against central
/// differences, coordinate by coordinate. Non-scalar outputs are summed.
/// Returns the worst relative error with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<T, F>(f: F, point: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut GradTape<T>, Var) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    let out = scalar_output(&mut tape, out);
    if !tape.value(out).is_finite() {
        return Err(TensorError::Instability("non-finite objective".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    if !analytic.is_finite() {
        return Err(TensorError::Instability("non-finite analytic gradient".into()));
    }

    let floor = T::of(1e-8);
    let two_h = step + step;
    let mut worst = T::zero();
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (evaluate(&f, plus)? - evaluate(&f, minus)?) / two_h;
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_f64(&[3, 1], &[0.5, -2.0, 3.0]).unwrap();
        let p = Tensor::from_f64(&[2, 3], &[0.1, 0.2, 0.3, -1.0, 2.0, 0.7]).unwrap();
        let err = finite_difference_check(
            |t, x| {
                let w = t.constant(w.clone());
                t.matmul(x, w)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let p = Tensor::from_f64(&[1], &[1e300]).unwrap();
        let err = finite_difference_check(
            |t, x| {
                let y = t.mul(x, x)?;
                Ok(y)
            },
            &p,
            1e-5,
        );
        assert!(matches!(err, Err(TensorError::Instability(_))));
    }
}
