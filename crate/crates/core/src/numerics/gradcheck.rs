//! Central-difference gradient oracle.

use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Default step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic − numeric| / (|analytic| + 1e-8)`, maximized over coordinates.
pub fn max_rel_err<T: Scalar>(analytic: &[T], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a.as_f64();
            (a - n).abs() / (a.abs() + 1e-8)
        })
        .fold(0.0, f64::max)
}

/// Central differences of `eval` at the listed coordinates of `x`.
pub fn central_difference<T: Scalar>(
    mut eval: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::c(h);
        let fp = eval(&probe)?.as_f64();
        probe.data_mut()[i] = orig - T::c(h);
        let fm = eval(&probe)?.as_f64();
        probe.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Checks the tape gradient of the scalar function `f` at `x` against
/// central differences over every coordinate.
pub fn finite_diff_check<T: Scalar>(
    f: impl Fn(&mut Tape<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    h: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).expect("leaf requires grad").to_vec();
    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = central_difference(
        |p| {
            let mut t = Tape::new();
            let v = t.constant(p.clone());
            let y = f(&mut t, v)?;
            Ok(t.scalar(y))
        },
        x,
        &coords,
        h,
    )?;
    Ok(max_rel_err(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_at_three() {
        let x = Tensor::<f64>::full(&[1, 1], 3.0);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[6.0]);
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }
}
