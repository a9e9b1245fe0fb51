use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Denominator floor for the relative error, so entries whose true gradient
/// is (near) zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of the scalar `f(x)` with central differences
/// of step `h` and returns the maximum relative error over all entries of `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let indices: Vec<usize> = (0..x.numel()).collect();
    grad_check_entries(f, x, h, &indices)
}

/// Like [`grad_check`] but only probes the given flat indices of `x`.
pub fn grad_check_entries<T, F>(f: F, x: &Tensor<T>, h: f64, indices: &[usize]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut leaf = x.clone();
    leaf.set_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&leaf);
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(v, x.numel());

    let eval = |probe: &Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        Ok(t.scalar_value(out).as_f64())
    };

    let mut worst = 0.0f64;
    let hh = T::lit(h);
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += hh;
        let mut minus = x.clone();
        minus.data_mut()[i] -= hh;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i].as_f64(), numeric));
    }
    Ok(worst)
}
