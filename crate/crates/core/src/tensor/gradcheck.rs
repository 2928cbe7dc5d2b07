use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// max over elements of |a - n| / max(1, |a|, |n|)
    pub max_rel_error: f64,
    pub worst_index: usize,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item())
}

/// Central-difference gradient of a scalar function of `x`.
pub fn central_difference<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compare the reverse-mode gradient of `f` at `x` with central differences.
///
/// `f` records its computation on the supplied tape, starting from the
/// variable holding `x`, and returns a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let numeric = central_difference(&f, x, eps)?;

    let (mut max_rel_error, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
    })
}
