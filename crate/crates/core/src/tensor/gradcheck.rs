use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences with step `h`.
///
/// Returns the largest `|analytic − numeric| / max(1, |numeric|)` over all
/// coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; the error is the maximum over
/// every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let y = f(&tape, &vars)?.item()?;
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NumericDomain {
                op: "grad_check",
                detail: format!("function value {y} is not finite"),
            })
        }
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|v| tape.param(v.clone())).collect();
        let y = f(&tape, &vars)?;
        if !y.item()?.is_finite() {
            return Err(Error::NumericDomain {
                op: "grad_check",
                detail: "function value is not finite".into(),
            });
        }
        tape.backward(y)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let orig = input.data()[k];
            probe[which].data_mut()[k] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[k] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[which].data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
