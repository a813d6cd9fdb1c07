use super::{Tape, Tensor, Var};
use crate::error::TensorError;

/// Compares the tape gradient of a scalar function against central finite
/// differences (at `h` and `h/2`, Richardson-extrapolated). Returns the maximum over all coordinates of
/// `|analytic - numeric| / (|analytic| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input variant of [`finite_diff_check`]; every input is perturbed.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    if h <= 0.0 {
        return Err(TensorError::Contract(format!("step must be positive, got {h}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        scalar_of(out)
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t)).collect();
    let root = f(&tape, &vars)?;
    scalar_of(root)?;
    let grads = tape.backward(root)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[which].data()[i];
            let mut central = |step: f64| -> Result<f64, TensorError> {
                probe[which].data_mut()[i] = orig + step;
                let up = eval(&probe)?;
                probe[which].data_mut()[i] = orig - step;
                let down = eval(&probe)?;
                probe[which].data_mut()[i] = orig;
                Ok((up - down) / (2.0 * step))
            };
            let coarse = central(h)?;
            let fine = central(h / 2.0)?;
            // Richardson extrapolation cancels the h² term of the central
            // difference, so moderate steps keep rounding noise small.
            let numeric = (4.0 * fine - coarse) / 3.0;
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-12));
        }
    }
    Ok(worst)
}

fn scalar_of(v: Var<'_>) -> Result<f64, TensorError> {
    let data = v.data();
    if data.len() != 1 {
        return Err(TensorError::Contract(format!(
            "gradient check needs a scalar function, got {} values",
            data.len()
        )));
    }
    Ok(data[0])
}
