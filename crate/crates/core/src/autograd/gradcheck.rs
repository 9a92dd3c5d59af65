use super::{Tape, Tensor, TensorError, Var};

/// Largest relative disagreement between the tape gradient of `f` at
/// `point` and its central finite difference with the given `step`.
///
/// `f` builds a single-element output from its input on a fresh tape. The
/// relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    check_with(f, point, step, Stencil::Central)
}

/// [`finite_diff_check`] with the five-point stencil
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, whose `O(h⁴)`
/// truncation error allows a larger step and so less round-off. Use it
/// when deep compositions produce gradients many orders below the loss.
pub fn finite_diff_check_five_point<F>(f: F, point: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    check_with(f, point, step, Stencil::FivePoint)
}

#[derive(Clone, Copy)]
enum Stencil {
    Central,
    FivePoint,
}

fn check_with<F>(f: F, point: &Tensor, step: f64, stencil: Stencil) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    if !(step > 0.0) {
        return Err(TensorError::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone())?;
    let y = f(&mut tape, x)?;
    let analytic = tape.backward_scalar(y)?.take(x).expect("input is a trainable leaf");

    let eval = |p: Tensor| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let x = t.constant(p)?;
        let y = f(&mut t, x)?;
        let v = t.value(y).item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0_f64;
    for i in 0..point.numel() {
        let at = |d: f64| {
            let mut p = point.clone();
            p.data_mut()[i] += d;
            eval(p)
        };
        let numeric = match stencil {
            Stencil::Central => (at(step)? - at(-step)?) / (2.0 * step),
            Stencil::FivePoint => {
                (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?)) / (12.0 * step)
            }
        };
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
