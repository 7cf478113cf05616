use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)` over
    /// the input. The floor keeps identically-zero gradients (round-off on
    /// both sides) from reading as a total mismatch.
    pub max_rel_deviation: f64,
    pub max_abs_deviation: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_deviation <= self.tol
    }
}

/// Checks the gradient of a scalar-valued `f` at `x`.
pub fn check_gradients<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut reports = check_gradients_multi(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        step,
        tol,
    )?;
    Ok(reports.remove(0))
}

/// Checks the gradient of `f` with respect to each input tensor separately.
/// Returns one report per input, in order.
pub fn check_gradients_multi<F>(f: F, xs: &[Tensor], step: f64, tol: f64) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data()[0])
    };

    let mut reports = Vec::with_capacity(xs.len());
    let mut probe = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        let analytic = grads
            .get(vars[which])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut numeric = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        reports.push(compare(analytic, numeric, tol));
    }
    Ok(reports)
}

const SCALE_FLOOR: f64 = 1e-8;

fn compare(analytic: Tensor, numeric: Tensor, tol: f64) -> GradCheckReport {
    let mut max_abs = 0.0;
    let mut worst = 0;
    let mut scale: f64 = 0.0;
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let d = (a - n).abs();
        if d > max_abs {
            max_abs = d;
            worst = i;
        }
        scale = scale.max(a.abs()).max(n.abs());
    }
    let rel = max_abs / scale.max(SCALE_FLOOR);
    GradCheckReport {
        max_rel_deviation: rel,
        max_abs_deviation: max_abs,
        worst_index: worst,
        analytic,
        numeric,
        tol,
    }
}
