//! Central finite-difference oracle for tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Worst element found by [`grad_check_many`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

fn scalar_of(tape: &Tape, out: Var) -> Result<f64> {
    tape.value(out).item().ok_or_else(|| {
        TensorError::Usage(format!(
            "grad_check needs a scalar function, got {:?}",
            tape.shape(out)
        ))
    })
}

fn evaluate<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)
}

/// Compares tape gradients of `f` with respect to every element of `xs`
/// against central differences with the given `step`.
///
/// The relative error of one element is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::Usage(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        elements: 0,
    };
    let mut probe = xs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .expect("param leaf has a gradient")
            .data()
            .to_vec();
        for (e, &a) in analytic.iter().enumerate() {
            let original = probe[t].data()[e];
            probe[t].data_mut()[e] = original + step;
            let plus = evaluate(&f, &probe)?;
            probe[t].data_mut()[e] = original - step;
            let minus = evaluate(&f, &probe)?;
            probe[t].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.elements += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (t, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)?;
    Ok(report.max_rel_error)
}
