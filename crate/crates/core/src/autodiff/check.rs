use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Every `(analytic, numeric)` pair, in input then coordinate order.
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    /// Per-coordinate `|a − d| ≤ atol + rtol·max(|a|, |d|)`.
    pub fn within(&self, rtol: f64, atol: f64) -> bool {
        self.pairs.iter().all(|&(a, d)| (a - d).abs() <= atol + rtol * a.abs().max(d.abs()))
    }
}

/// Compares tape gradients of a scalar function against central differences.
///
/// Uses the fourth-order stencil `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`
/// with `h = eps`. Relative error per coordinate is `|a − d| / (max(|a|, |d|) + 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Shape(format!("grad_check needs a scalar, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite("function value at the base point".into()));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, pairs: Vec::new() };
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.data(v);
        for j in 0..inputs[i].len() {
            let orig = xs[i].data()[j];
            let mut at = |h: f64| -> Result<f64> {
                xs[i].data_mut()[j] = orig + h;
                eval(&xs)
            };
            let (fp1, fm1, fp2, fm2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            xs[i].data_mut()[j] = orig;
            let numeric = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * eps);
            let a = analytic[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of input {i} at coordinate {j}")));
            }
            report.pairs.push((a, numeric));
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-8);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
