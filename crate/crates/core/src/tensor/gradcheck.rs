use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Worst coordinate found by [`grad_check_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares the tape gradient of `f` with central differences
/// `(f(p+h) − f(p−h))/2h` at every coordinate of every tensor in `params`.
/// Returns `max |numeric − analytic| / max(1, |analytic|)`.
pub fn grad_check<F>(params: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_report(params, h, f).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "grad_check step must be positive");
    let mut work: Vec<Tensor> = params.iter().map(|p| p.clone().with_grad()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = work.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&work)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        coordinates: 0,
    };
    for pi in 0..work.len() {
        for j in 0..work[pi].len() {
            let original = work[pi].data()[j];
            work[pi].data_mut()[j] = original + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = original - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][j];
            let err = (numeric - a).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_param = pi;
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        let err = grad_check(&[p], 1e-5, |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            let three = tape.scale(sq, 3.0)?;
            tape.sum(three)
        })
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }
}
