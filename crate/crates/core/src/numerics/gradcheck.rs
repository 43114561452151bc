use crate::error::Result;

use super::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient returned by `f` against central
/// differences at `point`. `f` maps parameters to `(value, gradient)`.
///
/// Error per coordinate: `|a - n| / (|a| + |n| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(point)?;
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let (fp, _) = f(&x)?;
        x[i] = orig - h;
        let (fm, _) = f(&x)?;
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if i == 0 || err > report.max_rel_err {
            report = GradCheckReport {
                max_rel_err: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Adapts a tape-building function of one parameter tensor into a closure
/// for [`grad_check`].
pub fn tape_closure<B>(shape: Vec<usize>, build: B) -> impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>
where
    B: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    move |x: &[f64]| {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(shape.clone(), x.to_vec())?)?;
        let loss = build(&mut tape, p)?;
        let g = tape.backward(loss)?;
        Ok((tape.value(loss).item(), g.get_or_zeros(p).into_data()))
    }
}
