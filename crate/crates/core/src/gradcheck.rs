//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::exec;
use crate::tensor::{Tape, Tensor, Var};

/// Comparison result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    /// Element index where `max_rel_error` occurs.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Elements where either gradient is not finite.
    pub non_finite: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.non_finite.is_empty() && p.max_rel_error <= self.tol)
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compare autodiff gradients of the scalar function `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, element by element.
pub fn fd_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + Send,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut checks = Vec::with_capacity(params.len());
    for (pi, (p, v)) in params.iter().zip(&vars).enumerate() {
        let analytic = tape.grad_tensor(*v).into_data();
        let numeric = exec::map_indexed(p.len(), |e| -> Result<f64> {
            let mut shifted = params.to_vec();
            shifted[pi].data_mut()[e] = p.data()[e] + h;
            let plus = evaluate(&f, &shifted)?;
            shifted[pi].data_mut()[e] = p.data()[e] - h;
            let minus = evaluate(&f, &shifted)?;
            Ok((plus - minus) / (2.0 * h))
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let mut check = ParamCheck {
            max_rel_error: 0.0,
            worst: 0,
            analytic,
            numeric,
            non_finite: Vec::new(),
        };
        for e in 0..p.len() {
            let (a, b) = (check.analytic[e], check.numeric[e]);
            if !a.is_finite() || !b.is_finite() {
                check.non_finite.push(e);
                continue;
            }
            let r = rel_error(a, b);
            if r > check.max_rel_error {
                check.max_rel_error = r;
                check.worst = e;
            }
        }
        checks.push(check);
    }
    Ok(FdReport {
        params: checks,
        tol,
    })
}
