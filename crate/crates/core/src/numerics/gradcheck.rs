use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Denominator floor for relative errors of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Set when the one-sided differences disagree, i.e. `x` sits on a kink
    /// (clamp edge, `|·|` corner) and no unique derivative exists.
    pub excluded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    /// Largest relative error among non-excluded entries.
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn excluded(&self) -> impl Iterator<Item = &GradEntry> {
        self.entries.iter().filter(|e| e.excluded)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().filter(|e| !e.excluded).max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn eval(f: &impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    ensure!(tape.value(out).len() == 1, Shape, "gradient check needs a scalar function");
    Ok(tape.value(out).data()[0])
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// finite differences of step `h`.
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport> {
    ensure!(h > 0.0, InvalidArgument, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let f0 = tape.value(out).data()[0];
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut entries = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * h);
        if a.is_nan() || numeric.is_nan() {
            return Err(Error::Numerical(format!("NaN gradient at element {i} (analytic {a}, numeric {numeric})")));
        }
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        let kink = (forward - backward).abs() > 1e-3 * forward.abs().max(backward.abs()).max(REL_FLOOR);
        entries.push(GradEntry { index: i, analytic: a, numeric, rel_err, excluded: rel_err >= tol && kink });
    }
    let max_rel_err = entries.iter().filter(|e| !e.excluded).map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_err, tol, passed: max_rel_err < tol })
}
