//! Central finite-difference oracle for analytic gradients.

use super::tensor::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Absolute floor in the relative-error denominator.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the reverse-mode gradient of `f` against central differences
/// for every element of every parameter. `f` must be deterministic.
///
/// `max_per_param` limits the number of elements checked per tensor
/// (evenly spaced); `None` checks all of them.
pub fn finite_diff_check(
    f: &dyn Fn() -> Result<Tensor>,
    params: &[(String, Tensor)],
    h: f64,
    tol: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    for (_, p) in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, p) in params {
        let n = p.numel();
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; n]);
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut entry = GradCheckEntry {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in (0..n).step_by(stride) {
            let orig = p.data()[i];
            p.update_data(|d| d[i] = orig + h);
            let fp = no_grad(f)?.item();
            p.update_data(|d| d[i] = orig - h);
            let fm = no_grad(f)?.item();
            p.update_data(|d| d[i] = orig);
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            entry.checked += 1;
            if err > entry.max_rel_err || !err.is_finite() {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic = analytic[i];
                entry.numeric = numeric;
            }
        }
        entry.passed = entry.max_rel_err.is_finite() && entry.max_rel_err <= tol;
        entries.push(entry);
    }
    for (_, p) in params {
        p.zero_grad();
    }
    Ok(GradCheckReport { tol, entries })
}
