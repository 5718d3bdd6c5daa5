//! Central finite-difference gradient verification.

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps gradients that are
/// zero up to round-off from reporting huge relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` with central differences of `loss` at `indices`
/// (all parameters when `None`).
pub fn finite_difference_check(
    params: &[f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
    indices: Option<&[usize]>,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> FdReport {
    assert_eq!(params.len(), analytic.len());
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut p = params.to_vec();
    let mut report = FdReport { checked: 0, max_rel_error: 0.0, worst_index: None, worst_analytic: 0.0, worst_numeric: 0.0 };
    for &i in idx {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric, floor);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let params = [1.0, -2.0, 0.5];
        let grad: Vec<f64> = params.iter().map(|x| 2.0 * x).collect();
        let r = finite_difference_check(&params, &grad, 1e-5, 1e-8, None, |p| p.iter().map(|x| x * x).sum());
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let wrong = [2.0, -4.0, 2.0];
        let r = finite_difference_check(&params, &wrong, 1e-5, 1e-8, None, |p| p.iter().map(|x| x * x).sum());
        assert_eq!(r.worst_index, Some(2));
        assert!(r.max_rel_error > 0.4);
    }
}
