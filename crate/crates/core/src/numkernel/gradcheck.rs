use super::params::{evaluate, evaluate_with_gradients};
use super::tape::{Tape, Var};
use super::ParamStore;
use crate::error::{Error, Result};

/// One scalar parameter entry whose analytic and numeric gradients disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest relative error per parameter, in name order.
    pub max_rel_error: Vec<(String, f64)>,
    pub failures: Vec<GradMismatch>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of every scalar parameter entry against the
/// central difference `(f(w+h) − f(w−h)) / 2h`.
pub fn grad_check<F>(store: &ParamStore, objective: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(h > 1e-8 && h <= 1e-3) {
        return Err(Error::config(format!("finite-difference step {h} outside (1e-8, 1e-3]")));
    }
    let mut analytic_store = store.clone();
    evaluate_with_gradients(&mut analytic_store, &objective)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        let analytic = analytic_store.grad(&name).expect("known name").clone();
        let mut worst: f64 = 0.0;
        for idx in 0..analytic.len() {
            let original = probe.value(&name).expect("known name").as_slice()[idx];
            probe.value_mut(&name).unwrap().as_mut_slice()[idx] = original + h;
            let plus = evaluate(&probe, &objective)?;
            probe.value_mut(&name).unwrap().as_mut_slice()[idx] = original - h;
            let minus = evaluate(&probe, &objective)?;
            probe.value_mut(&name).unwrap().as_mut_slice()[idx] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_slice()[idx];
            let err = relative_error(a, numeric);
            worst = worst.max(err);
            report.entries_checked += 1;
            if err > tol {
                report.failures.push(GradMismatch {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
        report.max_rel_error.push((name, worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Matrix;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.1]]));
        s.insert("b", Matrix::from_rows(&[[0.5, 0.25]]));
        s
    }

    #[test]
    fn constant_objective_reports_zero() {
        let report = grad_check(&store(), |t| Ok(t.constant(Matrix::scalar(2.0))), 1e-5, 1e-4).unwrap();
        assert!(report.passed());
        assert_eq!(report.worst(), 0.0);
        assert_eq!(report.entries_checked, 6);
    }

    #[test]
    fn linear_objective_matches_exactly() {
        let report = grad_check(
            &store(),
            |t| {
                let a = t.param("a");
                let b = t.param("b");
                let sa = t.sum(a);
                let sb = t.sum(b);
                Ok(t.add(sa, sb))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.worst() < 1e-9, "{}", report.worst());
    }

    #[test]
    fn nonlinear_composite_passes() {
        let report = grad_check(
            &store(),
            |t| {
                let a = t.param("a");
                let b = t.param("b");
                let h = t.matmul(b, a);
                let h = t.tanh(h);
                let n = t.row_normalize(a);
                let s = t.matmul_t(n, n);
                let s = t.scale(s, 5.0);
                let l1 = t.diag_softmax_xent(s);
                let e = t.exp(h);
                let l2 = t.sum(e);
                Ok(t.add(l1, l2))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let f = |t: &mut Tape<'_>| Ok(t.constant(Matrix::scalar(0.0)));
        assert!(grad_check(&store(), f, 1e-2, 1e-4).is_err());
        assert!(grad_check(&store(), f, 1e-9, 1e-4).is_err());
    }
}
