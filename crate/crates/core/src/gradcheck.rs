//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

/// Relative error with a small absolute floor so that vanishing gradients
/// do not blow up the ratio.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a graph whose parameter leaves are the `inputs` (in order)
/// and returns the scalar output.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("input{i}"), t.clone()))
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).iter().sum())
    };

    let analytic = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
    };
    for (input_idx, &id) in ids.iter().enumerate() {
        for elem in 0..store.get(id).numel() {
            let orig = store.get(id).data()[elem];
            store.get_mut(id).data_mut()[elem] = orig + FD_STEP;
            let plus = eval(&store)?;
            store.get_mut(id).data_mut()[elem] = orig - FD_STEP;
            let minus = eval(&store)?;
            store.get_mut(id).data_mut()[elem] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(id)[elem];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((input_idx, elem, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
