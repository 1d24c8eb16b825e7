use std::collections::BTreeMap;

use super::ParamStore;

pub const FD_STEP: f64 = 1e-5;

/// |a - n| / max(1, |a|, |n|)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per parameter block.
    pub max_rel_error: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient returned by `f` against central differences
/// with step [`FD_STEP`] on every entry of every block in `params`.
///
/// `f` maps parameters to `(loss, gradient)`; the gradient store must carry a
/// block for every block of `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, tolerance: f64) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (f64, ParamStore),
{
    let (_, analytic) = f(params);
    let mut probe = params.clone();
    let mut max_rel_error = BTreeMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let grad = analytic
            .get(&name)
            .unwrap_or_else(|| panic!("analytic gradient missing block {name:?}"))
            .as_standard_layout()
            .into_owned();
        let grad = grad.as_slice().expect("standard layout");
        let n = params.get(&name).unwrap().len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let original = params.get(&name).unwrap().as_slice().unwrap()[i];
            set(&mut probe, &name, i, original + FD_STEP);
            let (plus, _) = f(&probe);
            set(&mut probe, &name, i, original - FD_STEP);
            let (minus, _) = f(&probe);
            set(&mut probe, &name, i, original);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad[i];
            worst = worst.max(relative_error(a, numeric));
        }
        max_rel_error.insert(name, worst);
    }
    let passed = max_rel_error.values().all(|&e| e < tolerance);
    GradCheckReport {
        max_rel_error,
        tolerance,
        passed,
    }
}

fn set(store: &mut ParamStore, name: &str, index: usize, value: f64) {
    let block = store.get_mut(name).unwrap();
    block.as_slice_mut().expect("standard layout")[index] = value;
}
