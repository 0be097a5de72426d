//! Central finite-difference checks for graph gradients.
//!
//! The checker only ever evaluates forward passes, so it stays independent of
//! the backward rules it verifies.

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Step for central differences at 64-bit.
pub const FD_STEP: f64 = 1e-5;
/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR * max(1, |f|))` as
/// denominator, where `f` is the checked output; below that scale the central
/// difference is dominated by round-off.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, f64, f64)>,
}

impl GradCheck {
    pub fn compare(analytic: f64, numeric: f64) -> f64 {
        Self::compare_scaled(analytic, numeric, 1.0)
    }

    pub fn compare_scaled(analytic: f64, numeric: f64, output: f64) -> f64 {
        let floor = REL_FLOOR * output.abs().max(1.0);
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        (analytic - numeric).abs() / denom
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, output: f64) {
        let err = Self::compare_scaled(analytic, numeric, output);
        self.checked += 1;
        if err >= self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some((label(), analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn assert_below(&self, tol: f64) {
        assert!(self.checked > 0, "gradient check compared nothing");
        assert!(
            self.max_rel_err < tol,
            "max relative error {:.3e} >= {tol:.1e}; worst {:?}",
            self.max_rel_err,
            self.worst
        );
    }
}

/// Checks the gradient of a scalar graph output with respect to every entry of `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = build(&mut g, &vars);
    let f0 = g.value(out).item();
    let grads = g.backward(out);

    let mut report = GradCheck::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].rows(), inputs[i].cols()));
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(|| format!("input {i}[{j}]"), analytic.data()[j], numeric, f0);
        }
    }
    report
}

/// Checks parameter gradients. `entries` limits how many scalars per parameter are
/// probed (evenly strided); `None` probes all of them.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    entries: Option<usize>,
    build: F,
) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let mut g = Graph::new();
    let out = build(&mut g, store);
    let f0 = g.value(out).item();
    let grads = g.backward(out);
    let analytic: std::collections::HashMap<ParamId, Tensor<f64>> = grads
        .params()
        .into_iter()
        .map(|(id, t)| (id, t.clone()))
        .collect();

    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::inference();
        let out = build(&mut g, s);
        g.value(out).item()
    };

    let mut work = store.clone();
    let mut report = GradCheck::default();
    for &id in ids {
        let n = store.get(id).len();
        let stride = entries.map_or(1, |e| (n / e.max(1)).max(1));
        let zero = Tensor::zeros(store.get(id).rows(), store.get(id).cols());
        let a = analytic.get(&id).unwrap_or(&zero);
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(
                || format!("{}[{j}]", store.entry(id).name),
                a.data()[j],
                numeric,
                f0,
            );
        }
    }
    report
}
