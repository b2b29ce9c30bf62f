//! Central-difference verification of analytic gradients.
//!
//! The checker evaluates the loss builder once on a recording tape to obtain
//! analytic gradients and the values seen at stop-gradient nodes, then
//! re-evaluates with each parameter entry perturbed by ±h while replaying the
//! recorded stop-gradient values, so both the analytic and numeric paths
//! treat those nodes as constants.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Checks the analytic gradients of `ids` under `build` against central
/// finite differences with step `h`; entries with relative error above `tol`
/// are reported.
pub fn gradient_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let tape = Tape::recording_sg();
    let loss = build(&tape, store)?;
    tape.backward_params(loss, store)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| store.get(id).grad.clone()).collect();
    let sg_vals = tape.into_sg_record();
    store.zero_grads();
    verify_gradients(store, ids, &analytic, h, tol, &sg_vals, build)
}

/// Comparison core behind [`gradient_check`]; public so negative controls can
/// feed deliberately wrong analytic gradients.
pub fn verify_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &[Tensor],
    h: f64,
    tol: f64,
    sg_vals: &[Tensor],
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let mut report = GradCheckReport::default();
    for (slot, &id) in ids.iter().enumerate() {
        let len = store.value(id).len();
        debug_assert_eq!(len, analytic[slot].len());
        for k in 0..len {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let f_plus = eval_loss(store, sg_vals, &build)?;
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let f_minus = eval_loss(store, sg_vals, &build)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[slot].data()[k];
            let rel = relative_error(a, numeric);
            report.entries_checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > tol {
                report.failures.push(GradCheckFailure {
                    param: store.get(id).name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

fn eval_loss<F>(store: &ParamStore, sg_vals: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::replaying_sg(sg_vals.to_vec());
    let loss = build(&tape, store)?;
    Ok(tape.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_matches_at_machine_level() {
        let mut rng = crate::rng::Rng::new(4);
        let mut store = ParamStore::new();
        let w = store.add("w", rng.tensor_uniform(vec![6], -1.0, 1.0));
        let report = gradient_check(&mut store, &[w], 1e-5, 1e-7, |tape, store| {
            let vw = tape.param(store, w);
            let sq = tape.mul(vw, vw)?;
            Ok(tape.scale(tape.sum_all(sq), 0.5))
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-7);
    }

    #[test]
    fn deliberate_gradient_bug_is_reported() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![3], vec![0.4, -0.2, 0.9]).unwrap());
        let build = |tape: &Tape, store: &ParamStore| {
            let vw = tape.param(store, w);
            let sq = tape.mul(vw, vw)?;
            Ok(tape.scale(tape.sum_all(sq), 0.5))
        };
        // True gradient is w itself; corrupt one entry.
        let mut bad = store.value(w).clone();
        bad.data_mut()[1] += 0.5;
        let report = verify_gradients(&mut store, &[w], &[bad], 1e-5, 1e-4, &[], build).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].index, 1);
    }

    #[test]
    fn sg_nodes_are_held_constant_on_both_paths() {
        // loss = w * sg(w^2): analytic grad is w^2 (the frozen factor).
        // If the numeric path re-evaluated sg, the central difference would
        // see d/dw (w^3) = 3w^2 instead and the check would fail.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.7));
        let report = gradient_check(&mut store, &[w], 1e-5, 1e-6, |tape, store| {
            let vw = tape.param(store, w);
            let sq = tape.mul(vw, vw)?;
            let frozen = tape.stop_gradient(sq);
            let prod = tape.mul(vw, frozen)?;
            Ok(tape.sum_all(prod))
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
