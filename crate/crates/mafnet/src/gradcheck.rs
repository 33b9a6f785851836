//! Finite-difference verification of analytic gradients.
//!
//! The checker rebuilds a user-supplied graph twice per coordinate (central
//! differences) in double precision and compares against the analytic
//! backward pass. It is part of the public surface so integration tests can
//! drive the same machinery the unit tests use.

use crate::graph::{Graph, NodeId, ParamStore};
use crate::tensor::Tensor;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of scalar coordinates compared (parameters + inputs).
    pub coords: usize,
    /// Largest relative error seen.
    pub max_rel_err: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct the same expression every call from the given
/// store and input nodes; its result is summed to a scalar loss if it is
/// not one already. Gradients are checked for every parameter coordinate
/// and every input coordinate.
///
/// The relative error denominator is floored at `1e-3` so coordinates whose
/// gradient legitimately vanishes (dead activations) compare absolutely
/// instead of dividing by zero.
pub fn check_gradients(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    step: f64,
    build: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[NodeId]) -> NodeId,
) -> GradCheckReport {
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = build(&mut g, store, &ids);
        let loss = if g.value(out).numel() == 1 {
            out
        } else {
            g.sum_all(out)
        };
        g.value(loss).item()
    };

    // Analytic pass.
    store.zero_grads();
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, store, &ids);
    let loss = if g.value(out).numel() == 1 {
        out
    } else {
        g.sum_all(out)
    };
    let grads = g.backward(loss);
    let input_grads: Vec<Tensor<f64>> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
        })
        .collect();
    let mut analytic_params: Vec<Tensor<f64>> = Vec::new();
    {
        let mut probe = store.clone();
        probe.zero_grads();
        g.accumulate_param_grads(&grads, &mut probe);
        for idx in 0..probe.len() {
            analytic_params.push(probe.grad(idx).clone());
        }
    }

    let mut report = GradCheckReport {
        coords: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let note = |report: &mut GradCheckReport, ana: f64, num: f64, loc: String| {
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-3);
        report.coords += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = format!("{loc}: analytic {ana} vs numeric {num}");
        }
    };

    for idx in 0..store.len() {
        for j in 0..store.value(idx).numel() {
            let orig = store.value(idx).data()[j];
            store.value_mut(idx).data_mut()[j] = orig + step;
            let plus = eval(store, inputs);
            store.value_mut(idx).data_mut()[j] = orig - step;
            let minus = eval(store, inputs);
            store.value_mut(idx).data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * step);
            let loc = format!("param {}[{j}]", store.name(idx));
            note(&mut report, analytic_params[idx].data()[j], num, loc);
        }
    }

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + step;
            let plus = eval(store, &work);
            work[ti].data_mut()[j] = orig - step;
            let minus = eval(store, &work);
            work[ti].data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * step);
            let loc = format!("input {ti}[{j}]");
            note(&mut report, input_grads[ti].data()[j], num, loc);
        }
    }

    report
}
