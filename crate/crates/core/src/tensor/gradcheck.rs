use super::{Graph, NodeId, Tensor, TensorMap};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|a − n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    pub worst_leaf: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Invalid(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Checks the gradient of a scalar graph function `f` of one tensor input at
/// `point`. `f` receives the graph and the input leaf and returns the output.
pub fn gradient_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let x = g.leaf("x", point.shape())?;
    let out = f(&mut g, x)?;
    let mut bindings = TensorMap::new();
    bindings.insert("x".into(), point.clone().with_grad());
    Ok(check_graph_gradients(&g, &bindings, out, epsilon, None)?.max_rel_error)
}

/// Checks gradients of `output` against every `requires_grad` binding.
///
/// With `max_coords_per_leaf`, large leaves are checked at evenly spaced
/// coordinates instead of exhaustively.
pub fn check_graph_gradients(
    graph: &Graph,
    bindings: &TensorMap,
    output: NodeId,
    epsilon: f64,
    max_coords_per_leaf: Option<usize>,
) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    let ev = graph.evaluate(bindings)?;
    let base = ev.value(output).item();
    if !base.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    let grads = graph.backward(&ev, output)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_leaf: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = bindings.clone();
    for (name, grad) in &grads {
        let n = grad.numel();
        let indices: Vec<usize> = match max_coords_per_leaf {
            Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
            _ => (0..n).collect(),
        };
        for idx in indices {
            let orig = bindings[name].data()[idx];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.get_mut(name).expect("bound leaf").data_mut()[idx] = v;
                let y = graph.evaluate(&probe)?.value(output).item();
                if !y.is_finite() {
                    return Err(Error::NonFinite { index: idx });
                }
                Ok(y)
            };
            let plus = eval_at(orig + epsilon)?;
            let minus = eval_at(orig - epsilon)?;
            eval_at(orig)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grad.data()[idx];
            if !analytic.is_finite() {
                return Err(Error::NonFinite { index: idx });
            }
            let e = rel_error(analytic, numeric);
            report.checked += 1;
            if report.checked == 1 || e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_leaf = name.clone();
                report.worst_index = idx;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
