use std::collections::HashMap;

use super::graph::{Bindings, Graph, GraphError, NodeId};
use super::tensor::Tensor;
use crate::mask::SegMask;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Leaf name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compare reverse-mode gradients of every differentiable leaf against central
/// differences with the given step.
pub fn grad_check(
    graph: &mut Graph<f64>,
    loss: NodeId,
    bindings: &Bindings<f64>,
    step: f64,
) -> Result<GradCheckReport, GraphError> {
    grad_check_coords(graph, loss, bindings, step, |_, _| true)
}

/// Like [`grad_check`], restricted to at most `per_leaf` evenly strided
/// coordinates of each leaf (offset by `offset`), for graphs too costly to
/// perturb exhaustively.
pub fn grad_check_strided(
    graph: &mut Graph<f64>,
    loss: NodeId,
    bindings: &Bindings<f64>,
    step: f64,
    per_leaf: usize,
    offset: usize,
) -> Result<GradCheckReport, GraphError> {
    let per_leaf = per_leaf.max(1);
    grad_check_coords(graph, loss, bindings, step, |numel, idx| {
        let stride = numel.div_ceil(per_leaf);
        idx % stride == offset % stride
    })
}

fn grad_check_coords(
    graph: &mut Graph<f64>,
    loss: NodeId,
    bindings: &Bindings<f64>,
    step: f64,
    select: impl Fn(usize, usize) -> bool,
) -> Result<GradCheckReport, GraphError> {
    graph.forward(bindings)?;
    let analytic = graph.backward(loss)?;

    let mut owned: HashMap<String, Tensor<f64>> =
        bindings.tensor_entries().map(|(k, v)| (k.clone(), (*v).clone())).collect();
    let labels: Vec<(String, &[SegMask])> = bindings.label_entries().map(|(k, v)| (k.clone(), *v)).collect();

    let mut eval = |owned: &HashMap<String, Tensor<f64>>| -> Result<f64, GraphError> {
        let mut b = Bindings::new();
        for (k, v) in owned {
            b.set(k.clone(), v);
        }
        for (k, v) in &labels {
            b = b.labels(k.clone(), v);
        }
        graph.eval_scalar(&b, loss)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for (name, grad) in &analytic {
        for idx in (0..grad.numel()).filter(|&i| select(grad.numel(), i)) {
            let orig = owned[name].data()[idx];
            owned.get_mut(name).unwrap().data_mut()[idx] = orig + step;
            let plus = eval(&owned)?;
            owned.get_mut(name).unwrap().data_mut()[idx] = orig - step;
            let minus = eval(&owned)?;
            owned.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    // leave the graph holding values for the unperturbed bindings
    graph.forward(bindings)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", true);
        let x = g.input("x");
        let y = g.matmul(a, x);
        let s = g.scale(y, 0.5);
        let loss = g.sum(s);
        let av = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.5);
        let xv = Tensor::from_fn(&[3, 2], |i| (i as f64).sin());
        let b = Bindings::new().tensor("a", &av).tensor("x", &xv);
        let r = grad_check(&mut g, loss, &b, 1e-4).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 6);
    }
}
