use std::collections::HashMap;

use super::graph::{Graph, NodeId};
use super::GraphError;

/// Max elementwise relative error between `grad` and central differences.
///
/// Each `wrt` node must be a leaf; it is perturbed by `±epsilon` one entry at
/// a time and the graph replayed. The relative error of an entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradient(graph: &Graph, output: NodeId, wrt: &[NodeId], epsilon: f64) -> Result<f64, GraphError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(GraphError::BadEpsilon(epsilon));
    }
    if let Some(w) = wrt.iter().find(|w| !graph.is_leaf(**w)) {
        return Err(GraphError::NotLeaf { node: w.0 });
    }
    let mut scratch = graph.clone();
    let analytic = scratch.grad_values(output, wrt)?;

    let mut worst = 0.0f64;
    for (w, grad) in wrt.iter().zip(&analytic) {
        let base = graph.value(*w).clone();
        for i in 0..base.len() {
            let eval = |delta: f64| -> Result<f64, GraphError> {
                let mut v = base.clone();
                v.data_mut()[i] += delta;
                let vals = graph.forward(&HashMap::from([(*w, v)]))?;
                Ok(vals[output.0].item())
            };
            let numeric = (eval(epsilon)? - eval(-epsilon)?) / (2.0 * epsilon);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
