use super::graph::{Graph, GraphError, NodeId};
use super::tensor::Tensor;

/// Rebuildable scalar function of a fixed list of leaf tensors.
///
/// The builder receives fresh leaf values every call and must return the
/// scalar loss node plus the leaf node ids, in the same order as `base`.
pub type BuildFn<'a> =
    &'a dyn Fn(&mut Graph, &[Tensor]) -> Result<(NodeId, Vec<NodeId>), GraphError>;

/// Compare the analytic gradient of one leaf against central finite
/// differences.
///
/// Returns the max over elements of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check(
    base: &[Tensor],
    build: BuildFn<'_>,
    param: usize,
    epsilon: f64,
) -> Result<f64, GraphError> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut graph = Graph::new();
    let (loss, leaves) = build(&mut graph, base)?;
    graph.backward(loss)?;
    let analytic = graph.grad(leaves[param]).to_vec();

    let eval = |tensors: &[Tensor]| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let (l, _) = build(&mut g, tensors)?;
        Ok(g.value(l).as_scalar().expect("loss is scalar"))
    };

    let mut max_rel = 0.0f64;
    for e in 0..base[param].numel() {
        let mut plus = base.to_vec();
        plus[param].data_mut()[e] += epsilon;
        let mut minus = base.to_vec();
        minus[param].data_mut()[e] -= epsilon;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * epsilon);
        let rel = (analytic[e] - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
