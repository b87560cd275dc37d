use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients with central finite differences.
///
/// `build` receives a fresh graph and one trainable leaf per entry of
/// `params` (same order) and must return a scalar loss node. Each
/// coordinate is perturbed by ±`eps` and the numeric derivative
/// `(f(x+eps) - f(x-eps)) / (2 eps)` is compared with the analytic one.
///
/// Returns the maximum relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(mut build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("grad_check eps must lie in (0, 1e-2], got {eps}")));
    }

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| g.grad(id).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut eval = |work: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = work.iter().map(|p| g.leaf(p.clone(), true)).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).data()[0])
    };

    let mut worst = 0.0f64;
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
