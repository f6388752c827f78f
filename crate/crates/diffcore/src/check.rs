//! Finite-difference gradient checking.
//!
//! The reference gradient is a central difference with the same graph
//! rebuilt at perturbed inputs, so any stochastic constants must be fixed by
//! the caller (rebuild with the same draws). Relative error uses the scale
//! max(|analytic|, |numeric|, floor) so near-zero gradients are compared
//! absolutely at the floor.

use crate::error::DiffError;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_gradient<F>(
    mut f: F,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>, DiffError>
where
    F: FnMut(&[f64]) -> Result<f64, DiffError>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe)?;
        probe[i] = x[i] - step;
        let lo = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}

/// Compare analytic gradients of a scalar-valued graph against central
/// differences for every element of every input.
///
/// `build` receives a fresh graph plus leaf ids for `inputs` (in order) and
/// returns the scalar loss node.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor],
    step: f64,
) -> Result<CheckReport, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let eval = |tensors: &[Tensor]| -> Result<(f64, Vec<Tensor>), DiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors
            .iter()
            .map(|t| g.leaf(t.clone()))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut g, &ids)?;
        let v = g.value(loss).item()?;
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor> = ids
            .iter()
            .map(|&id| grads.take(id).expect("leaf gradient present"))
            .collect();
        Ok((v, gs))
    };

    let (_, analytic) = eval(inputs)?;

    let mut report = CheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + step;
            let hi = eval(&work)?.0;
            work[k].data_mut()[i] = x0 - step;
            let lo = eval(&work)?.0;
            work[k].data_mut()[i] = x0;
            let numeric = (hi - lo) / (2.0 * step);
            let a = analytic[k].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (k, i);
            }
            report.max_abs_err = report.max_abs_err.max(abs);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_finite_difference_of_square() {
        let f = |x: &[f64]| Ok(x[0] * x[0]);
        let g = finite_difference_gradient(f, &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn test_check_gradients_catches_product_rule() {
        let inputs = [Tensor::vector(vec![0.5, -1.25, 2.0])];
        let report = check_gradients(
            |g, ids| {
                let sq = g.square(ids[0])?;
                let t = g.tanh(sq)?;
                g.sum_all(t)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }
}
