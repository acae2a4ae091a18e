//! Central finite-difference check of tape gradients (f64 only).

use super::tape::{Graph, NodeId};
use super::Tensor;
use crate::error::{Error, Result};

/// Compare analytic gradients of a scalar-valued taped function against
/// central finite differences; returns the worst relative error.
///
/// `f` receives a fresh graph and the leaf ids of `inputs` (in order) and
/// must return a scalar output node.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    gradcheck_with_skip(f, inputs, eps, |_, _| false)
}

/// As [`gradcheck`], but elements with `skip(input_index, elem_index)` true
/// are excluded from the comparison (nondifferentiable-point policy).
pub fn gradcheck_with_skip<F, S>(f: F, inputs: &[Tensor<f64>], eps: f64, skip: S) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    S: Fn(usize, usize) -> bool,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("gradcheck eps {eps} outside [1e-6, 1e-3]")));
    }

    let run = |tensors: &[Tensor<f64>]| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> =
            tensors.iter().map(|t| g.leaf(t.clone().requires_grad(true))).collect();
        let out = f(&mut g, &ids)?;
        if g.value(out).len() != 1 {
            return Err(Error::Shape("gradcheck: forward output must be scalar".into()));
        }
        let loss = g.value(out).item()?;
        let grads = g.backward(out)?;
        let gs = ids.iter().map(|id| grads.get(*id).cloned()).collect();
        Ok((loss, gs))
    };

    let (_, analytic) = run(inputs)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            if skip(ti, ei) {
                continue;
            }
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let (fp, _) = run(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let (fm, _) = run(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].as_ref().map(|g| g.data()[ei]).unwrap_or(0.0);
            let err = super::rel_err(a, numeric, 1e-4);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
