//! Central finite-difference verification of analytic gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Indices to probe in a tensor of `n` elements: all of them, or an evenly
/// strided subset of `max_coords` when `n` is larger.
fn sample_coords(n: usize, max_coords: usize) -> Vec<usize> {
    if n <= max_coords {
        (0..n).collect()
    } else {
        (0..max_coords).map(|i| i * n / max_coords).collect()
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::pre("grad_check", format!("function must be scalar, got {:?}", t.shape())));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(y)
}

/// Compares the analytic gradient of `f` with respect to each tensor in
/// `inputs` against central differences. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over the probed coordinates.
///
/// `f` must be deterministic: it is re-run with a fresh graph (built by
/// `make_graph`) for every probe.
pub fn grad_check<F>(inputs: &[Tensor], max_coords: usize, make_graph: impl Fn() -> Graph, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = make_graph();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        scalar_of(&g, y)
    };

    let mut g = make_graph();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    scalar_of(&g, y)?;
    g.backward(y)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => alloc::vec![0.0; inputs[k].numel()],
        };
        for i in sample_coords(inputs[k].numel(), max_coords) {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + GRAD_CHECK_STEP;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - GRAD_CHECK_STEP;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * GRAD_CHECK_STEP);
            let err = libm::fabs(analytic[i] - numeric) / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Like [`grad_check`] but differentiates with respect to the parameters of
/// `store`. At most `max_coords` coordinates are probed per parameter.
pub fn grad_check_params<F>(
    store: &mut ParameterStore,
    max_coords: usize,
    make_graph: impl Fn() -> Graph,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = make_graph();
        let y = f(&mut g, s)?;
        scalar_of(&g, y)
    };

    store.zero_grad();
    let mut g = make_graph();
    let y = f(&mut g, store)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    g.accumulate_param_grads(store);

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let analytic = store.grad(id).data().to_vec();
        for i in sample_coords(analytic.len(), max_coords) {
            let x0 = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = x0 + GRAD_CHECK_STEP;
            let fp = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x0 - GRAD_CHECK_STEP;
            let fm = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * GRAD_CHECK_STEP);
            let err = libm::fabs(analytic[i] - numeric) / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    store.zero_grad();
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_fn([3, 4], |i| i as f64 * 0.37 - 2.0);
        let err = grad_check(&[x], 100, Graph::new, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::from_vec(alloc::vec![1e200]);
        let res = grad_check(&[x], 10, Graph::new, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        });
        assert!(res.is_err());
    }
}
