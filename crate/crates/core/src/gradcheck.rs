//! Central finite-difference verification of autograd gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over coordinates of `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)` for a
/// scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    finite_diff_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), h)
}

/// Same as [`finite_diff_check`] over every coordinate of several inputs.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic: Vec<Vec<f64>> = {
        let graph = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| graph.param(x.clone())).collect();
        let out = f(&graph, &vars)?;
        check_scalar(&out)?;
        graph.backward(out)?;
        vars.iter()
            .map(|v| v.grad().expect("param has grad").into_data())
            .collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let graph = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| graph.constant(x.clone())).collect();
        let out = f(&graph, &vars)?;
        check_scalar(&out)
    };

    let mut inputs = xs.to_vec();
    let mut worst: f64 = 0.0;
    for (t, grads) in analytic.iter().enumerate() {
        for (i, &g_ad) in grads.iter().enumerate() {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + h;
            let plus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig - h;
            let minus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let g_fd = (plus - minus) / (2.0 * h);
            let denom = 1f64.max(g_ad.abs()).max(g_fd.abs());
            worst = worst.max((g_ad - g_fd).abs() / denom);
        }
    }
    Ok(worst)
}

fn check_scalar(out: &Var<'_>) -> Result<f64> {
    if out.len() != 1 {
        return Err(Error::Contract(format!(
            "finite-difference target must be scalar, got {:?}",
            out.shape()
        )));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("f(x) = {v}")));
    }
    Ok(v)
}
