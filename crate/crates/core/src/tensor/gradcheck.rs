use super::{Graph, Tensor, TensorResult, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the worst relative error over all coordinates.
///
/// `f` receives a fresh graph plus one differentiable leaf per entry of
/// `point`, and must return a scalar node. It is re-run once per perturbed
/// coordinate, so any randomness inside it has to be replayed from a fixed
/// state.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], eps: f64) -> TensorResult<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> TensorResult<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|t| t.data().to_vec());
        for j in 0..point[i].numel() {
            let base = point[i].data()[j];
            probe[i].data_mut()[j] = base + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = base - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |v| v[j]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
