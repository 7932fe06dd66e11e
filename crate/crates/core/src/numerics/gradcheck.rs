use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences.
///
/// Returns `max |analytic - numeric| / max(1, |analytic|)` over every
/// coordinate of `x`.
pub fn check_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    check_gradients(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, None)
}

/// Multi-input form of [`check_gradient`].
///
/// With `max_coords = Some(n)`, each input is probed at no more than `n`
/// evenly strided coordinates, which keeps checks on full models cheap.
pub fn check_gradients<F>(f: F, xs: &[Tensor], h: f64, max_coords: Option<usize>) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&g, &vars)?;
        g.backward(out)?;
        vars.iter().map(|v| g.grad_or_zeros(*v)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vars)?.item()
    };

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (t, x) in xs.iter().enumerate() {
        let n = x.numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = x.data()[i];
            probe[t].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[t].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
