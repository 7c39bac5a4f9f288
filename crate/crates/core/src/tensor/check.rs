use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max elementwise relative error for each input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    /// Elements re-measured with a smaller step because their stencil
    /// straddled a kink.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// One-sided differences further apart than this fraction of their scale
/// mark a stencil that crosses a non-differentiable point.
const KINK_RATIO: f64 = 1e-3;
const KINK_RETRIES: usize = 2;
/// Relative precision assumed for one evaluation of `f`; well above double
/// round-off to cover error accumulated over long reductions.
const EVAL_PRECISION: f64 = 1e-10;

/// Checks `f` at `inputs` in float64.
///
/// `f` receives one `requires_grad` leaf per input and must return a scalar.
/// Every element of every input is perturbed by `±h`; the error for an
/// element is `|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)`. The floor is the
/// largest of `1e-8`, `1e-3` times the largest reverse-mode entry of that
/// input, and the resolution of the difference quotient,
/// `EVAL_PRECISION · max(1, |f|) / h`. Entries below the floor cannot be
/// resolved by central differences and are judged on that scale instead.
///
/// Piecewise-linear ops (relu, abs, max pooling, clamp) make the function
/// non-smooth. When the forward and backward one-sided differences of an
/// element disagree by more than [`KINK_RATIO`] of their scale, the stencil
/// straddles a kink and the element is measured again with a tenfold smaller
/// step, up to twice.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut kinks = 0;
    for (idx, var) in vars.iter().enumerate() {
        let ad = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[idx].rows(), inputs[idx].cols()));
        let floor = ad.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) * 1e-3;
        let floor = floor.max(1e-8).max(EVAL_PRECISION * base.abs().max(1.0) / h);
        let mut worst = 0.0f64;
        for k in 0..inputs[idx].len() {
            let orig = inputs[idx].data()[k];
            let mut step = h;
            let mut fd;
            let mut retries = 0;
            loop {
                work[idx].data_mut()[k] = orig + step;
                let plus = eval(&work)?;
                work[idx].data_mut()[k] = orig - step;
                let minus = eval(&work)?;
                work[idx].data_mut()[k] = orig;
                fd = (plus - minus) / (2.0 * step);
                let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
                let resolution = EVAL_PRECISION * base.abs().max(1.0) / step;
                let straddles = (fwd - bwd).abs() > (KINK_RATIO * fwd.abs().max(bwd.abs())).max(resolution);
                if !straddles || retries == KINK_RETRIES {
                    break;
                }
                if retries == 0 {
                    kinks += 1;
                }
                retries += 1;
                step /= 10.0;
            }
            let a = ad.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        kinks,
    })
}
