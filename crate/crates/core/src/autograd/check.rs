//! Central finite-difference verification of recorded gradients.

use super::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of one finite-difference probe.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// Relative error, falling back to absolute error when both sides are
    /// below `floor`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < floor {
            diff
        } else {
            diff / scale
        }
    }
}

/// Compares tape gradients of `f` with central differences at the given
/// `(input, flat index)` probes. All inputs are treated as trainable leaves.
pub fn probe_gradients<F>(inputs: &[Tensor<f64>], probes: &[(usize, usize)], step: f64, f: F) -> Vec<Probe>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let graph = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| graph.leaf(x.clone())).collect();
    let out = f(&graph, &vars);
    let grads = graph.backward(out);

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vs: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vs).item()
    };

    probes
        .iter()
        .map(|&(input, index)| {
            let analytic = grads.get(vars[input]).map_or(0.0, |g| g[index]);
            let mut xs = inputs.to_vec();
            let x0 = xs[input][index];
            xs[input][index] = x0 + step;
            let up = eval(&xs);
            xs[input][index] = x0 - step;
            let down = eval(&xs);
            Probe {
                input,
                index,
                analytic,
                numeric: (up - down) / (2.0 * step),
            }
        })
        .collect()
}

/// Largest relative error over all probes.
pub fn max_rel_error(probes: &[Probe], floor: f64) -> f64 {
    probes.iter().map(|p| p.rel_error(floor)).fold(0.0, f64::max)
}
