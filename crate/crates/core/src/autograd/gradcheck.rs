use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (input index, flat coordinate) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
}

/// Compares analytic gradients of a scalar function against central
/// differences. `build` receives fresh input vars each time it is called and
/// must return a scalar. Up to `per_input` coordinates of each input are
/// sampled (all of them when the input is smaller).
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64, per_input: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], t.shape());
        let coords: Vec<usize> = if t.len() <= per_input {
            (0..t.len()).collect()
        } else {
            let mut c = sample(&mut rng, t.len(), per_input).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = t.data()[j];
            work[k].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some((k, j));
                }
            }
        }
    }
    Ok(report)
}
