//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it shares no code with
//! the backward rules it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per input; `usize::MAX` checks all of them.
    pub coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_input: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` over all
    /// sampled coordinates of all inputs.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

/// Compares the backward pass of `f` (which must return a single-element
/// node) against central differences with respect to every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let analytic = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect::<Vec<_>>()
    };
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let (mut diff_sq, mut a_sq, mut n_sq, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    let mut count = 0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if opts.coords_per_input >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_input).into_vec()
        };
        for c in coords {
            let x0 = input.data()[c];
            work[i].data_mut()[c] = x0 + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = x0 - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[c];
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            count += 1;
        }
    }
    let denom = a_sq.sqrt().max(n_sq.sqrt());
    let rel_error = if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom };
    Ok(GradCheckReport {
        rel_error,
        max_abs_error: max_abs,
        coords_checked: count,
    })
}
