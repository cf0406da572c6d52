//! Central finite-difference checks for graph gradients.
//!
//! Both the analytic and the numeric gradient are evaluated in `f64`, so the
//! comparison exercises the same code path as `f32` training without being
//! swamped by single-precision rounding.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-6)` per input.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub checked_entries: usize,
}

/// Checks every entry of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradcheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    check_sampled(inputs, h, usize::MAX, 0, f)
}

/// Checks at most `per_input` randomly chosen entries of each input.
pub fn check_sampled<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    per_input: usize,
    seed: u64,
    f: F,
) -> Result<GradcheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        let n = inputs[i].len();
        let entries: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_input).into_vec()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &e in &entries {
            let base = values[i].data()[e];
            values[i].data_mut()[e] = base + h;
            let plus = eval(&values)?;
            values[i].data_mut()[e] = base - h;
            let minus = eval(&values)?;
            values[i].data_mut()[e] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        checked += entries.len();
        rel_errors.push(diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-6));
    }
    let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
    Ok(GradcheckReport { rel_errors, max_rel_error, checked_entries: checked })
}
