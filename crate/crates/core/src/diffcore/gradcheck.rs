//! Central finite-difference gradient checks.

use super::{DiffError, Tape, Tensor, Var};
use crate::rng::SplitMix64;

/// Largest elementwise relative error between the tape gradient of `f` and
/// central differences `(f(x+h) - f(x-h)) / 2h`, over every entry of every
/// parameter. The denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    check(f, params, step, None)
}

/// Like [`finite_diff_check`] but probes at most `per_tensor` randomly chosen
/// entries of each parameter.
pub fn finite_diff_check_sampled<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    check(f, params, step, Some((per_tensor, seed)))
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

fn check<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    sample: Option<(usize, u64)>,
) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    drop(tape);

    let mut rng = sample.map(|(_, seed)| SplitMix64::new(seed));
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let entries: Vec<usize> = match (&mut rng, sample) {
            (Some(r), Some((k, _))) if p.len() > k => (0..k).map(|_| r.below(p.len())).collect(),
            _ => (0..p.len()).collect(),
        };
        for k in entries {
            let orig = p.data()[k];
            probe[pi].data_mut()[k] = orig + step;
            let up = eval(&f, &probe)?;
            probe[pi].data_mut()[k] = orig - step;
            let down = eval(&f, &probe)?;
            probe[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
