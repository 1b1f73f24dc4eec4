//! Central-difference verification of tape adjoints.

use rand::seq::index::sample;

use super::tape::{Tape, Var};
use super::tensor::ParamSet;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub epsilon: f64,
    /// Fraction of each tensor's elements to probe.
    pub fraction: f64,
    /// Lower bound on probes per tensor, so small tensors are never skipped.
    pub min_per_tensor: usize,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { epsilon: 1e-5, fraction: 1.0, min_per_tensor: 1, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst probe.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(loss_fn: &mut F, params: &ParamSet<f64>) -> Result<f64>
where
    F: FnMut(&ParamSet<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    let value = tape.value(loss);
    if value.len() != 1 {
        return Err(Error::GradCheck(format!("loss has shape {:?}", value.shape())));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::GradCheck(format!("loss is not finite ({v})")));
    }
    Ok(v)
}

/// Compares tape adjoints of `loss_fn` against central differences on a
/// sample of parameter elements and returns the worst relative error.
///
/// `loss_fn` must be deterministic: any randomness it uses (dropout, masking)
/// has to be re-seeded identically on every call.
pub fn grad_check<F>(params: &mut ParamSet<f64>, mut loss_fn: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::GradCheck("loss is not finite".into()));
    }
    let grads = tape.backward(loss)?;

    let mut rng = substream(opts.seed, "grad-check", 0);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport::default();
    for name in &names {
        let len = params.require(name)?.len();
        let want = ((opts.fraction * len as f64).ceil() as usize).max(opts.min_per_tensor).min(len);
        let mut picks = sample(&mut rng, len, want).into_vec();
        picks.sort_unstable();
        let analytic_all = grads.param(name).map(<[f64]>::to_vec);
        for idx in picks {
            let original = params.require(name)?.data()[idx];
            params.get_mut(name).unwrap().data_mut()[idx] = original + opts.epsilon;
            let plus = eval(&mut loss_fn, params);
            params.get_mut(name).unwrap().data_mut()[idx] = original - opts.epsilon;
            let minus = eval(&mut loss_fn, params);
            params.get_mut(name).unwrap().data_mut()[idx] = original;
            let numeric = (plus? - minus?) / (2.0 * opts.epsilon);
            let analytic = analytic_all.as_ref().map_or(0.0, |g| g[idx]);
            let err = relative_error(analytic, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), idx));
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
