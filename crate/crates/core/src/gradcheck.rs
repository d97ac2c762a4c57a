//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of the backward rules it checks.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::domain::RngHandle;
use crate::error::Result;
use crate::nn::ParamStore;

/// Relative errors are measured as `|a − n| / max(|a|, |n|, floor)`.
pub const DEFAULT_DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.probes
            .iter()
            .map(|p| p.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic parameter gradients of the scalar built by `loss`
/// against central differences with step `h` on `probes` randomly chosen
/// parameter entries (every entry when `probes` exceeds the total).
pub fn check_gradients<F>(
    params: &ParamStore,
    loss: F,
    probes: usize,
    h: f64,
    rng: RngHandle,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, params)?;
    let grads = tape.param_grads(out);

    let mut entries: Vec<(String, usize)> = grads
        .iter()
        .flat_map(|(name, g)| (0..g.len()).map(move |i| (name.clone(), i)))
        .collect();
    if probes < entries.len() {
        let mut r = rng.rng();
        // partial Fisher-Yates
        for i in 0..probes {
            let j = r.random_range(i..entries.len());
            entries.swap(i, j);
        }
        entries.truncate(probes);
    }

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, p)?;
        Ok(t.value(v).item())
    };

    let mut perturbed = params.clone();
    let mut report = Vec::with_capacity(entries.len());
    for (name, index) in entries {
        let original = params.get(&name)?.data()[index];
        perturbed.get_mut(&name).expect("bound parameter").data_mut()[index] = original + h;
        let plus = eval(&perturbed)?;
        perturbed.get_mut(&name).expect("bound parameter").data_mut()[index] = original - h;
        let minus = eval(&perturbed)?;
        perturbed.get_mut(&name).expect("bound parameter").data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[&name].data()[index];
        report.push(Probe {
            relative_error: relative_error(analytic, numeric, DEFAULT_DENOMINATOR_FLOOR),
            name,
            index,
            analytic,
            numeric,
        });
    }
    Ok(GradCheckReport { probes: report })
}
