//! Central-difference validation of analytic gradients.
//!
//! The caller runs its real forward+backward once, leaving analytic gradients
//! accumulated in the `ParamSet`, then hands over a forward-only closure.
//! Sampled parameter entries are perturbed in place (+h, -h, restore) and the
//! numeric slope is compared entry by entry. The forward closure must be
//! deterministic: stochastic layers have to run in their eval phase or with a
//! pinned mask, or the finite differences measure noise instead of slope.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::RngStream;

pub struct GradCheckConfig {
    /// Central-difference step h.
    pub step: f64,
    /// Maximum allowed relative error |analytic - numeric| / max(1, |numeric|).
    pub tolerance: f64,
    /// Entries sampled per parameter tensor (capped at the tensor size).
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, samples_per_param: 6, seed: 0 }
    }
}

pub struct WorstEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub struct ParamReport {
    pub name: String,
    pub sampled: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstEntry>,
}

pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn sample_indices(len: usize, want: usize, rng: &mut RngStream) -> Vec<usize> {
    if want >= len {
        return (0..len).collect();
    }
    let mut picked = Vec::with_capacity(want);
    while picked.len() < want {
        let i = rng.below(len as u64) as usize;
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Compares the gradients currently accumulated in `ps` against central
/// differences of `forward`. Parameter values are restored exactly (the
/// original bits are put back) regardless of outcome.
pub fn grad_check(
    ps: &mut ParamSet,
    forward: &mut dyn FnMut(&ParamSet) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(cfg.seed).fork("grad_check");
    let mut reports = Vec::new();
    let mut max_rel_err: f64 = 0.0;

    let ids: Vec<ParamId> = ps.iter().map(|(id, _)| id).collect();
    for id in ids {
        let (name, len) = {
            let p = ps.get(id);
            (p.name.clone(), p.len())
        };
        let indices = sample_indices(len, cfg.samples_per_param, &mut rng);
        let mut report = ParamReport {
            name: name.clone(),
            sampled: indices.len(),
            max_rel_err: 0.0,
            worst: None,
        };
        for idx in indices {
            let original = ps.get(id).values[idx];
            ps.values_mut(id)[idx] = original + cfg.step;
            let f_plus = forward(ps);
            ps.values_mut(id)[idx] = original - cfg.step;
            let f_minus = forward(ps);
            ps.values_mut(id)[idx] = original;
            let (f_plus, f_minus) = (f_plus?, f_minus?);
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    context: "grad_check".into(),
                    detail: format!("loss non-finite while perturbing {name}[{idx}]"),
                });
            }
            let numeric = (f_plus - f_minus) / (2.0 * cfg.step);
            let analytic = ps.grad(id)[idx];
            let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstEntry { index: idx, analytic, numeric });
            }
        }
        max_rel_err = max_rel_err.max(report.max_rel_err);
        reports.push(report);
    }

    Ok(GradCheckReport {
        params: reports,
        max_rel_err,
        tolerance: cfg.tolerance,
        passed: max_rel_err <= cfg.tolerance,
    })
}
