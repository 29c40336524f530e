//! Central finite-difference verification of analytic gradients.
//!
//! Probes every scalar of every parameter (or a seeded subset for large
//! tensors), compares against the backward pass, and reports the worst
//! relative error with its location. Probes that straddle a ReLU/clamp kink
//! are detected by re-probing at a smaller step and flagged; callers redraw
//! the point via [`grad_check_robust`].

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::params::{bind, collect_grads, Binding, ParamSet};
use crate::seeding::rng_for;

use super::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Probe cap per tensor; tensors at or under the cap are probed fully.
    pub max_probes_per_tensor: usize,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Seed for probe subsampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, max_probes_per_tensor: 64, tolerance: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
    /// Probes skipped because the finite difference was unstable across
    /// steps (kink within eps).
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

pub type BuildLoss = dyn Fn(&mut Tape<f64>, &Binding) -> Result<Var>;

/// Checks the gradient of `build`'s scalar output with respect to every
/// tensor in `params` at the given point.
pub fn grad_check(
    params: &ParamSet<f64>,
    build: &BuildLoss,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let binding = bind(&mut tape, params, |_| true);
    let loss = build(&mut tape, &binding)?;
    let f0 = tape.value(loss).item();
    let mut grads = tape.backward(loss);
    let analytic = collect_grads(&mut grads, &binding, params, |_| true);

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let binding = bind(&mut tape, p, |_| true);
        let loss = build(&mut tape, &binding)?;
        Ok(tape.value(loss).item())
    };

    // Gradients below the finite-difference noise floor cannot be resolved;
    // treat them by absolute error instead of relative.
    let abs_floor = 1e-7 * f0.abs().max(1.0);

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
        kinks: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).len();
        let indices: Vec<usize> = if len <= cfg.max_probes_per_tensor {
            (0..len).collect()
        } else {
            let mut rng = rng_for(cfg.seed, &format!("probe:{name}"), 0);
            let mut all: Vec<usize> = (0..len).collect();
            all.shuffle(&mut rng);
            all.truncate(cfg.max_probes_per_tensor);
            all
        };
        for idx in indices {
            let orig = work.get(&name).data()[idx];
            let numeric_at = |w: &mut ParamSet<f64>, step: f64| -> Result<f64> {
                w.get_mut(&name).data_mut()[idx] = orig + step;
                let fp = eval(w)?;
                w.get_mut(&name).data_mut()[idx] = orig - step;
                let fm = eval(w)?;
                w.get_mut(&name).data_mut()[idx] = orig;
                Ok((fp - fm) / (2.0 * step))
            };
            let numeric = numeric_at(&mut work, cfg.eps)?;
            let a = analytic.get(&name).map(|t| t.data()[idx]).unwrap_or(0.0);
            report.probes += 1;
            let abs = (a - numeric).abs();
            if abs <= abs_floor {
                continue;
            }
            let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
            if rel > cfg.tolerance {
                // Re-probe at a smaller step: a kink shows up as an unstable
                // finite difference, a real bug stays put.
                let refined = numeric_at(&mut work, cfg.eps / 8.0)?;
                let shift = (refined - numeric).abs()
                    / numeric.abs().max(refined.abs()).max(1e-12);
                if shift > 0.05 {
                    report.kinks += 1;
                    continue;
                }
                let rel2 = (a - refined).abs() / a.abs().max(refined.abs()).max(1e-12);
                if rel2 <= cfg.tolerance {
                    continue;
                }
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Runs [`grad_check`] at seeded points, redrawing the point when kinks were
/// flagged and the check failed. Returns the first passing report, or the
/// last report if every attempt fails.
pub fn grad_check_robust(
    mk_point: &dyn Fn(u64) -> Result<ParamSet<f64>>,
    build: &BuildLoss,
    cfg: &GradCheckConfig,
    attempts: usize,
) -> Result<GradCheckReport> {
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        let params = mk_point(attempt as u64)?;
        let report = grad_check(&params, build, cfg)?;
        let ok = report.passed(cfg.tolerance);
        if ok || report.kinks == 0 {
            return Ok(report);
        }
        last = Some(report);
    }
    Ok(last.expect("at least one attempt"))
}
