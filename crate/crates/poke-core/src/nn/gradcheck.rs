//! Central-difference gradient verification over a random coordinate
//! subsample.

use alloc::vec::Vec;

use rand_core::RngCore;

use crate::rng::uniform_below;

/// Anything whose loss gradient can be probed one coordinate at a time.
///
/// `loss_with_offset(coord, delta)` must evaluate the loss with parameter
/// `coord` temporarily shifted by `delta` and restore it afterwards; calls
/// with the same arguments must be bitwise reproducible.
pub trait GradCheckTarget {
    fn dim(&self) -> usize;
    fn analytic_grad(&mut self, coord: usize) -> f64;
    fn loss_with_offset(&mut self, coord: usize, delta: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Fraction of coordinates to probe, at least one.
    pub sample_fraction: f64,
    /// Floor on the relative-error denominator.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            sample_fraction: 0.01,
            denom_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Compares analytic gradients against (f(x+h)-f(x-h))/2h on a random
/// subsample of coordinates and reports the worst relative error
/// |a-n| / max(|a|, |n|, floor).
pub fn max_rel_error<T: GradCheckTarget>(
    target: &mut T,
    cfg: &GradCheckConfig,
    rng: &mut impl RngCore,
) -> GradCheckReport {
    let n = target.dim();
    assert!(n > 0, "gradient check target has no parameters");
    assert!(n <= u32::MAX as usize, "coordinate index overflows u32");
    assert!(cfg.step > 0.0 && cfg.sample_fraction > 0.0);
    let mut k = (cfg.sample_fraction * n as f64) as usize + 1;
    if k > n {
        k = n;
    }
    let coords = sample_distinct(n, k, rng);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: coords.len(),
    };
    for &coord in &coords {
        let coord = coord as usize;
        let analytic = target.analytic_grad(coord);
        let plus = target.loss_with_offset(coord, cfg.step);
        let minus = target.loss_with_offset(coord, -cfg.step);
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let denom = analytic.abs().max(numeric.abs()).max(cfg.denom_floor);
        let rel = (analytic - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = coord;
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    report
}

/// k distinct indices from 0..n via a partial Fisher-Yates pass.
fn sample_distinct(n: usize, k: usize, rng: &mut impl RngCore) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..n as u32).collect();
    for i in 0..k {
        let j = i + uniform_below(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
