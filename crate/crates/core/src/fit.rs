//! Power-law exponent fits of loss trajectories.

use crate::error::{Error, Result};
use crate::evolution::LossTrajectory;
use serde::{Deserialize, Serialize};

/// Ratio between consecutive fit points.
pub const SUBSAMPLE_RATIO: f64 = 1.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// `xi` in `L_t ~ C t^-xi`.
    pub exponent: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    pub window: (u64, u64),
    pub points: usize,
}

/// Least-squares fit of `log L` against `log t` on points subsampled
/// geometrically inside `window` (default `[T/100, T]`).
pub fn fit_exponent(traj: &LossTrajectory, window: Option<(u64, u64)>) -> Result<FitResult> {
    if let Some(step) = traj.diverged_at {
        return Err(Error::Diverged { step });
    }
    let last = *traj.times.last().ok_or(Error::EmptyWindow { lo: 0, hi: 0, n: 0 })?;
    let (lo, hi) = window.unwrap_or(((last / 100).max(1), last));
    let lo = lo.max(1);
    if lo >= hi {
        return Err(Error::InvalidParameter(format!("fit window [{lo}, {hi}] is empty")));
    }
    let mut idx: Vec<usize> = Vec::new();
    let mut target = lo as f64;
    while target <= hi as f64 {
        let i = traj.times.partition_point(|&t| (t as f64) < target);
        if i >= traj.times.len() || traj.times[i] > hi {
            break;
        }
        if idx.last() != Some(&i) {
            idx.push(i);
        }
        target = (target * SUBSAMPLE_RATIO).max(traj.times[i] as f64 + 1.0);
    }
    if idx.len() < 2 {
        return Err(Error::EmptyWindow { lo, hi, n: idx.len() });
    }
    let mut xs = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    for &i in &idx {
        let (t, v) = (traj.times[i], traj.values[i]);
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::NonPositive { lo, hi, t });
        }
        xs.push((t as f64).ln());
        ys.push(v.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    Ok(FitResult {
        exponent: -slope,
        amplitude: intercept.exp(),
        r_squared,
        window: (lo, hi),
        points: idx.len(),
    })
}

/// Parses `a:b` into a window.
pub fn parse_window(s: &str) -> Result<(u64, u64)> {
    let bad = || Error::InvalidParameter(format!("window must look like lo:hi, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let lo = parse_count(a).ok_or_else(bad)?;
    let hi = parse_count(b).ok_or_else(bad)?;
    Ok((lo, hi))
}

/// Accepts plain integers and forms like `1e3`.
fn parse_count(s: &str) -> Option<u64> {
    let s = s.trim();
    s.parse::<u64>().ok().or_else(|| {
        let x: f64 = s.parse().ok()?;
        (x >= 0.0 && x.fract() == 0.0 && x < 1.8e19).then_some(x as u64)
    })
}
