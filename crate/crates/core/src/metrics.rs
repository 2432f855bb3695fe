//! Scores for an estimate: observation discrepancy `C`, mean square error
//! against the truth, and the boundary discontinuity measure `D`.

use crate::assimilate::residual;
use crate::error::{Error, Result};
use crate::models::{DynamicalMap, Trajectory};
use crate::obs::ObservationSet;

/// `(1/N) sum_{n=1..N} |u[n] - truth[n]|^2`; the initial state is excluded.
pub fn mse(u: &Trajectory, truth: &Trajectory) -> Result<f64> {
    mse_components(u, truth, None)
}

/// MSE restricted to a subset of coordinates (all when `coords` is `None`).
pub fn mse_components(u: &Trajectory, truth: &Trajectory, coords: Option<&[usize]>) -> Result<f64> {
    if u.len() != truth.len() {
        return Err(Error::LengthMismatch { expected: truth.len(), found: u.len() });
    }
    if u.dim() != truth.dim() {
        return Err(Error::LengthMismatch { expected: truth.dim(), found: u.dim() });
    }
    let sum: f64 = (1..u.len())
        .map(|n| {
            let e = &u[n] - &truth[n];
            match coords {
                Some(c) => c.iter().map(|&i| e[i] * e[i]).sum::<f64>(),
                None => e.norm_squared(),
            }
        })
        .sum();
    Ok(sum / u.steps() as f64)
}

/// Mean of `|y[n] - H u[n]|^2` over the observation times after the first
/// state of `u`.
pub fn obs_discrepancy(u: &Trajectory, obs: &ObservationSet) -> Result<f64> {
    let (start, end) = (u.offset, u.offset + u.steps());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, y) in obs.times.iter().zip(&obs.values) {
        if *t < start || *t > end {
            return Err(Error::InvalidInput(format!(
                "observation time {t} outside trajectory range {start}..={end}"
            )));
        }
        if *t == start {
            continue;
        }
        sum += (y - &obs.h * &u[*t - start]).norm_squared();
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidInput("no observations after the initial state".into()));
    }
    Ok(sum / count as f64)
}

/// `(1/N) sum_n max_i |u[n+1] - F(u[n])|_i`.
pub fn discontinuity<M: DynamicalMap + ?Sized>(u: &Trajectory, model: &M) -> Result<f64> {
    let r = residual(model, u)?;
    Ok(r.blocks().iter().map(|b| b.amax()).sum::<f64>() / r.len() as f64)
}

/// A row of scores for one estimate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    /// `C` of the truth: the observation noise level actually realized.
    pub c_truth: f64,
    pub c: f64,
    pub mse: f64,
    /// MSE over observed coordinates, for partial observations.
    pub mse_observed: Option<f64>,
    pub d: f64,
    pub mean_iterations: f64,
    pub windows: usize,
    pub converged_windows: usize,
}

impl ScoreSet {
    pub fn is_valid(&self) -> bool {
        let vals = [self.c_truth, self.c, self.mse, self.d, self.mean_iterations];
        vals.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}
