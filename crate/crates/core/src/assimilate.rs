//! Newton refinement of pseudo-orbits into model orbits.
//!
//! The cost operator stacks the one-step residuals `G_n(u) = u[n+1] - F(u[n])`.
//! [`full_newton`] solves `G'(u) delta = -G(u)` with the right pseudoinverse
//! `G'^T (G' G'^T)^{-1}`, where `G' G'^T` is block tridiagonal. The projected
//! method restricts the Newton update to a tracked non-stable subspace
//! ([`projected_newton_step`]) and then corrects the stable complement with a
//! forward synchronization pass ([`synchronize_stable`]). [`window_driver`]
//! runs this over consecutive windows, carrying the stable components of the
//! terminal state across each boundary.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{smw_solve_factored, BlockTridiagonal};
use crate::metrics::{self, ScoreSet};
use crate::models::{DynamicalMap, Trajectory};
use crate::obs::{steps_for, ObservationSet};
use crate::tangent::{identity_seed, propagate_frames_with, spin_up_frame, TangentFrame};

/// Relative residual above which an iteration is declared divergent.
const DIVERGENCE_RATIO: f64 = 10.0;

/// Stacked one-step residuals `r[n] = u[n+1] - F(u[n])`, `n = 0..N-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    blocks: Vec<DVector<f64>>,
}

impl ResidualVector {
    pub fn blocks(&self) -> &[DVector<f64>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().map(|b| b.amax()).fold(0.0, f64::max)
    }

    /// Below this sup-norm the trajectory is accepted as an exact orbit.
    pub fn is_orbit(&self) -> bool {
        self.max_abs() < 1e-13
    }

    pub fn stacked(&self) -> DVector<f64> {
        let d = self.blocks.first().map_or(0, |b| b.len());
        DVector::from_iterator(self.blocks.len() * d, self.blocks.iter().flat_map(|b| b.iter().cloned()))
    }
}

pub fn residual<M: DynamicalMap + ?Sized>(model: &M, u: &Trajectory) -> Result<ResidualVector> {
    let blocks = (0..u.steps())
        .map(|n| Ok(&u[n + 1] - model.step(&u[n]).map_err(|e| e.at_step(n))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualVector { blocks })
}

/// When the stable-subspace synchronization runs relative to the projected
/// Newton steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncMode {
    /// One projected Newton step, then one synchronization pass.
    #[default]
    Interleaved,
    /// Projected Newton to convergence, then a synchronization pass; repeated.
    AfterConvergence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSettings {
    /// Target for `|G|/|u|` (full Newton) or `|b|/|u|` (projected).
    pub tol: f64,
    /// Relative residual accepted as converged once iterations stop
    /// improving (floating-point floor on long windows).
    pub floor_tol: f64,
    pub max_iter: usize,
    /// Dimension of the projected (non-stable) subspace.
    pub p: usize,
    pub sync_mode: SyncMode,
    /// Second Gram-Schmidt pass when propagating frames.
    pub reorthogonalize: bool,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { tol: 1e-15, floor_tol: 1e-12, max_iter: 50, p: 1, sync_mode: SyncMode::Interleaved, reorthogonalize: false }
    }
}

impl NewtonSettings {
    pub fn with_p(p: usize) -> Self {
        Self { p, ..Self::default() }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.tol > 0.0) || !(self.floor_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.p == 0 || self.p > d {
            return Err(Error::InvalidInput(format!("projection dimension {} outside 1..={d}", self.p)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// How a window's iteration ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Converged,
    /// Stalled below `floor_tol` without reaching `tol`.
    ConvergedAtFloor,
    MaxIterations,
    Diverged,
    Failed(Error),
}

impl Termination {
    pub fn is_converged(&self) -> bool {
        matches!(self, Termination::Converged | Termination::ConvergedAtFloor)
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::Converged => write!(f, "converged"),
            Termination::ConvergedAtFloor => write!(f, "converged_at_floor"),
            Termination::MaxIterations => write!(f, "max_iterations"),
            Termination::Diverged => write!(f, "diverged"),
            Termination::Failed(e) => write!(f, "failed: {e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMethod {
    FullNewton,
    Projected,
    FourDVar,
}

impl fmt::Display for WindowMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowMethod::FullNewton => "full_newton",
            WindowMethod::Projected => "projected",
            WindowMethod::FourDVar => "4dvar",
        })
    }
}

/// Diagnostics for one assimilation window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub index: usize,
    /// Global time indices covered, inclusive.
    pub start: usize,
    pub end: usize,
    pub method: WindowMethod,
    pub iterations: usize,
    pub termination: Termination,
    /// Relative residual after each iteration.
    pub history: Vec<f64>,
}

impl WindowReport {
    pub fn converged(&self) -> bool {
        self.termination.is_converged()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssimilationReport {
    pub estimate: Trajectory,
    pub windows: Vec<WindowReport>,
    pub scores: Option<ScoreSet>,
}

impl AssimilationReport {
    pub fn converged(&self) -> bool {
        self.windows.iter().all(WindowReport::converged)
    }

    pub fn total_iterations(&self) -> usize {
        self.windows.iter().map(|w| w.iterations).sum()
    }

    /// Mean iteration count over the projected windows, or over all windows
    /// when none are projected.
    pub fn mean_iterations(&self) -> f64 {
        let projected: Vec<&WindowReport> =
            self.windows.iter().filter(|w| w.method == WindowMethod::Projected).collect();
        let pool: Vec<&WindowReport> = if projected.is_empty() { self.windows.iter().collect() } else { projected };
        pool.iter().map(|w| w.iterations as f64).sum::<f64>() / pool.len().max(1) as f64
    }

    /// Computes `C`, MSE and `D` against the truth and observations.
    pub fn score<M: DynamicalMap + ?Sized>(
        &mut self,
        model: &M,
        truth: &Trajectory,
        obs: &ObservationSet,
        observed_coords: Option<&[usize]>,
    ) -> Result<&ScoreSet> {
        let scores = ScoreSet {
            c_truth: metrics::obs_discrepancy(truth, obs)?,
            c: metrics::obs_discrepancy(&self.estimate, obs)?,
            mse: metrics::mse(&self.estimate, truth)?,
            mse_observed: match observed_coords {
                Some(c) => Some(metrics::mse_components(&self.estimate, truth, Some(c))?),
                None => None,
            },
            d: metrics::discontinuity(&self.estimate, model)?,
            mean_iterations: self.mean_iterations(),
            windows: self.windows.len(),
            converged_windows: self.windows.iter().filter(|w| w.converged()).count(),
        };
        Ok(self.scores.insert(scores))
    }

    /// Per-window diagnostics as CSV.
    pub fn windows_csv(&self, method_tag: &str) -> String {
        let mut out = String::from("method,window,start,end,solver,iterations,termination,residual_history\n");
        for w in &self.windows {
            let hist: Vec<String> = w.history.iter().map(|h| format!("{h:.16e}")).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                method_tag,
                w.index,
                w.start,
                w.end,
                w.method,
                w.iterations,
                w.termination.to_string().replace(',', ";"),
                hist.join(";")
            ));
        }
        out
    }
}

/// Tracks relative residuals and decides when to stop.
#[derive(Debug, Clone)]
pub(crate) struct Monitor {
    tol: f64,
    floor_tol: f64,
    pub(crate) history: Vec<f64>,
}

impl Monitor {
    pub(crate) fn new(settings: &NewtonSettings) -> Self {
        Self { tol: settings.tol, floor_tol: settings.floor_tol, history: Vec::new() }
    }

    pub(crate) fn check(&mut self, ratio: f64) -> Option<Termination> {
        let prev = self.history.last().copied();
        self.history.push(ratio);
        if !ratio.is_finite() || ratio > DIVERGENCE_RATIO {
            return Some(Termination::Diverged);
        }
        if ratio < self.tol {
            return Some(Termination::Converged);
        }
        match prev {
            Some(p) if ratio < self.floor_tol && ratio > 0.5 * p => Some(Termination::ConvergedAtFloor),
            _ => None,
        }
    }

    pub(crate) fn exhausted(&self) -> Termination {
        match self.history.last() {
            Some(r) if *r < self.floor_tol => Termination::ConvergedAtFloor,
            _ => Termination::MaxIterations,
        }
    }
}

/// Minimum-norm Newton correction for the stacked residual, optionally with
/// extra parameter columns.
#[derive(Debug, Clone)]
pub struct NewtonUpdate {
    pub delta: Vec<DVector<f64>>,
    /// Parameter correction, empty without parameter columns.
    pub delta_params: DVector<f64>,
}

/// Solves `[G'_u | G'_a] (du, da) = -G(u)` for the minimum-norm correction.
///
/// `param_blocks[n]` is `dF/dalpha` at `u[n]` (`d x q`); the parameter block
/// of the residual Jacobian is its negative. The Gram matrix is the block
/// tridiagonal `G'_u G'_u^T` plus the rank-`q` term `G'_a G'_a^T`.
pub fn newton_update<M: DynamicalMap + ?Sized>(
    model: &M,
    u: &Trajectory,
    r: &ResidualVector,
    param_blocks: Option<&[DMatrix<f64>]>,
) -> Result<NewtonUpdate> {
    let n = u.steps();
    let d = u.dim();
    let jac: Vec<DMatrix<f64>> = (0..n).map(|k| model.tangent(&u[k])).collect();
    let eye = DMatrix::<f64>::identity(d, d);
    let diag = jac.iter().map(|j| j * j.transpose() + &eye).collect();
    let upper = (0..n.saturating_sub(1)).map(|k| -jac[k + 1].transpose()).collect();
    let gram = BlockTridiagonal::new(diag, upper)?;
    let factor = gram.factor()?;
    let rhs = -r.stacked();
    let (y, delta_params) = match param_blocks {
        None => (factor.solve(&rhs), DVector::zeros(0)),
        Some(blocks) => {
            let q = blocks.first().map_or(0, |b| b.ncols());
            let mut u_cols = DMatrix::zeros(n * d, q);
            for (k, b) in blocks.iter().enumerate() {
                u_cols.view_mut((k * d, 0), (d, q)).copy_from(&(-b));
            }
            let y = smw_solve_factored(&factor, &u_cols, &rhs).map_err(|e| match e {
                Error::SingularUpdate => Error::ParameterUnidentifiable,
                other => other,
            })?;
            let da = u_cols.tr_mul(&y);
            (y, da)
        }
    };
    let yk = |k: usize| y.rows(k * d, d).clone_owned();
    let mut delta = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mut dk = if k > 0 { yk(k - 1) } else { DVector::zeros(d) };
        if k < n {
            dk -= jac[k].tr_mul(&yk(k));
        }
        delta.push(dk);
    }
    Ok(NewtonUpdate { delta, delta_params })
}

pub(crate) fn apply_update(u: &Trajectory, delta: &[DVector<f64>]) -> Result<Trajectory> {
    let states = u.states().iter().zip(delta).map(|(s, dk)| s + dk).collect();
    Trajectory::with_offset(states, u.offset)
}

/// Full Newton refinement of `u0` into a model orbit on a single window.
///
/// Numerical failures end the iteration and are reported through the window
/// termination; the last finite iterate is returned.
pub fn full_newton<M: DynamicalMap + ?Sized>(model: &M, u0: &Trajectory, settings: &NewtonSettings) -> AssimilationReport {
    let mut monitor = Monitor::new(settings);
    let mut u = u0.clone();
    let mut iterations = 0;
    let termination = loop {
        if iterations == settings.max_iter {
            break monitor.exhausted();
        }
        let step = residual(model, &u)
            .and_then(|r| newton_update(model, &u, &r, None))
            .and_then(|upd| apply_update(&u, &upd.delta));
        iterations += 1;
        let next = match step {
            Ok(next) => next,
            Err(e) => break Termination::Failed(e),
        };
        let ratio = match residual(model, &next) {
            Ok(r) => r.norm() / next.norm(),
            Err(_) => f64::INFINITY,
        };
        let verdict = monitor.check(ratio);
        if !matches!(verdict, Some(Termination::Diverged)) {
            u = next;
        }
        if let Some(t) = verdict {
            break t;
        }
    };
    single_window(u, WindowMethod::FullNewton, iterations, termination, monitor.history)
}

fn single_window(
    estimate: Trajectory,
    method: WindowMethod,
    iterations: usize,
    termination: Termination,
    history: Vec<f64>,
) -> AssimilationReport {
    let window = WindowReport {
        index: 0,
        start: estimate.offset,
        end: estimate.offset + estimate.steps(),
        method,
        iterations,
        termination,
        history,
    };
    AssimilationReport { estimate, windows: vec![window], scores: None }
}

/// Result of one projected Newton step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedStep {
    /// `u + Q mu`.
    pub intermediate: Trajectory,
    /// Reduced coordinates `mu[n]` of the update in each frame.
    pub mu: Vec<DVector<f64>>,
    /// `|b|`, the norm of the projected residual before the step.
    pub b_norm: f64,
}

/// Projected residual `b[n] = Q[n+1]^T r[n]`.
pub fn projected_residual(frame: &TangentFrame, r: &ResidualVector) -> Vec<DVector<f64>> {
    r.blocks().iter().enumerate().map(|(n, rn)| frame.basis(n + 1).tr_mul(rn)).collect()
}

fn stacked_norm(v: &[DVector<f64>]) -> f64 {
    v.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
}

/// Newton step restricted to the frame: solves the reduced system with
/// blocks `(-C[n], I)`, `C[n] = Q[n+1]^T DF(u[n]) Q[n]`, by its right
/// pseudoinverse.
pub fn projected_newton_step<M: DynamicalMap + ?Sized>(
    model: &M,
    u: &Trajectory,
    frame: &TangentFrame,
) -> Result<ProjectedStep> {
    let n = u.steps();
    if frame.steps() != n {
        return Err(Error::LengthMismatch { expected: n, found: frame.steps() });
    }
    let r = residual(model, u)?;
    let b = projected_residual(frame, &r);
    let p = frame.dim();
    let eye = DMatrix::<f64>::identity(p, p);
    let diag = (0..n).map(|k| frame.coupling(k) * frame.coupling(k).transpose() + &eye).collect();
    let upper = (0..n - 1).map(|k| -frame.coupling(k + 1).transpose()).collect();
    let gram = BlockTridiagonal::new(diag, upper)?;
    let rhs = -DVector::from_iterator(n * p, b.iter().flat_map(|v| v.iter().cloned()));
    let y = gram.solve(&rhs)?;
    let yk = |k: usize| y.rows(k * p, p).clone_owned();
    let mut mu = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mut m = if k > 0 { yk(k - 1) } else { DVector::zeros(p) };
        if k < n {
            m -= frame.coupling(k).tr_mul(&yk(k));
        }
        mu.push(m);
    }
    let states = (0..=n).map(|k| &u[k] + frame.basis(k) * &mu[k]).collect();
    Ok(ProjectedStep {
        intermediate: Trajectory::with_offset(states, u.offset)?,
        mu,
        b_norm: stacked_norm(&b),
    })
}

/// Driver-response recursion `z[n+1] = P[n+1] x[n+1] + (I - P[n+1]) F(z[n])`
/// started from `z0`.
pub fn drive_response<M: DynamicalMap + ?Sized>(
    model: &M,
    driver: &Trajectory,
    frame: &TangentFrame,
    z0: &DVector<f64>,
) -> Result<Trajectory> {
    let n = driver.steps();
    let mut states = Vec::with_capacity(n + 1);
    states.push(z0.clone());
    for k in 0..n {
        let f = model.step(&states[k]).map_err(|_| Error::SyncDivergence { step: k + 1 })?;
        let next = frame.project(k + 1, &(&driver[k + 1] - &f)) + f;
        if next.norm() > 1e6 * driver[k + 1].norm().max(1.0) {
            return Err(Error::SyncDivergence { step: k + 1 });
        }
        states.push(next);
    }
    Trajectory::with_offset(states, driver.offset).map_err(|e| match e {
        Error::Divergence { step } => Error::SyncDivergence { step },
        other => other,
    })
}

/// Stable-subspace correction: forward synchronization to the intermediate
/// iterate `ubar`, started from `ubar[0] + (I - P[0]) delta0`.
pub fn synchronize_stable<M: DynamicalMap + ?Sized>(
    model: &M,
    ubar: &Trajectory,
    frame: &TangentFrame,
    delta0: &DVector<f64>,
) -> Result<Trajectory> {
    let z0 = &ubar[0] + frame.project_out(0, delta0);
    drive_response(model, ubar, frame, &z0)
}

/// Basis used for the projected step.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    /// QR frames propagated from `q0` along the current iterate.
    Lyapunov { q0: DMatrix<f64> },
    /// The same basis at every step.
    Fixed { basis: DMatrix<f64> },
}

impl Projection {
    pub fn frames<M: DynamicalMap + ?Sized>(&self, model: &M, u: &Trajectory, reorthogonalize: bool) -> Result<TangentFrame> {
        match self {
            Projection::Lyapunov { q0 } => propagate_frames_with(model, u, q0, reorthogonalize),
            Projection::Fixed { basis } => Ok(TangentFrame::fixed(model, u, basis)),
        }
    }
}

/// Projected Newton plus synchronization on one window.
///
/// `anchor` is the previous window's terminal state `v_T`; each iteration
/// synchronizes from `delta0 = (I - P[0]) (v_T - u[0])`, which holds the
/// stable components of the initial state at those of `v_T`.
pub fn assimilate_window<M: DynamicalMap + ?Sized>(
    model: &M,
    u_init: &Trajectory,
    settings: &NewtonSettings,
    projection: &Projection,
    anchor: Option<&DVector<f64>>,
) -> AssimilationReport {
    let mut monitor = Monitor::new(settings);
    let mut u = u_init.clone();
    let mut iterations = 0;
    let delta0 = |u: &Trajectory| match anchor {
        Some(v) => v - &u[0],
        None => DVector::zeros(u.dim()),
    };
    let evaluate = |u: &Trajectory| -> Result<(TangentFrame, f64)> {
        let frame = projection.frames(model, u, settings.reorthogonalize)?;
        let r = residual(model, u)?;
        let b = stacked_norm(&projected_residual(&frame, &r));
        Ok((frame, b / u.norm()))
    };
    let mut current = evaluate(&u);

    let termination = match settings.sync_mode {
        SyncMode::Interleaved => loop {
            if iterations == settings.max_iter {
                break monitor.exhausted();
            }
            let frame = match &current {
                Ok((f, _)) => f,
                Err(e) => break Termination::Failed(e.clone()),
            };
            iterations += 1;
            let next = projected_newton_step(model, &u, frame)
                .and_then(|s| synchronize_stable(model, &s.intermediate, frame, &delta0(&u)));
            let next = match next {
                Ok(v) => v,
                Err(e) => break Termination::Failed(e),
            };
            let eval = evaluate(&next);
            let ratio = eval.as_ref().map_or(f64::INFINITY, |(_, r)| *r);
            let verdict = monitor.check(ratio);
            if !matches!(verdict, Some(Termination::Diverged)) {
                u = next;
                current = eval;
            }
            if let Some(t) = verdict {
                break t;
            }
        },
        SyncMode::AfterConvergence => 'outer: loop {
            // Projected Newton to tolerance without touching the stable part.
            loop {
                if iterations == settings.max_iter {
                    break 'outer monitor.exhausted();
                }
                let frame = match &current {
                    Ok((f, _)) => f,
                    Err(e) => break 'outer Termination::Failed(e.clone()),
                };
                iterations += 1;
                let next = match projected_newton_step(model, &u, frame) {
                    Ok(s) => s.intermediate,
                    Err(e) => break 'outer Termination::Failed(e),
                };
                let eval = evaluate(&next);
                let ratio = eval.as_ref().map_or(f64::INFINITY, |(_, r)| *r);
                match monitor.check(ratio) {
                    Some(Termination::Diverged) => break 'outer Termination::Diverged,
                    Some(_) => {
                        u = next;
                        current = eval;
                        break;
                    }
                    None => {
                        u = next;
                        current = eval;
                    }
                }
            }
            let frame = match &current {
                Ok((f, _)) => f,
                Err(e) => break Termination::Failed(e.clone()),
            };
            let synced = match synchronize_stable(model, &u, frame, &delta0(&u)) {
                Ok(v) => v,
                Err(e) => break Termination::Failed(e),
            };
            current = evaluate(&synced);
            u = synced;
            let ratio = current.as_ref().map_or(f64::INFINITY, |(_, r)| *r);
            if ratio < settings.tol || (ratio < settings.floor_tol && iterations >= settings.max_iter) {
                monitor.history.push(ratio);
                break if ratio < settings.tol { Termination::Converged } else { Termination::ConvergedAtFloor };
            }
            if ratio < settings.floor_tol && monitor.history.last().is_some_and(|h| ratio > 0.5 * h) {
                monitor.history.push(ratio);
                break Termination::ConvergedAtFloor;
            }
        },
    };
    single_window(u, WindowMethod::Projected, iterations, termination, monitor.history)
}

/// Window lengths in model time: an initialization window of `init_len`
/// followed by windows of `window_len` until `horizon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSchedule {
    pub init_len: f64,
    pub window_len: f64,
    pub horizon: f64,
}

impl WindowSchedule {
    pub fn single(horizon: f64) -> Self {
        Self { init_len: horizon, window_len: horizon, horizon }
    }

    /// Inclusive step ranges of each window; consecutive windows share their
    /// boundary index. The last window is shortened to end at the horizon.
    pub fn boundaries(&self, map_dt: f64) -> Result<Vec<(usize, usize)>> {
        if !(self.init_len > 0.0 && self.window_len > 0.0 && self.horizon > 0.0) {
            return Err(Error::InvalidInput("window lengths and horizon must be positive".into()));
        }
        let total = steps_for(self.horizon, map_dt)?;
        let first = steps_for(self.init_len, map_dt)?.min(total);
        let len = steps_for(self.window_len, map_dt)?;
        if first == 0 || len == 0 {
            return Err(Error::InvalidInput("windows must span at least one map step".into()));
        }
        let mut out = vec![(0, first)];
        let mut start = first;
        while start < total {
            let end = (start + len).min(total);
            out.push((start, end));
            start = end;
        }
        Ok(out)
    }
}

/// Settings for [`window_driver`].
#[derive(Debug, Clone, PartialEq)]
pub struct DriverSettings {
    pub newton: NewtonSettings,
    /// Fixed basis replacing the Lyapunov frames (e.g. a coordinate
    /// projector); `None` uses QR frames of width `newton.p`.
    pub fixed_basis: Option<DMatrix<f64>>,
    /// Steps of the previous estimate used to spin up each window's `Q[0]`.
    pub spin_up_steps: usize,
    /// Run full Newton on the first window.
    pub init_full_newton: bool,
    /// After a failed window, restart the next one with full Newton.
    pub auto_restart: bool,
}

impl Default for DriverSettings {
    fn default() -> Self {
        Self {
            newton: NewtonSettings::default(),
            fixed_basis: None,
            spin_up_steps: 200,
            init_full_newton: true,
            auto_restart: false,
        }
    }
}

/// Sequential windowed assimilation of a full-state proxy.
///
/// The first window is smoothed with full Newton. Every later window starts
/// from the proxy, spins its frame up along the estimate so far, and holds
/// the stable components of its initial state at the previous terminal state.
/// A failed window is flagged; the next window then starts from the proxy
/// without the continuity constraint (or with full Newton when
/// `auto_restart` is set).
pub fn window_driver<M: DynamicalMap + ?Sized>(
    model: &M,
    proxy: &Trajectory,
    schedule: &WindowSchedule,
    settings: &DriverSettings,
) -> Result<AssimilationReport> {
    settings.newton.validate(model.dim())?;
    let bounds = schedule.boundaries(model.map_dt())?;
    let last = bounds.last().map_or(0, |b| b.1);
    if last != proxy.steps() {
        return Err(Error::LengthMismatch { expected: last + 1, found: proxy.len() });
    }
    let mut estimate: Vec<DVector<f64>> = proxy.states().to_vec();
    let mut windows = Vec::with_capacity(bounds.len());
    let mut continuity = false;
    let mut restart = false;
    for (index, &(a, b)) in bounds.iter().enumerate() {
        let u_init = proxy.slice(a, b)?;
        let use_full = (index == 0 && settings.init_full_newton) || (restart && settings.auto_restart);
        let mut report = if use_full {
            full_newton(model, &u_init, &settings.newton)
        } else {
            let projection = match &settings.fixed_basis {
                Some(basis) => Projection::Fixed { basis: basis.clone() },
                None => {
                    let q0 = if a == 0 {
                        identity_seed(model.dim(), settings.newton.p)
                    } else {
                        let spin = settings.spin_up_steps.min(a);
                        let pre = Trajectory::new(estimate[a - spin..=a].to_vec())?;
                        match spin_up_frame(model, &pre, settings.newton.p, spin) {
                            Ok(q) => q,
                            Err(_) => identity_seed(model.dim(), settings.newton.p),
                        }
                    };
                    Projection::Lyapunov { q0 }
                }
            };
            let anchor = continuity.then(|| estimate[a].clone());
            assimilate_window(model, &u_init, &settings.newton, &projection, anchor.as_ref())
        };
        let mut window = report.windows.remove(0);
        window.index = index;
        let ok = window.converged();
        for (k, s) in report.estimate.states().iter().enumerate() {
            estimate[a + k] = s.clone();
        }
        windows.push(window);
        continuity = ok;
        restart = !ok;
    }
    Ok(AssimilationReport { estimate: Trajectory::with_offset(estimate, proxy.offset)?, windows, scores: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::mgs_qr;
    use crate::models::Model;
    use crate::obs::{generate_truth, observe, Noise};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(vals: &[f64]) -> Trajectory {
        Trajectory::new(vals.iter().map(|v| DVector::from_element(1, *v)).collect()).unwrap()
    }

    fn doubling() -> Model {
        Model::linear_map(DMatrix::from_element(1, 1, 2.0)).unwrap()
    }

    fn noisy_l63(horizon: f64, var: f64, seed: u64) -> (Model, Trajectory, Trajectory) {
        let m = Model::lorenz63(0.005, 1);
        let truth = generate_truth(&m, horizon, seed).unwrap();
        let obs = observe(&truth, &DMatrix::identity(3, 3), Noise::gaussian_variance(var), 1, seed + 1000).unwrap();
        let proxy = obs.as_trajectory().unwrap();
        (m, truth, proxy)
    }

    #[test]
    fn residual_values() {
        let id = Model::linear_map(DMatrix::identity(1, 1)).unwrap();
        let r = residual(&id, &scalar(&[0.0, 1.0])).unwrap();
        assert_eq!(r.blocks()[0][0], 1.0);
        assert!(residual(&id, &scalar(&[4.0, 4.0, 4.0])).unwrap().is_orbit());
        let m = Model::lorenz63(0.005, 1);
        let orbit = m.orbit(&DVector::from_vec(vec![1.0, 1.0, 1.0]), 20).unwrap();
        assert!(residual(&m, &orbit).unwrap().is_orbit());
    }

    #[test]
    fn full_newton_scalar_closed_form() {
        let rep = full_newton(&doubling(), &scalar(&[1.0, 3.0]), &NewtonSettings::default());
        // A = (-2, 1), r = 1: delta = -A^T r / (A A^T) = (0.4, -0.2).
        assert!((rep.estimate[0][0] - 1.4).abs() < 1e-15);
        assert!((rep.estimate[1][0] - 2.8).abs() < 1e-15);
        assert!(rep.converged());
        assert_eq!(rep.windows[0].iterations, 1);
    }

    #[test]
    fn full_newton_on_orbit_is_identity() {
        let m = Model::lorenz63(0.005, 1);
        let orbit = m.orbit(&DVector::from_vec(vec![-5.0, -4.0, 22.0]), 100).unwrap();
        let rep = full_newton(&m, &orbit, &NewtonSettings::default());
        assert_eq!(rep.windows[0].iterations, 1);
        assert!(rep.converged());
        assert!((0..=100).all(|n| (&rep.estimate[n] - &orbit[n]).amax() < 1e-13));
    }

    #[test]
    fn projected_step_scalar_matches_full() {
        let u = scalar(&[1.0, 3.0]);
        let m = doubling();
        let frame = propagate_frames_with(&m, &u, &identity_seed(1, 1), false).unwrap();
        let step = projected_newton_step(&m, &u, &frame).unwrap();
        assert!((step.intermediate[0][0] - 1.4).abs() < 1e-15);
        assert!((step.intermediate[1][0] - 2.8).abs() < 1e-15);
    }

    #[test]
    fn projected_step_on_orbit_is_zero() {
        let m = Model::lorenz63(0.005, 1);
        let orbit = m.orbit(&DVector::from_vec(vec![-5.0, -4.0, 22.0]), 50).unwrap();
        let frame = propagate_frames_with(&m, &orbit, &identity_seed(3, 2), false).unwrap();
        let step = projected_newton_step(&m, &orbit, &frame).unwrap();
        assert!(step.mu.iter().all(|v| v.amax() < 1e-12));
        let synced = synchronize_stable(&m, &step.intermediate, &frame, &DVector::zeros(3)).unwrap();
        assert!((0..=50).all(|n| (&synced[n] - &orbit[n]).amax() < 1e-12));
    }

    #[test]
    fn projected_step_with_full_frame_equals_full_newton_step() {
        let (m, _, proxy) = noisy_l63(2.0, 1.0, 5);
        let r = residual(&m, &proxy).unwrap();
        let full = newton_update(&m, &proxy, &r, None).unwrap();
        let frame = propagate_frames_with(&m, &proxy, &identity_seed(3, 3), false).unwrap();
        let step = projected_newton_step(&m, &proxy, &frame).unwrap();
        for n in 0..=proxy.steps() {
            let expected = &proxy[n] + &full.delta[n];
            assert!((&step.intermediate[n] - expected).amax() < 1e-9);
        }
        let synced = synchronize_stable(&m, &step.intermediate, &frame, &DVector::from_element(3, 1.0)).unwrap();
        assert_eq!(synced, step.intermediate);
    }

    #[test]
    fn update_stays_in_frame_and_sync_preserves_projection() {
        let (m, _, proxy) = noisy_l63(2.0, 1.0, 6);
        let frame = propagate_frames_with(&m, &proxy, &identity_seed(3, 2), false).unwrap();
        let step = projected_newton_step(&m, &proxy, &frame).unwrap();
        for n in 0..=proxy.steps() {
            let du = &step.intermediate[n] - &proxy[n];
            assert!(frame.project_out(n, &du).norm() <= 1e-10 * du.norm().max(1e-300));
        }
        let synced = synchronize_stable(&m, &step.intermediate, &frame, &DVector::zeros(3)).unwrap();
        for n in 1..=proxy.steps() {
            let diff = frame.project(n, &(&synced[n] - &step.intermediate[n]));
            assert!(diff.norm() <= 1e-10 * (1.0 + step.intermediate[n].norm()));
        }
    }

    #[test]
    fn sync_is_noop_for_residuals_in_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(4, 4, |i, j| if i == j { [1.3, 1.05, 0.7, 0.4][i] } else { 0.2 * (rng.random::<f64>() - 0.5) });
        let m = Model::linear_map(a).unwrap();
        let base = Trajectory::new(vec![DVector::zeros(4); 31]).unwrap();
        let frame = propagate_frames_with(&m, &base, &identity_seed(4, 2), false).unwrap();
        let mut states = vec![DVector::from_fn(4, |_, _| rng.random::<f64>())];
        for n in 0..30 {
            let c = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            let next = m.step(&states[n]).unwrap() + frame.basis(n + 1) * c;
            states.push(next);
        }
        let u = Trajectory::new(states).unwrap();
        let step = projected_newton_step(&m, &u, &frame).unwrap();
        let synced = synchronize_stable(&m, &step.intermediate, &frame, &DVector::zeros(4)).unwrap();
        for n in 0..=30 {
            assert!((&synced[n] - &step.intermediate[n]).amax() < 1e-10);
        }
        assert!(residual(&m, &synced).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn window_on_orbit_takes_one_iteration() {
        let m = Model::lorenz63(0.005, 1);
        let orbit = m.orbit(&DVector::from_vec(vec![-5.0, -4.0, 22.0]), 100).unwrap();
        let rep = assimilate_window(&m, &orbit, &NewtonSettings::with_p(2), &Projection::Lyapunov { q0: identity_seed(3, 2) }, None);
        assert!(rep.converged());
        assert_eq!(rep.windows[0].iterations, 1);
        assert!((0..=100).all(|n| (&rep.estimate[n] - &orbit[n]).amax() < 1e-12));
    }

    #[test]
    fn full_frame_window_matches_full_newton() {
        let (m, _, proxy) = noisy_l63(2.0, 1.0, 8);
        let full = full_newton(&m, &proxy, &NewtonSettings::default());
        let q0 = mgs_qr(&DMatrix::identity(3, 3)).unwrap().q;
        let proj = assimilate_window(&m, &proxy, &NewtonSettings::with_p(3), &Projection::Lyapunov { q0 }, None);
        assert!(full.converged() && proj.converged());
        for n in 0..=proxy.steps() {
            assert!((&full.estimate[n] - &proj.estimate[n]).amax() < 1e-8);
        }
    }

    #[test]
    fn schedule_boundaries() {
        let s = WindowSchedule { init_len: 2.5, window_len: 1.25, horizon: 5.0 };
        assert_eq!(s.boundaries(0.05).unwrap(), vec![(0, 50), (50, 75), (75, 100)]);
        assert_eq!(WindowSchedule::single(5.0).boundaries(0.05).unwrap(), vec![(0, 100)]);
        let ragged = WindowSchedule { init_len: 1.0, window_len: 1.5, horizon: 3.0 };
        assert_eq!(ragged.boundaries(0.5).unwrap(), vec![(0, 2), (2, 5), (5, 6)]);
        assert!(WindowSchedule { init_len: 0.33, window_len: 1.0, horizon: 2.0 }.boundaries(0.05).is_err());
    }

    #[test]
    fn single_window_driver_is_full_newton() {
        let (m, _, proxy) = noisy_l63(1.0, 1.0, 10);
        let rep = window_driver(&m, &proxy, &WindowSchedule::single(1.0), &DriverSettings::default()).unwrap();
        let full = full_newton(&m, &proxy, &NewtonSettings::default());
        assert_eq!(rep.estimate, full.estimate);
        assert_eq!(rep.windows.len(), 1);
    }

    #[test]
    fn driver_keeps_stable_continuity() {
        let (m, truth, proxy) = noisy_l63(5.0, 4.0, 11);
        let settings = DriverSettings { newton: NewtonSettings::with_p(2), ..DriverSettings::default() };
        let sched = WindowSchedule { init_len: 2.5, window_len: 1.25, horizon: 5.0 };
        let rep = window_driver(&m, &proxy, &sched, &settings).unwrap();
        assert!(rep.converged(), "{:?}", rep.windows);
        let err = metrics::mse(&rep.estimate, &truth).unwrap();
        assert!(err < 0.5, "mse {err}");
        // Inside each window the estimate is an orbit; the last state of a
        // window is replaced by the first state of the next.
        for w in &rep.windows {
            let seg = rep.estimate.slice(w.start, w.end - 1).unwrap();
            let r = residual(&m, &seg).unwrap().max_abs();
            assert!(r < 1e-9, "window {} residual {r:e} {:?}", w.index, w);
        }
    }
}
