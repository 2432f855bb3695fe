//! Strong-constraint 4DVar baseline.
//!
//! The cost of an initial state is the weighted observation misfit along the
//! model orbit it generates, `sum_n (y_n - H u_n)^T E^{-1} (y_n - H u_n)` with
//! `E = nu^2 I` and no background term. Its gradient comes from one backward
//! adjoint sweep. Windows are minimized with Polak-Ribiere+ nonlinear
//! conjugate gradients and a backtracking Armijo line search.

use nalgebra::DVector;

use crate::assimilate::{AssimilationReport, Termination, WindowMethod, WindowReport, WindowSchedule};
use crate::error::{Error, Result};
use crate::models::{DynamicalMap, Model, Trajectory};
use crate::obs::ObservationSet;

/// Cost value and gradients of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct VarEval {
    /// `+inf` when the forward orbit diverges.
    pub cost: f64,
    pub grad: DVector<f64>,
    /// Gradient with respect to the model parameters (all of them).
    pub grad_params: DVector<f64>,
}

impl VarEval {
    pub fn is_finite(&self) -> bool {
        self.cost.is_finite()
    }
}

/// Observations of one window, indexed relative to the window start.
#[derive(Debug, Clone, PartialEq)]
pub struct VarWindow {
    pub start: usize,
    pub steps: usize,
    obs: ObservationSet,
    weight: f64,
}

impl VarWindow {
    /// Window covering global steps `start..=start + steps`; observations
    /// outside it are ignored.
    pub fn new(obs: &ObservationSet, start: usize, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidInput("a 4DVar window needs at least one step".into()));
        }
        let variance = obs.noise.variance();
        let weight = if variance > 0.0 { 1.0 / variance } else { 1.0 };
        let obs = obs.window(start, start + steps);
        if obs.is_empty() {
            return Err(Error::InvalidInput(format!("no observations in window starting at {start}")));
        }
        Ok(Self { start, steps, obs, weight })
    }

    /// Uses an explicit inverse-variance weight instead of the noise model's.
    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.obs
    }

    fn misfit_at(&self) -> Vec<Option<&DVector<f64>>> {
        let mut at = vec![None; self.steps + 1];
        for (t, y) in self.obs.times.iter().zip(&self.obs.values) {
            at[t - self.start] = Some(y);
        }
        at
    }
}

/// Cost and adjoint gradient of the window for initial state `u0`.
pub fn cost_and_gradient<M: DynamicalMap + ?Sized>(model: &M, u0: &DVector<f64>, window: &VarWindow) -> VarEval {
    let diverged = || VarEval {
        cost: f64::INFINITY,
        grad: DVector::zeros(u0.len()),
        grad_params: DVector::zeros(model.n_params()),
    };
    let mut states = Vec::with_capacity(window.steps + 1);
    states.push(u0.clone());
    for k in 0..window.steps {
        match model.step(&states[k]) {
            Ok(x) => states.push(x),
            Err(_) => return diverged(),
        }
    }
    let h = &window.obs.h;
    let w = window.weight;
    let obs_at = window.misfit_at();
    let mut cost = 0.0;
    // Forcing of the adjoint at step n: 2 H^T E^{-1} (H u_n - y_n).
    let forcing: Vec<Option<DVector<f64>>> = obs_at
        .iter()
        .zip(&states)
        .map(|(y, x)| {
            y.map(|y| {
                let innov = h * x - y;
                cost += w * innov.norm_squared();
                h.tr_mul(&innov) * (2.0 * w)
            })
        })
        .collect();
    if !cost.is_finite() {
        return diverged();
    }
    let mut lam = forcing[window.steps].clone().unwrap_or_else(|| DVector::zeros(u0.len()));
    let mut grad_params = DVector::zeros(model.n_params());
    for n in (0..window.steps).rev() {
        let (back, dp) = model.adjoint(&states[n], &lam);
        grad_params += dp;
        lam = back;
        if let Some(f) = &forcing[n] {
            lam += f;
        }
    }
    VarEval { cost, grad: lam, grad_params }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgSettings {
    /// Stop when `|g| / max(1, |x|) < grad_tol`.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Restart with steepest descent every this many iterations; `0` uses the
    /// control dimension.
    pub restart: usize,
    pub max_backtracks: usize,
    /// A line search that cannot decrease the cost any further ends the run;
    /// if the gradient norm has by then dropped below this fraction of its
    /// initial value, the stall is accepted as converged (the cost no longer
    /// resolves smaller steps).
    pub floor_tol: f64,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self { grad_tol: 1e-8, max_iter: 2000, armijo_c: 1e-4, restart: 0, max_backtracks: 60, floor_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    /// Gradient tolerance met.
    pub converged: bool,
    /// Stopped because no step decreased the cost.
    pub line_search_failed: bool,
    /// Final `|g| / max(1, |x|)`.
    pub grad_ratio: f64,
    /// Final `|g|` relative to the initial gradient norm.
    pub grad_reduction: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
}

/// Polak-Ribiere+ nonlinear conjugate gradients with backtracking Armijo
/// steps. Each line search first tries the minimizer of a quadratic
/// interpolant, then halves the step until sufficient decrease holds. `f`
/// returns the cost and its gradient; a non-finite cost counts as a failed
/// trial step.
pub fn minimize_cg<F>(mut f: F, x0: &DVector<f64>, settings: &CgSettings) -> CgResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let restart = if settings.restart == 0 { x0.len() } else { settings.restart };
    let mut x = x0.clone();
    let (mut fx, mut g) = f(&x);
    let mut costs = vec![fx];
    let stop = |g: &DVector<f64>, x: &DVector<f64>| g.norm() / x.norm().max(1.0) < settings.grad_tol;
    if !fx.is_finite() {
        return CgResult { x, cost: fx, iterations: 0, converged: false, line_search_failed: true, grad_ratio: f64::INFINITY, grad_reduction: 1.0, costs };
    }
    let g_initial = g.norm();
    let mut dir = -&g;
    let mut step = 1.0 / g.norm().max(1.0);
    let mut iterations = 0;
    let mut since_restart = 0;
    let mut line_search_failed = false;
    while !stop(&g, &x) && iterations < settings.max_iter {
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            dir = -&g;
            slope = -g.norm_squared();
            since_restart = 0;
        }
        // Strict decrease guards against accepting steps lost in rounding.
        let armijo = |a: f64, fa: f64| fa.is_finite() && fa < fx && fa <= fx + settings.armijo_c * a * slope;
        let mut alpha = step;
        let (f0, g0) = f(&(&x + &dir * alpha));
        let mut accepted = None;
        // Minimizer of the quadratic through f(0), f'(0) and f(alpha); exact
        // for quadratic costs.
        let curv = f0 - fx - slope * alpha;
        if f0.is_finite() && curv > 0.0 {
            let aq = (-slope * alpha * alpha / (2.0 * curv)).clamp(0.1 * alpha, 10.0 * alpha);
            if (aq - alpha).abs() > 1e-3 * alpha {
                let (fq, gq) = f(&(&x + &dir * aq));
                if armijo(aq, fq) && fq <= f0 {
                    accepted = Some((aq, fq, gq));
                }
            }
        }
        if accepted.is_none() && armijo(alpha, f0) {
            accepted = Some((alpha, f0, g0));
        }
        if accepted.is_none() {
            for _ in 0..settings.max_backtracks {
                alpha *= 0.5;
                let (ft, gt) = f(&(&x + &dir * alpha));
                if armijo(alpha, ft) {
                    accepted = Some((alpha, ft, gt));
                    break;
                }
            }
        }
        let accepted = accepted.map(|(a, fa, ga)| {
            alpha = a;
            (&x + &dir * a, fa, ga)
        });
        let Some((xn, fn_, gn)) = accepted else {
            line_search_failed = true;
            break;
        };
        iterations += 1;
        since_restart += 1;
        let beta = if since_restart >= restart {
            since_restart = 0;
            0.0
        } else {
            (gn.dot(&(&gn - &g)) / g.norm_squared()).max(0.0)
        };
        let new_dir = -&gn + &dir * beta;
        // Next trial step: keep the predicted first-order decrease.
        let new_slope = gn.dot(&new_dir);
        step = if new_slope < 0.0 { (alpha * slope / new_slope).min(1e3 * alpha).max(1e-12) } else { alpha };
        x = xn;
        fx = fn_;
        g = gn;
        dir = new_dir;
        costs.push(fx);
    }
    let converged = stop(&g, &x);
    let grad_ratio = g.norm() / x.norm().max(1.0);
    let grad_reduction = if g_initial > 0.0 { g.norm() / g_initial } else { 0.0 };
    CgResult { x, cost: fx, iterations, converged, line_search_failed, grad_ratio, grad_reduction, costs }
}

/// 4DVar with the control vector `(u0, alpha[which])`.
pub fn minimize_window_with_params(
    model: &Model,
    u0: &DVector<f64>,
    which: &[usize],
    alpha0: &[f64],
    window: &VarWindow,
    settings: &CgSettings,
) -> Result<(CgResult, Vec<f64>)> {
    if which.len() != alpha0.len() || which.iter().any(|&i| i >= model.n_params()) {
        return Err(Error::InvalidInput("parameter selection does not match the model".into()));
    }
    let d = u0.len();
    let base = model.params().to_vec();
    let params_of = |z: &DVector<f64>| {
        let mut p = base.clone();
        for (k, &i) in which.iter().enumerate() {
            p[i] = z[d + k];
        }
        p
    };
    let objective = |z: &DVector<f64>| {
        let Ok(m) = model.with_params(&params_of(z)) else {
            return (f64::INFINITY, DVector::zeros(z.len()));
        };
        let x = z.rows(0, d).clone_owned();
        let e = cost_and_gradient(&m, &x, window);
        let g = DVector::from_iterator(d + which.len(), e.grad.iter().cloned().chain(which.iter().map(|&i| e.grad_params[i])));
        (e.cost, g)
    };
    let z0 = DVector::from_iterator(d + which.len(), u0.iter().chain(alpha0).cloned());
    let res = minimize_cg(objective, &z0, settings);
    let params = params_of(&res.x);
    Ok((res, params))
}

/// Sequential 4DVar over the windows of `schedule` (all windows have length
/// `window_len`; `init_len` is not used). The first window starts from the
/// first observation, later windows from the previous window's forecast of
/// their initial time.
pub fn fourdvar_driver(
    model: &Model,
    obs: &ObservationSet,
    schedule: &WindowSchedule,
    settings: &CgSettings,
) -> Result<AssimilationReport> {
    Ok(fourdvar_param_driver(model, obs, schedule, &[], settings)?.0)
}

/// [`fourdvar_driver`] with selected parameters added to the control vector;
/// each window starts from the previous window's parameter estimate. Returns
/// the report and the final parameter vector.
pub fn fourdvar_param_driver(
    model: &Model,
    obs: &ObservationSet,
    schedule: &WindowSchedule,
    which: &[usize],
    settings: &CgSettings,
) -> Result<(AssimilationReport, Vec<f64>)> {
    if !obs.is_full_state() {
        return Err(Error::InvalidInput("4DVar initialization needs full-state observations".into()));
    }
    let total = crate::obs::steps_for(schedule.horizon, model.map_dt())?;
    let len = crate::obs::steps_for(schedule.window_len, model.map_dt())?;
    if len == 0 || obs.times.first() != Some(&0) {
        return Err(Error::InvalidInput("observations must start at step 0 and windows must be non-empty".into()));
    }
    let mut params = model.params().to_vec();
    let mut guess = obs.values[0].clone();
    let mut states: Vec<DVector<f64>> = Vec::with_capacity(total + 1);
    let mut windows = Vec::new();
    let mut start = 0;
    while start < total {
        let steps = len.min(total - start);
        let window = VarWindow::new(obs, start, steps)?;
        let alpha0: Vec<f64> = which.iter().map(|&i| params[i]).collect();
        let (res, new_params) = minimize_window_with_params(model, &guess, which, &alpha0, &window, settings)?;
        let m = model.with_params(&new_params)?;
        let orbit = m.orbit(&res.x.rows(0, model.dim()).clone_owned(), steps);
        let termination = if res.converged {
            Termination::Converged
        } else if res.line_search_failed && res.grad_reduction < settings.floor_tol {
            Termination::ConvergedAtFloor
        } else if res.line_search_failed {
            Termination::Failed(Error::InvalidInput(format!("line search failed at relative gradient {:e}, reduction {:e}", res.grad_ratio, res.grad_reduction)))
        } else {
            Termination::MaxIterations
        };
        let (orbit, termination) = match orbit {
            Ok(o) => {
                params = new_params;
                (o, termination)
            }
            Err(e) => {
                // Fall back to the guess orbit under the previous parameters.
                let prev = model.with_params(&params)?;
                (prev.orbit(&guess, steps)?, Termination::Failed(e))
            }
        };
        states.truncate(start);
        states.extend(orbit.states().iter().cloned());
        guess = orbit.last().clone();
        windows.push(WindowReport {
            index: windows.len(),
            start,
            end: start + steps,
            method: WindowMethod::FourDVar,
            iterations: res.iterations,
            termination,
            history: res.costs,
        });
        start += steps;
    }
    let estimate = Trajectory::new(states)?;
    Ok((AssimilationReport { estimate, windows, scores: None }, params))
}
