//! Browser bindings for three interactive operations:
//!
//! - [`assimilate_lorenz63`]: a twin experiment with the projected Newton
//!   method on Lorenz 63;
//! - [`sync_errors`]: synchronization error curves on Lorenz 96 for several
//!   frame widths;
//! - [`lyapunov_spectrum`]: Lyapunov exponents along a model orbit.
//!
//! The computations live in plain functions so they can be tested natively;
//! the `#[wasm_bindgen]` wrappers only convert errors.

use shadow_da::assimilate::{drive_response, window_driver, DriverSettings, NewtonSettings, WindowSchedule};
use shadow_da::obs::{generate_truth, observe, rng, standard_normal_vector, steps_for, Noise};
use shadow_da::tangent::{identity_seed, lyapunov_exponents, propagate_frames, spin_up_frame};
use shadow_da::{DMatrix, DynamicalMap, Model, Trajectory};
use wasm_bindgen::prelude::*;

/// Largest number of map steps a single request may cover; keeps the page
/// responsive.
pub const MAX_STEPS: usize = 20_000;

fn check_steps(time: f64, map_dt: f64) -> Result<usize, String> {
    let n = steps_for(time, map_dt).map_err(|e| e.to_string())?;
    if n == 0 || n > MAX_STEPS {
        return Err(format!("time span {time} gives {n} steps; allowed 1..={MAX_STEPS}"));
    }
    Ok(n)
}

fn flatten(t: &Trajectory) -> Vec<f64> {
    t.states().iter().flat_map(|s| s.iter().copied()).collect()
}

/// Result of a Lorenz 63 twin experiment. Trajectories are flattened row by
/// row (`x1, x2, x3` per time step).
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Assimilation {
    map_dt: f64,
    truth: Vec<f64>,
    observations: Vec<f64>,
    estimate: Vec<f64>,
    c_truth: f64,
    c: f64,
    mse: f64,
    mean_iterations: f64,
    windows: usize,
    converged_windows: usize,
}

#[wasm_bindgen]
impl Assimilation {
    #[wasm_bindgen(getter)]
    pub fn map_dt(&self) -> f64 {
        self.map_dt
    }
    #[wasm_bindgen(getter)]
    pub fn truth(&self) -> Vec<f64> {
        self.truth.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn observations(&self) -> Vec<f64> {
        self.observations.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn estimate(&self) -> Vec<f64> {
        self.estimate.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn c_truth(&self) -> f64 {
        self.c_truth
    }
    #[wasm_bindgen(getter)]
    pub fn c(&self) -> f64 {
        self.c
    }
    #[wasm_bindgen(getter)]
    pub fn mse(&self) -> f64 {
        self.mse
    }
    #[wasm_bindgen(getter)]
    pub fn mean_iterations(&self) -> f64 {
        self.mean_iterations
    }
    #[wasm_bindgen(getter)]
    pub fn windows(&self) -> usize {
        self.windows
    }
    #[wasm_bindgen(getter)]
    pub fn converged_windows(&self) -> usize {
        self.converged_windows
    }
}

/// Lorenz 63 (forward Euler, dt = 0.005) observed in full with Gaussian
/// noise of the given variance, assimilated by projected Newton with frame
/// width `p` on windows of `window_len` time units.
pub fn run_lorenz63(variance: f64, horizon: f64, p: usize, window_len: f64, seed: u64) -> Result<Assimilation, String> {
    if !(variance.is_finite() && variance >= 0.0) {
        return Err("variance must be non-negative".into());
    }
    if !(1..=3).contains(&p) {
        return Err("p must be 1, 2 or 3".into());
    }
    let model = Model::lorenz63(0.005, 1);
    check_steps(horizon, model.map_dt())?;
    let s = |e: shadow_da::Error| e.to_string();
    let truth = generate_truth(&model, horizon, seed).map_err(s)?;
    let obs = observe(&truth, &DMatrix::identity(3, 3), Noise::gaussian_variance(variance), 1, seed.wrapping_add(1))
        .map_err(s)?;
    let proxy = obs.as_trajectory().map_err(s)?;
    let schedule = WindowSchedule { init_len: window_len, window_len, horizon };
    let settings = DriverSettings { newton: NewtonSettings::with_p(p), ..DriverSettings::default() };
    let mut report = window_driver(&model, &proxy, &schedule, &settings).map_err(s)?;
    let scores = report.score(&model, &truth, &obs, None).map_err(s)?.clone();
    Ok(Assimilation {
        map_dt: model.map_dt(),
        truth: flatten(&truth),
        observations: flatten(&proxy),
        estimate: flatten(&report.estimate),
        c_truth: scores.c_truth,
        c: scores.c,
        mse: scores.mse,
        mean_iterations: scores.mean_iterations,
        windows: scores.windows,
        converged_windows: scores.converged_windows,
    })
}

/// Sup-norm error curves of a response driven by a Lorenz 96 orbit (36
/// sites, forcing 8, 10 Euler steps of 0.005 per map step) through frames of
/// each width in `p_values`. Returns one curve per width, concatenated; a
/// curve that blew up is filled with NaN.
pub fn run_sync(p_values: &[usize], horizon: f64, seed: u64) -> Result<Vec<f64>, String> {
    let d = 36;
    let model = Model::lorenz96(d, 8.0, 0.005, 10).map_err(|e| e.to_string())?;
    let steps = check_steps(horizon, model.map_dt())?;
    if let Some(p) = p_values.iter().find(|&&p| p == 0 || p > d) {
        return Err(format!("frame width {p} outside 1..={d}"));
    }
    let spin = steps_for(20.0, model.map_dt()).map_err(|e| e.to_string())?;
    let full = generate_truth(&model, horizon + 20.0, seed).map_err(|e| e.to_string())?;
    let pre = full.slice(0, spin).map_err(|e| e.to_string())?;
    let driver = Trajectory::new(full.slice(spin, spin + steps).map_err(|e| e.to_string())?.into_states())
        .map_err(|e| e.to_string())?;
    let z0 = &driver[0] + standard_normal_vector(&mut rng(seed.wrapping_add(1)), d);
    let mut out = Vec::with_capacity(p_values.len() * driver.len());
    for &p in p_values {
        let curve = spin_up_frame(&model, &pre, p, spin)
            .and_then(|q0| propagate_frames(&model, &driver, &q0))
            .and_then(|frame| drive_response(&model, &driver, &frame, &z0));
        match curve {
            Ok(z) => out.extend((0..driver.len()).map(|n| (&z[n] - &driver[n]).amax())),
            Err(_) => out.extend(std::iter::repeat_n(f64::NAN, driver.len())),
        }
    }
    Ok(out)
}

/// Lyapunov exponents of `"lorenz63"` (dt = 0.005) or `"lorenz96"` (`dim`
/// sites, 10 Euler steps of 0.005 per map step) along an orbit of length
/// `horizon`.
pub fn run_lyapunov(model: &str, dim: usize, horizon: f64, seed: u64) -> Result<Vec<f64>, String> {
    let m = match model {
        "lorenz63" => Model::lorenz63(0.005, 1),
        "lorenz96" => Model::lorenz96(dim, 8.0, 0.005, 10).map_err(|e| e.to_string())?,
        other => return Err(format!("unknown model `{other}`")),
    };
    check_steps(horizon, m.map_dt())?;
    let truth = generate_truth(&m, horizon, seed).map_err(|e| e.to_string())?;
    let frame = propagate_frames(&m, &truth, &identity_seed(m.dim(), m.dim())).map_err(|e| e.to_string())?;
    Ok(lyapunov_exponents(&frame, m.map_dt()).iter().copied().collect())
}

#[wasm_bindgen]
pub fn assimilate_lorenz63(
    variance: f64,
    horizon: f64,
    p: usize,
    window_len: f64,
    seed: u32,
) -> Result<Assimilation, JsError> {
    run_lorenz63(variance, horizon, p, window_len, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sync_errors(p_values: Vec<u32>, horizon: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    let ps: Vec<usize> = p_values.iter().map(|&p| p as usize).collect();
    run_sync(&ps, horizon, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn lyapunov_spectrum(model: &str, dim: usize, horizon: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    run_lyapunov(model, dim, horizon, u64::from(seed)).map_err(|e| JsError::new(&e))
}
