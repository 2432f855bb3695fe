//! Joint state and parameter estimation.
//!
//! [`newton_with_params`] appends the parameter sensitivities as extra
//! columns of the residual Jacobian; the Gram matrix then becomes the block
//! tridiagonal state part plus a rank-`q` term, solved with
//! Sherman-Morrison-Woodbury. [`trivial_dynamics_estimate`] instead treats the
//! parameters as extra state components with `alpha[n+1] = alpha[n]` and runs
//! plain full Newton on the augmented map.

use nalgebra::{DMatrix, DVector};

use crate::assimilate::{
    apply_update, full_newton, newton_update, residual, AssimilationReport, Monitor, NewtonSettings, Termination,
    WindowMethod, WindowReport,
};
use crate::error::{Error, Result};
use crate::models::{DynamicalMap, Model, Trajectory};

/// Outcome of a parameter estimation run.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEstimate {
    /// State estimate and convergence diagnostics.
    pub report: AssimilationReport,
    /// Full parameter vector of the model with the estimated entries filled in.
    pub params: Vec<f64>,
    /// Estimated entries after each iteration (augmented-Jacobian method) or
    /// the per-step parameter component (trivial dynamics).
    pub history: Vec<Vec<f64>>,
}

impl ParamEstimate {
    pub fn converged(&self) -> bool {
        self.report.converged()
    }

    /// The model with the estimated parameters.
    pub fn model(&self, base: &Model) -> Result<Model> {
        base.with_params(&self.params)
    }
}

fn check_selection(model: &Model, which: &[usize], alpha0: &[f64]) -> Result<Vec<f64>> {
    if which.len() != alpha0.len() {
        return Err(Error::LengthMismatch { expected: which.len(), found: alpha0.len() });
    }
    let q = model.n_params();
    let mut seen = vec![false; q];
    for &i in which {
        if i >= q || seen[i] {
            return Err(Error::InvalidInput(format!("parameter index {i} is out of range or repeated")));
        }
        seen[i] = true;
    }
    let mut params = model.params().to_vec();
    for (&i, &a) in which.iter().zip(alpha0) {
        params[i] = a;
    }
    Ok(params)
}

fn select_columns(m: &DMatrix<f64>, which: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), which.len(), |r, c| m[(r, which[c])])
}

/// Newton iteration on `(u, alpha)` jointly, with the parameters listed in
/// `which` (indices into the model's parameter vector) started at `alpha0`.
///
/// With `which` empty this performs exactly the operations of
/// [`full_newton`]. A singular capacitance matrix is reported as
/// [`Error::ParameterUnidentifiable`]; other numerical failures end the
/// iteration and are recorded in the report.
pub fn newton_with_params(
    model: &Model,
    u0: &Trajectory,
    which: &[usize],
    alpha0: &[f64],
    settings: &NewtonSettings,
) -> Result<ParamEstimate> {
    let mut params = check_selection(model, which, alpha0)?;
    let mut monitor = Monitor::new(settings);
    let mut history = Vec::new();
    let mut u = u0.clone();
    let mut iterations = 0;
    let termination = loop {
        if iterations == settings.max_iter {
            break monitor.exhausted();
        }
        let m = model.with_params(&params)?;
        let step = residual(&m, &u).and_then(|r| {
            let blocks: Vec<DMatrix<f64>> =
                (0..u.steps()).map(|n| select_columns(&m.param_tangent(&u[n]), which)).collect();
            newton_update(&m, &u, &r, Some(&blocks))
        });
        iterations += 1;
        let update = match step {
            Ok(upd) => upd,
            Err(Error::ParameterUnidentifiable) => return Err(Error::ParameterUnidentifiable),
            Err(e) => break Termination::Failed(e),
        };
        let next = match apply_update(&u, &update.delta) {
            Ok(v) => v,
            Err(e) => break Termination::Failed(e),
        };
        let mut next_params = params.clone();
        for (k, &i) in which.iter().enumerate() {
            next_params[i] += update.delta_params[k];
        }
        let ratio = match model.with_params(&next_params).and_then(|m| residual(&m, &next)) {
            Ok(r) => r.norm() / next.norm(),
            Err(_) => f64::INFINITY,
        };
        let verdict = monitor.check(ratio);
        if !matches!(verdict, Some(Termination::Diverged)) {
            u = next;
            params = next_params;
            history.push(which.iter().map(|&i| params[i]).collect());
        }
        if let Some(t) = verdict {
            break t;
        }
    };
    let window = WindowReport {
        index: 0,
        start: u.offset,
        end: u.offset + u.steps(),
        method: WindowMethod::FullNewton,
        iterations,
        termination,
        history: monitor.history,
    };
    Ok(ParamEstimate {
        report: AssimilationReport { estimate: u, windows: vec![window], scores: None },
        params,
        history,
    })
}

/// A model whose selected parameters are carried as extra state components
/// that stay constant in time: `(x, alpha) -> (F(x; alpha), alpha)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedMap {
    base: Model,
    which: Vec<usize>,
}

impl AugmentedMap {
    pub fn new(base: Model, which: Vec<usize>) -> Result<Self> {
        let zeros: Vec<f64> = which.iter().map(|&i| base.params().get(i).copied().unwrap_or(0.0)).collect();
        check_selection(&base, &which, &zeros)?;
        Ok(Self { base, which })
    }

    fn state_dim(&self) -> usize {
        self.base.dim()
    }

    fn split(&self, z: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let d = self.state_dim();
        let mut params = self.base.params().to_vec();
        for (k, &i) in self.which.iter().enumerate() {
            params[i] = z[d + k];
        }
        (z.rows(0, d).clone_owned(), params)
    }

    fn model_at(&self, params: &[f64]) -> Result<Model> {
        self.base.with_params(params)
    }

    /// Lifts a state trajectory with constant parameter components.
    pub fn lift(&self, u: &Trajectory, alpha0: &[f64]) -> Result<Trajectory> {
        if alpha0.len() != self.which.len() {
            return Err(Error::LengthMismatch { expected: self.which.len(), found: alpha0.len() });
        }
        let states = u
            .states()
            .iter()
            .map(|x| DVector::from_iterator(x.len() + alpha0.len(), x.iter().chain(alpha0).cloned()))
            .collect();
        Trajectory::with_offset(states, u.offset)
    }
}

impl DynamicalMap for AugmentedMap {
    fn dim(&self) -> usize {
        self.state_dim() + self.which.len()
    }

    fn n_params(&self) -> usize {
        0
    }

    fn map_dt(&self) -> f64 {
        self.base.map_dt()
    }

    fn step(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let (x, params) = self.split(z);
        let m = self.model_at(&params).map_err(|_| Error::Divergence { step: 0 })?;
        let fx = m.step(&x)?;
        Ok(DVector::from_iterator(self.dim(), fx.iter().chain(z.rows(x.len(), self.which.len()).iter()).cloned()))
    }

    fn tangent_apply(&self, z: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.state_dim();
        let q = self.which.len();
        let (x, params) = self.split(z);
        let mut out = DMatrix::zeros(d + q, v.ncols());
        let Ok(m) = self.model_at(&params) else {
            out.fill(f64::NAN);
            return out;
        };
        let vx = v.rows(0, d).clone_owned();
        let va = v.rows(d, q).clone_owned();
        let top = m.tangent_apply(&x, &vx) + select_columns(&m.param_tangent(&x), &self.which) * &va;
        out.rows_mut(0, d).copy_from(&top);
        out.rows_mut(d, q).copy_from(&va);
        out
    }

    fn param_tangent(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), 0)
    }

    fn adjoint(&self, z: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = self.state_dim();
        let q = self.which.len();
        let (x, params) = self.split(z);
        let Ok(m) = self.model_at(&params) else {
            return (DVector::from_element(d + q, f64::NAN), DVector::zeros(0));
        };
        let wx = w.rows(0, d).clone_owned();
        let (lx, la) = m.adjoint(&x, &wx);
        let mut out = DVector::zeros(d + q);
        out.rows_mut(0, d).copy_from(&lx);
        for (k, &i) in self.which.iter().enumerate() {
            out[d + k] = la[i] + w[d + k];
        }
        (out, DVector::zeros(0))
    }
}

/// Full Newton on the augmented system `(x, alpha)` started from the state
/// proxy `u0` with constant parameters `alpha0`. The estimate is the mean of
/// the parameter components over the trajectory.
pub fn trivial_dynamics_estimate(
    model: &Model,
    u0: &Trajectory,
    which: &[usize],
    alpha0: &[f64],
    settings: &NewtonSettings,
) -> Result<ParamEstimate> {
    check_selection(model, which, alpha0)?;
    let aug = AugmentedMap::new(model.clone(), which.to_vec())?;
    let z0 = aug.lift(u0, alpha0)?;
    let run = full_newton(&aug, &z0, settings);
    let d = model.dim();
    let q = which.len();
    let history: Vec<Vec<f64>> =
        run.estimate.states().iter().map(|z| z.rows(d, q).iter().cloned().collect()).collect();
    let mut params = model.params().to_vec();
    for (k, &i) in which.iter().enumerate() {
        params[i] = history.iter().map(|a| a[k]).sum::<f64>() / history.len() as f64;
    }
    let states = run.estimate.states().iter().map(|z| z.rows(0, d).clone_owned()).collect();
    let estimate = Trajectory::with_offset(states, run.estimate.offset)?;
    Ok(ParamEstimate { report: AssimilationReport { estimate, ..run }, params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Field, Scheme};
    use crate::obs::{generate_truth, observe, Noise};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn growth(a: f64) -> Model {
        Model::new(Field::Growth { dim: 1 }, vec![a], 1.0, 1, Scheme::ForwardEuler).unwrap()
    }

    fn noisy_l63(seed: u64, horizon: f64) -> (Model, Trajectory, Trajectory) {
        let m = Model::lorenz63(0.005, 1);
        let truth = generate_truth(&m, horizon, seed).unwrap();
        let obs = observe(&truth, &DMatrix::identity(3, 3), Noise::gaussian_variance(1.0), 1, seed + 1).unwrap();
        let proxy = obs.as_trajectory().unwrap();
        (m, truth, proxy)
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let m = Model::lorenz63(0.005, 1);
        let orbit = m.orbit(&DVector::from_vec(vec![-5.0, -4.0, 22.0]), 100).unwrap();
        let est = newton_with_params(&m, &orbit, &[0], &[10.0], &NewtonSettings::default()).unwrap();
        assert_eq!(est.params, m.params());
        assert_eq!(est.report.windows[0].iterations, 1);
        let triv = trivial_dynamics_estimate(&m, &orbit, &[0], &[10.0], &NewtonSettings::default()).unwrap();
        assert!((triv.params[0] - 10.0).abs() < 1e-12);
        assert!(triv.converged());
    }

    #[test]
    fn empty_selection_is_full_newton() {
        let (m, _, proxy) = noisy_l63(3, 1.0);
        let est = newton_with_params(&m, &proxy, &[], &[], &NewtonSettings::default()).unwrap();
        let full = full_newton(&m, &proxy, &NewtonSettings::default());
        assert_eq!(est.report, full);
        assert_eq!(est.params, m.params());
    }

    /// Dense minimum-norm solution of `[G'_u | G'_a] (du, da) = -G`.
    fn dense_update(m: &Model, u: &Trajectory, which: &[usize]) -> DVector<f64> {
        let (n, d, q) = (u.steps(), u.dim(), which.len());
        let mut jac = DMatrix::zeros(n * d, (n + 1) * d + q);
        let mut g = DVector::zeros(n * d);
        for k in 0..n {
            jac.view_mut((k * d, k * d), (d, d)).copy_from(&(-m.tangent(&u[k])));
            jac.view_mut((k * d, (k + 1) * d), (d, d)).copy_from(&DMatrix::identity(d, d));
            let pa = select_columns(&m.param_tangent(&u[k]), which);
            jac.view_mut((k * d, (n + 1) * d), (d, q)).copy_from(&(-pa));
            g.rows_mut(k * d, d).copy_from(&(&u[k + 1] - m.step(&u[k]).unwrap()));
        }
        jac.clone().pseudo_inverse(1e-14).unwrap() * (-g)
    }

    #[test]
    fn smw_update_matches_dense_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in 1..=5 {
            for which in [vec![0], vec![1, 2], vec![0, 1, 2]] {
                let m = Model::lorenz63(0.01, 2);
                let states = (0..=n)
                    .map(|_| DVector::from_fn(3, |_, _| 10.0 * (rng.random::<f64>() - 0.5)))
                    .collect();
                let u = Trajectory::new(states).unwrap();
                let r = residual(&m, &u).unwrap();
                let blocks: Vec<DMatrix<f64>> =
                    (0..n).map(|k| select_columns(&m.param_tangent(&u[k]), &which)).collect();
                let upd = newton_update(&m, &u, &r, Some(&blocks)).unwrap();
                let dense = dense_update(&m, &u, &which);
                let mut ours = DVector::zeros(dense.len());
                for k in 0..=n {
                    ours.rows_mut(k * 3, 3).copy_from(&upd.delta[k]);
                }
                ours.rows_mut((n + 1) * 3, which.len()).copy_from(&upd.delta_params);
                assert!((&ours - &dense).norm() <= 1e-9 * dense.norm(), "n={n} which={which:?}");
            }
        }
    }

    #[test]
    fn gram_is_rank_q_update() {
        let m = Model::lorenz63(0.01, 1);
        let u = m.orbit(&DVector::from_vec(vec![1.0, 2.0, 20.0]), 4).unwrap();
        let (n, d) = (u.steps(), u.dim());
        let which = [0, 2];
        let mut ju = DMatrix::zeros(n * d, (n + 1) * d);
        let mut ja = DMatrix::zeros(n * d, 2);
        for k in 0..n {
            ju.view_mut((k * d, k * d), (d, d)).copy_from(&(-m.tangent(&u[k])));
            ju.view_mut((k * d, (k + 1) * d), (d, d)).copy_from(&DMatrix::identity(d, d));
            ja.view_mut((k * d, 0), (d, 2)).copy_from(&(-select_columns(&m.param_tangent(&u[k]), &which)));
        }
        let mut full = DMatrix::zeros(n * d, (n + 1) * d + 2);
        full.view_mut((0, 0), (n * d, (n + 1) * d)).copy_from(&ju);
        full.view_mut((0, (n + 1) * d), (n * d, 2)).copy_from(&ja);
        let lhs = &full * full.transpose();
        let rhs = &ju * ju.transpose() + &ja * ja.transpose();
        assert!((lhs - rhs).amax() < 1e-12);
    }

    /// Gauss-Newton with the dense pseudoinverse on the stacked unknowns.
    fn dense_joint_newton(u0: &Trajectory, a0: f64, iters: usize) -> f64 {
        let n = u0.steps();
        let mut z = DVector::from_iterator(n + 2, u0.states().iter().map(|s| s[0]).chain([a0]));
        for _ in 0..iters {
            let a = z[n + 1];
            let mut jac = DMatrix::zeros(n, n + 2);
            let mut g = DVector::zeros(n);
            for k in 0..n {
                jac[(k, k)] = -a;
                jac[(k, k + 1)] = 1.0;
                jac[(k, n + 1)] = -z[k];
                g[k] = z[k + 1] - a * z[k];
            }
            z += jac.pseudo_inverse(1e-15).unwrap() * (-g);
        }
        z[n + 1]
    }

    #[test]
    fn scalar_growth_rate_matches_dense_oracle() {
        let truth = growth(2.0).orbit(&DVector::from_element(1, 0.3), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = Trajectory::new(
            truth.states().iter().map(|s| s.map(|v| v + 0.05 * (rng.random::<f64>() - 0.5))).collect(),
        )
        .unwrap();
        let est = newton_with_params(&growth(1.0), &noisy, &[0], &[1.5], &NewtonSettings::default()).unwrap();
        assert!(est.converged(), "{:?}", est.report.windows);
        let iters = est.report.windows[0].iterations;
        let oracle = dense_joint_newton(&noisy, 1.5, iters);
        assert!((est.params[0] - oracle).abs() < 1e-6, "{} vs {oracle}", est.params[0]);
        assert!((est.params[0] - 2.0).abs() < 0.1);
    }

    #[test]
    fn augmented_map_linearizations() {
        let aug = AugmentedMap::new(Model::lorenz63(0.005, 3), vec![0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = DVector::from_vec(vec![1.0, -2.0, 20.0, 10.0, 28.0]);
        let v = DVector::from_fn(5, |_, _| rng.random::<f64>() - 0.5);
        let w = DVector::from_fn(5, |_, _| rng.random::<f64>() - 0.5);
        let h = 1e-6;
        let fd = (aug.step(&(&z + &v * h)).unwrap() - aug.step(&(&z - &v * h)).unwrap()) / (2.0 * h);
        let jv = aug.tangent_apply(&z, &DMatrix::from_column_slice(5, 1, v.as_slice()));
        assert!((&fd - jv.column(0)).norm() <= 1e-6 * fd.norm());
        let (jtw, _) = aug.adjoint(&z, &w);
        assert!((jv.column(0).dot(&w) - v.dot(&jtw)).abs() < 1e-12 * (1.0 + jtw.norm() * v.norm()));
    }

    #[test]
    fn selection_is_validated() {
        let m = Model::lorenz63(0.005, 1);
        let u = m.orbit(&DVector::from_vec(vec![1.0, 1.0, 1.0]), 3).unwrap();
        let s = NewtonSettings::default();
        assert!(newton_with_params(&m, &u, &[3], &[1.0], &s).is_err());
        assert!(newton_with_params(&m, &u, &[0, 0], &[1.0, 1.0], &s).is_err());
        assert!(newton_with_params(&m, &u, &[0], &[], &s).is_err());
    }

    #[test]
    fn sigma_recovered_from_noisy_data() {
        let (m, truth, proxy) = noisy_l63(12, 1.0);
        let est = newton_with_params(&m, &proxy, &[0], &[7.0], &NewtonSettings::default()).unwrap();
        assert!(est.converged());
        assert!((est.params[0] - 10.0).abs() < 1.0, "{}", est.params[0]);
        let mse = crate::metrics::mse(&est.report.estimate, &truth).unwrap();
        assert!(mse < 0.5);
    }
}
