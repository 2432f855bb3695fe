//! Invariant suite run by `shadow-da selftest`: each check compares a
//! library routine with an independent dense or finite-difference oracle.

use shadow_da::assimilate::{
    assimilate_window, full_newton, synchronize_stable, NewtonSettings, Projection,
};
use shadow_da::linalg::{mgs_qr, smw_solve, BlockTridiagonal};
use shadow_da::obs::{generate_truth, observe, rng, standard_normal_vector, Noise};
use shadow_da::tangent::{identity_seed, propagate_frames, spin_up_frame};
use shadow_da::{DMatrix, DVector, DynamicalMap, Model, Trajectory};

/// Outcome of one check: the measured error and its tolerance.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub error: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error <= self.tol
    }
}

fn random_matrix(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
    let v = standard_normal_vector(&mut rng(seed), r * c);
    DMatrix::from_column_slice(r, c, v.as_slice())
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn tangent_fd(model: &Model, x: &DVector<f64>, seed: u64) -> f64 {
    let d = model.dim();
    let v = standard_normal_vector(&mut rng(seed), d);
    let h = 1e-6;
    let fd = (model.step(&(x + &v * h)).unwrap() - model.step(&(x - &v * h)).unwrap()) / (2.0 * h);
    let jv = model.tangent_apply(x, &DMatrix::from_column_slice(d, 1, v.as_slice()));
    rel(&jv, &DMatrix::from_column_slice(d, 1, fd.as_slice()))
}

fn adjoint_dot(model: &Model, x: &DVector<f64>, seed: u64) -> f64 {
    let d = model.dim();
    let mut r = rng(seed);
    let v = standard_normal_vector(&mut r, d);
    let w = standard_normal_vector(&mut r, d);
    let jv = model.tangent_apply(x, &DMatrix::from_column_slice(d, 1, v.as_slice()));
    let (jtw, _) = model.adjoint(x, &w);
    let lhs = jv.column(0).dot(&w);
    let rhs = v.dot(&jtw);
    (lhs - rhs).abs() / lhs.abs().max(1.0)
}

fn spd_chain(seed: u64, n: usize, m: usize) -> BlockTridiagonal {
    // Gram structure of a random bidiagonal operator: always SPD.
    let a: Vec<DMatrix<f64>> = (0..n).map(|k| random_matrix(seed + k as u64, m, m) * 0.5).collect();
    let diag = a.iter().map(|ak| ak * ak.transpose() + DMatrix::identity(m, m)).collect();
    let upper = a.iter().skip(1).map(|ak| -ak.transpose()).collect();
    BlockTridiagonal::new(diag, upper).unwrap()
}

/// Runs all checks.
pub fn run_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let l63 = Model::lorenz63(0.005, 10);
    let l96 = Model::lorenz96(36, 8.0, 0.005, 10).unwrap();
    let x63 = generate_truth(&l63, 0.1, 11).unwrap().last().clone();
    let x96 = generate_truth(&l96, 0.1, 12).unwrap().last().clone();

    out.push(Check {
        name: "tangent vs central differences (L63, L96)",
        error: tangent_fd(&l63, &x63, 1).max(tangent_fd(&l96, &x96, 2)),
        tol: 1e-6,
    });
    out.push(Check {
        name: "adjoint dot-product identity (L63, L96)",
        error: adjoint_dot(&l63, &x63, 3).max(adjoint_dot(&l96, &x96, 4)),
        tol: 1e-12,
    });

    let a = random_matrix(5, 40, 12);
    let qr = mgs_qr(&a).unwrap();
    out.push(Check { name: "thin QR reconstruction", error: rel(&(&qr.q * &qr.r), &a), tol: 1e-10 });
    out.push(Check {
        name: "thin QR orthogonality",
        error: (qr.q.transpose() * &qr.q - DMatrix::identity(12, 12)).amax(),
        tol: 1e-12,
    });

    let chain = spd_chain(100, 12, 4);
    let b = standard_normal_vector(&mut rng(6), chain.size());
    let dense = chain.to_dense();
    let oracle = dense.clone().lu().solve(&b).unwrap();
    let x = chain.solve(&b).unwrap();
    out.push(Check {
        name: "block tridiagonal solve vs dense",
        error: (&x - &oracle).norm() / oracle.norm(),
        tol: 1e-9,
    });
    let u = random_matrix(7, chain.size(), 2);
    let x = smw_solve(&chain, &u, &b).unwrap();
    let oracle = (dense + &u * u.transpose()).lu().solve(&b).unwrap();
    out.push(Check { name: "low-rank update solve vs dense", error: (&x - &oracle).norm() / oracle.norm(), tol: 1e-9 });

    let m = Model::lorenz63(0.005, 1);
    let truth = generate_truth(&m, 1.0, 13).unwrap();
    let obs = observe(&truth, &DMatrix::identity(3, 3), Noise::gaussian_variance(1.0), 1, 14).unwrap();
    let proxy = obs.as_trajectory().unwrap();
    let settings = NewtonSettings::with_p(3);
    let full = full_newton(&m, &proxy, &settings);
    let proj = assimilate_window(&m, &proxy, &settings, &Projection::Lyapunov { q0: identity_seed(3, 3) }, None);
    let diff = full
        .estimate
        .states()
        .iter()
        .zip(proj.estimate.states())
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    let both = full.converged() && proj.converged();
    out.push(Check {
        name: "projected Newton with p = d equals full Newton",
        error: if both { diff } else { f64::INFINITY },
        tol: 1e-8,
    });

    // A pseudo-orbit whose jumps lie in the frame is left unchanged.
    let base = generate_truth(&l96, 2.0, 15).unwrap();
    let frame = propagate_frames(&l96, &base, &identity_seed(36, 14)).unwrap();
    let mut states = vec![base[0].clone()];
    let mut r = rng(16);
    for n in 0..base.steps() {
        let c = standard_normal_vector(&mut r, 14) * 1e-3;
        states.push(l96.step(&states[n]).unwrap() + frame.basis(n + 1) * c);
    }
    let ubar = Trajectory::new(states).unwrap();
    let z = synchronize_stable(&l96, &ubar, &frame, &DVector::zeros(36)).unwrap();
    let err = (0..ubar.len()).map(|n| (&z[n] - &ubar[n]).amax() / (1.0 + ubar[n].norm())).fold(0.0, f64::max);
    out.push(Check { name: "synchronization is a no-op for in-frame jumps", error: err, tol: 1e-10 });

    // Stable-only perturbations of an orbit decay under synchronization.
    let p = 15;
    let spin = 400;
    let long = generate_truth(&l96, 60.0, 17).unwrap();
    let pre = long.slice(0, spin).unwrap();
    let orbit = Trajectory::new(long.slice(spin, long.steps()).unwrap().into_states()).unwrap();
    let q0 = spin_up_frame(&l96, &pre, p, spin).unwrap();
    let frame = propagate_frames(&l96, &orbit, &q0).unwrap();
    let mut d0 = frame.project_out(0, &standard_normal_vector(&mut rng(18), 36));
    d0 *= 1e-3 / d0.amax();
    let decay = synchronize_stable(&l96, &orbit, &frame, &d0)
        .map(|z| (&z[orbit.steps()] - orbit.last()).amax())
        .unwrap_or(f64::INFINITY);
    out.push(Check { name: "stable perturbation (1e-3) decays within 40 time units, p = 15", error: decay, tol: 1e-6 });
    out
}
