//! Thin QR tangent frames along a trajectory.
//!
//! `Q[n+1] R[n+1] = DF(u[n]) Q[n]` is a generalized power iteration: the
//! leading columns of `Q[n]` converge to the dominant Lyapunov subspace, and
//! the log-diagonal of `R` averages to the Lyapunov exponents. The projector
//! onto the tracked (non-stable) subspace is `P[n] = Q[n] Q[n]^T`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::mgs_qr_with;
use crate::models::{DynamicalMap, Trajectory};

/// Orthonormal bases `Q[0..=N]` and the coupling blocks between them.
///
/// `coupling[n]` is `Q[n+1]^T DF(u[n]) Q[n]`. For frames built by
/// [`propagate_frames`] this is the triangular QR factor `R[n+1]`; for a
/// [`TangentFrame::fixed`] frame it is a general `p x p` block.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentFrame {
    bases: Vec<DMatrix<f64>>,
    coupling: Vec<DMatrix<f64>>,
}

impl TangentFrame {
    /// The same basis `q` at every step, e.g. a coordinate selector.
    pub fn fixed<M: DynamicalMap + ?Sized>(model: &M, traj: &Trajectory, q: &DMatrix<f64>) -> Self {
        let n = traj.steps();
        let coupling = (0..n)
            .map(|k| q.tr_mul(&model.tangent_apply(&traj[k], q)))
            .collect();
        Self { bases: vec![q.clone(); n + 1], coupling }
    }

    pub fn dim(&self) -> usize {
        self.bases[0].ncols()
    }

    pub fn steps(&self) -> usize {
        self.coupling.len()
    }

    /// `Q[n]`, `d x p`.
    pub fn basis(&self, n: usize) -> &DMatrix<f64> {
        &self.bases[n]
    }

    /// `Q[n+1]^T DF(u[n]) Q[n]`, i.e. `R[n+1]` for QR frames.
    pub fn coupling(&self, n: usize) -> &DMatrix<f64> {
        &self.coupling[n]
    }

    /// `P[n] v`.
    pub fn project(&self, n: usize, v: &DVector<f64>) -> DVector<f64> {
        let q = &self.bases[n];
        q * q.tr_mul(v)
    }

    /// `(I - P[n]) v`.
    pub fn project_out(&self, n: usize, v: &DVector<f64>) -> DVector<f64> {
        v - self.project(n, v)
    }

    /// Dense `P[n]`; only for diagnostics.
    pub fn projector(&self, n: usize) -> DMatrix<f64> {
        let q = &self.bases[n];
        q * q.transpose()
    }

    /// CSV rows of `diag(R[n])` and running exponent estimates.
    pub fn diagnostics_csv(&self, map_dt: f64) -> String {
        let p = self.dim();
        let mut out = String::from("step");
        for i in 0..p {
            let _ = write!(out, ",r{}", i + 1);
        }
        for i in 0..p {
            let _ = write!(out, ",lambda{}", i + 1);
        }
        out.push('\n');
        let mut sums = vec![0.0; p];
        for (n, r) in self.coupling.iter().enumerate() {
            let _ = write!(out, "{}", n + 1);
            for i in 0..p {
                sums[i] += r[(i, i)].ln();
                let _ = write!(out, ",{:.16e}", r[(i, i)]);
            }
            for s in &sums {
                let _ = write!(out, ",{:.16e}", s / ((n + 1) as f64 * map_dt));
            }
            out.push('\n');
        }
        out
    }
}

/// Propagates `q0` along `traj`, re-orthonormalizing with modified
/// Gram-Schmidt at every step.
pub fn propagate_frames<M: DynamicalMap + ?Sized>(
    model: &M,
    traj: &Trajectory,
    q0: &DMatrix<f64>,
) -> Result<TangentFrame> {
    propagate_frames_with(model, traj, q0, false)
}

pub fn propagate_frames_with<M: DynamicalMap + ?Sized>(
    model: &M,
    traj: &Trajectory,
    q0: &DMatrix<f64>,
    reorthogonalize: bool,
) -> Result<TangentFrame> {
    if q0.nrows() != traj.dim() {
        return Err(Error::LengthMismatch { expected: traj.dim(), found: q0.nrows() });
    }
    let n = traj.steps();
    let mut bases = Vec::with_capacity(n + 1);
    let mut coupling = Vec::with_capacity(n);
    bases.push(q0.clone());
    for k in 0..n {
        let image = model.tangent_apply(&traj[k], &bases[k]);
        let qr = mgs_qr_with(&image, reorthogonalize).map_err(|_| Error::FrameRank { step: k + 1 })?;
        bases.push(qr.q);
        coupling.push(qr.r);
    }
    Ok(TangentFrame { bases, coupling })
}

/// Time-averaged `ln R[n](i,i)` per unit model time.
pub fn lyapunov_exponents(frame: &TangentFrame, map_dt: f64) -> DVector<f64> {
    let (p, n) = (frame.dim(), frame.steps());
    let mut sums = DVector::zeros(p);
    for r in &frame.coupling {
        for i in 0..p {
            sums[i] += r[(i, i)].ln();
        }
    }
    sums / (n as f64 * map_dt)
}

/// The first `p` columns of the identity.
pub fn identity_seed(d: usize, p: usize) -> DMatrix<f64> {
    DMatrix::identity(d, p)
}

/// Spins up the seed basis `e_1..e_p` along the last `n_spin` steps of
/// `pre`, returning the frame at the final state of `pre`.
pub fn spin_up_frame<M: DynamicalMap + ?Sized>(
    model: &M,
    pre: &Trajectory,
    p: usize,
    n_spin: usize,
) -> Result<DMatrix<f64>> {
    spin_up_frame_from(model, pre, &identity_seed(pre.dim(), p), n_spin)
}

pub fn spin_up_frame_from<M: DynamicalMap + ?Sized>(
    model: &M,
    pre: &Trajectory,
    seed: &DMatrix<f64>,
    n_spin: usize,
) -> Result<DMatrix<f64>> {
    if n_spin == 0 {
        return Ok(seed.clone());
    }
    if n_spin > pre.steps() {
        return Err(Error::InvalidInput(format!(
            "spin-up of {n_spin} steps needs a longer pre-trajectory ({} steps)",
            pre.steps()
        )));
    }
    let start = pre.steps() - n_spin;
    let mut q = seed.clone();
    for k in start..pre.steps() {
        let image = model.tangent_apply(&pre[k], &q);
        q = mgs_qr_with(&image, false)
            .map_err(|_| Error::FrameRank { step: k + 1 - start })?
            .q;
    }
    Ok(q)
}

/// Largest principal angle between the column spaces of two orthonormal
/// bases of equal width.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = a.tr_mul(b).singular_values();
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
    // acos loses accuracy near 1; use the sine of the complement instead.
    let resid = b - a * a.tr_mul(b);
    let sin = resid.singular_values().max().min(1.0);
    if smin > 0.9 { sin.asin() } else { smin.acos() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag_map(entries: &[f64]) -> Model {
        Model::linear_map(DMatrix::from_diagonal(&DVector::from_row_slice(entries))).unwrap()
    }

    fn constant_traj(d: usize, n: usize) -> Trajectory {
        Trajectory::new(vec![DVector::zeros(d); n + 1]).unwrap()
    }

    #[test]
    fn identity_map_keeps_frame() {
        let m = diag_map(&[1.0, 1.0, 1.0]);
        let q0 = mgs_qr_with(&DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]), false).unwrap().q;
        let f = propagate_frames(&m, &constant_traj(3, 5), &q0).unwrap();
        for n in 0..=5 {
            assert!((f.basis(n) - &q0).amax() < 1e-15);
        }
        for n in 0..5 {
            assert!((f.coupling(n) - DMatrix::identity(2, 2)).amax() < 1e-15);
        }
    }

    #[test]
    fn diagonal_map_factors_and_exponents() {
        let m = diag_map(&[2.0, 0.5]);
        let f = propagate_frames(&m, &constant_traj(2, 10), &identity_seed(2, 2)).unwrap();
        for n in 0..10 {
            assert!((f.coupling(n) - DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 0.5]))).amax() < 1e-15);
        }
        let lam = lyapunov_exponents(&f, 1.0);
        assert!((lam[0] - 2f64.ln()).abs() < 1e-14);
        assert!((lam[1] - 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn full_frame_projector_is_identity() {
        let m = Model::lorenz63(0.005, 1);
        let traj = m.orbit(&DVector::from_vec(vec![1.0, 2.0, 20.0]), 50).unwrap();
        let f = propagate_frames(&m, &traj, &identity_seed(3, 3)).unwrap();
        for n in [0, 17, 50] {
            assert!((f.projector(n) - DMatrix::identity(3, 3)).amax() < 1e-12);
        }
    }

    #[test]
    fn frames_reproduce_fundamental_matrix() {
        let m = Model::lorenz63(0.005, 1);
        let traj = m.orbit(&DVector::from_vec(vec![-3.0, 2.0, 25.0]), 200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q0 = mgs_qr_with(&DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5), false).unwrap().q;
        let f = propagate_frames(&m, &traj, &q0).unwrap();
        // X_N = Q_N R_N ... R_1 Q_0^T, checked on random vectors.
        let mut rprod = DMatrix::identity(3, 3);
        for n in 0..200 {
            rprod = f.coupling(n) * rprod;
        }
        for _ in 0..5 {
            let v = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            let mut direct = v.clone();
            for n in 0..200 {
                direct = m.tangent(&traj[n]) * direct;
            }
            let framed = f.basis(200) * (&rprod * q0.tr_mul(&v));
            assert!((&framed - &direct).norm() <= 1e-8 * direct.norm());
        }
        for n in 0..200 {
            let lhs = f.basis(n + 1) * f.coupling(n);
            let rhs = m.tangent_apply(&traj[n], f.basis(n));
            assert!((lhs - &rhs).amax() <= 1e-10 * rhs.amax());
            assert!((f.basis(n).tr_mul(f.basis(n)) - DMatrix::identity(3, 3)).amax() < 1e-12);
        }
    }

    #[test]
    fn projector_is_symmetric_idempotent() {
        let m = Model::lorenz96(8, 8.0, 0.005, 10).unwrap();
        let traj = m.orbit(&DVector::from_fn(8, |i, _| 8.0 + 0.1 * i as f64), 40).unwrap();
        let f = propagate_frames(&m, &traj, &identity_seed(8, 3)).unwrap();
        for n in [0, 20, 40] {
            let p = f.projector(n);
            assert!((&p * &p - &p).amax() < 1e-12);
            assert!((&p - p.transpose()).amax() < 1e-12);
        }
    }

    #[test]
    fn spin_up_zero_steps_returns_seed() {
        let m = diag_map(&[3.0, 1.0, 0.2]);
        let seed = identity_seed(3, 1);
        assert_eq!(spin_up_frame(&m, &constant_traj(3, 4), 1, 0).unwrap(), seed);
    }

    #[test]
    fn spin_up_converges_to_dominant_direction() {
        let m = diag_map(&[3.0, 1.0, 0.2]);
        let seed = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]) / 3f64.sqrt();
        let q = spin_up_frame_from(&m, &constant_traj(3, 50), &seed, 50).unwrap();
        assert!((q[(0, 0)].abs() - 1.0).abs() < 1e-10);
        assert!(q[(1, 0)].abs() < 1e-10 && q[(2, 0)].abs() < 1e-10);
    }

    #[test]
    fn rank_collapse_is_reported() {
        let m = diag_map(&[1.0, 0.0]);
        let err = propagate_frames(&m, &constant_traj(2, 3), &identity_seed(2, 2)).unwrap_err();
        assert_eq!(err, Error::FrameRank { step: 1 });
    }

    #[test]
    fn principal_angle_basics() {
        let a = identity_seed(3, 1);
        let b = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        assert!((max_principal_angle(&a, &b) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(max_principal_angle(&a, &a) < 1e-15);
    }
}
