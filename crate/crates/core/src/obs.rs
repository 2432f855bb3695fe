//! Twin-experiment data: truth runs, noisy observations and completion of
//! partial observations by direct insertion.
//!
//! All randomness comes from `ChaCha20Rng::seed_from_u64(seed)`; the same seed
//! always reproduces the same truth and noise.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::{DynamicalMap, Model, Trajectory};

/// Model time discarded before a truth run is recorded.
pub const TRANSIENT_TIME: f64 = 10.0;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn standard_normal_vector<R: Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Number of map steps covering `time`, which must be a whole multiple of the
/// map step.
pub fn steps_for(time: f64, map_dt: f64) -> Result<usize> {
    let n = time / map_dt;
    let rounded = n.round();
    if !(time >= 0.0) || (n - rounded).abs() > 1e-6 * rounded.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "time span {time} is not a multiple of the map step {map_dt}"
        )));
    }
    Ok(rounded as usize)
}

/// Truth over `[0, horizon]` at map resolution, started from a standard
/// Gaussian state after a discarded transient of [`TRANSIENT_TIME`].
pub fn generate_truth(model: &Model, horizon: f64, seed: u64) -> Result<Trajectory> {
    generate_truth_with_transient(model, horizon, seed, TRANSIENT_TIME)
}

pub fn generate_truth_with_transient(model: &Model, horizon: f64, seed: u64, transient: f64) -> Result<Trajectory> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
    }
    let n = steps_for(horizon, model.map_dt())?;
    let spin = (transient / model.map_dt()).round() as usize;
    let mut x = standard_normal_vector(&mut rng(seed), model.dim());
    for k in 0..spin {
        x = model.step(&x).map_err(|e| e.at_step(k))?;
    }
    model.orbit(&x, n)
}

/// Observation noise distribution, independent per component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    Gaussian { std: f64 },
    /// Uniform on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
}

impl Noise {
    pub fn gaussian_variance(variance: f64) -> Self {
        Noise::Gaussian { std: variance.sqrt() }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Noise::Gaussian { std } => std * std,
            Noise::Uniform { half_width } => half_width * half_width / 3.0,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Noise::Gaussian { std } => std * rng.sample::<f64, _>(StandardNormal),
            Noise::Uniform { half_width } => half_width * (2.0 * rng.random::<f64>() - 1.0),
        }
    }
}

/// Noisy observations `y[n] = H x[n] + noise` on a subset of map steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    /// Global map-step indices of the observations, increasing.
    pub times: Vec<usize>,
    /// `b x d` observation operator.
    pub h: DMatrix<f64>,
    pub noise: Noise,
    pub values: Vec<DVector<f64>>,
    pub seed: u64,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// True when `H` picks coordinates (each row a unit coordinate vector).
    pub fn is_selector(&self) -> bool {
        self.h.row_iter().all(|row| {
            let nonzero: Vec<f64> = row.iter().cloned().filter(|v| *v != 0.0).collect();
            nonzero == [1.0]
        })
    }

    pub fn is_full_state(&self) -> bool {
        self.h.is_square() && self.h == DMatrix::identity(self.h.nrows(), self.h.ncols())
    }

    /// The observations themselves as a trajectory (full-state observations
    /// only).
    pub fn as_trajectory(&self) -> Result<Trajectory> {
        if !self.is_full_state() {
            return Err(Error::InvalidInput("observations do not cover the full state".into()));
        }
        Trajectory::with_offset(self.values.clone(), self.times[0])
    }

    /// Observations restricted to global times in `start..=end`.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let keep: Vec<usize> = (0..self.times.len())
            .filter(|&i| self.times[i] >= start && self.times[i] <= end)
            .collect();
        Self {
            times: keep.iter().map(|&i| self.times[i]).collect(),
            h: self.h.clone(),
            noise: self.noise,
            values: keep.iter().map(|&i| self.values[i].clone()).collect(),
            seed: self.seed,
        }
    }

    /// A stable fingerprint of the observed values, used to check that two
    /// runs saw identical data.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits.
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bits: u64| {
            for byte in bits.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (t, v) in self.times.iter().zip(&self.values) {
            feed(*t as u64);
            for x in v.iter() {
                feed(x.to_bits());
            }
        }
        for x in self.h.iter() {
            feed(x.to_bits());
        }
        hash
    }
}

/// `b x d` operator selecting the listed coordinates.
pub fn coordinate_selector(d: usize, coords: &[usize]) -> Result<DMatrix<f64>> {
    let mut h = DMatrix::zeros(coords.len(), d);
    for (row, &c) in coords.iter().enumerate() {
        if c >= d {
            return Err(Error::InvalidInput(format!("coordinate {c} outside dimension {d}")));
        }
        h[(row, c)] = 1.0;
    }
    Ok(h)
}

/// Observes every `every_k`-th state of `truth` through `h` with noise.
pub fn observe(truth: &Trajectory, h: &DMatrix<f64>, noise: Noise, every_k: usize, seed: u64) -> Result<ObservationSet> {
    let n = truth.steps();
    if every_k == 0 || !n.is_multiple_of(every_k) {
        return Err(Error::InvalidInput(format!(
            "observation interval {every_k} must divide the {n} trajectory steps"
        )));
    }
    if h.ncols() != truth.dim() {
        return Err(Error::LengthMismatch { expected: truth.dim(), found: h.ncols() });
    }
    let mut rng = rng(seed);
    let mut times = Vec::with_capacity(n / every_k + 1);
    let mut values = Vec::with_capacity(n / every_k + 1);
    for k in (0..=n).step_by(every_k) {
        let clean = h * &truth[k];
        let noisy = DVector::from_fn(clean.len(), |i, _| clean[i] + noise.sample(&mut rng));
        times.push(truth.offset + k);
        values.push(noisy);
    }
    Ok(ObservationSet { times, h: h.clone(), noise, values, seed })
}

/// Completes partial coordinate observations into a full-state proxy by
/// the receiver recursion `z[n+1] = H^T y[n+1] + (I - H^T H) F(z[n])`.
///
/// Observations must be available at every map step. `z0` defaults to the
/// first observation lifted with zeros in the unobserved components.
pub fn direct_insertion_complete<M: DynamicalMap + ?Sized>(
    model: &M,
    obs: &ObservationSet,
    z0: Option<&DVector<f64>>,
) -> Result<Trajectory> {
    if !obs.is_selector() {
        return Err(Error::InvalidInput("direct insertion needs a coordinate selector".into()));
    }
    if obs.times.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::InvalidInput("direct insertion needs observations at every map step".into()));
    }
    let ht = obs.h.transpose();
    let lift = |y: &DVector<f64>| &ht * y;
    let keep = DMatrix::identity(model.dim(), model.dim()) - &ht * &obs.h;
    let mut z = match z0 {
        Some(z) => &keep * z + lift(&obs.values[0]),
        None => lift(&obs.values[0]),
    };
    let mut states = Vec::with_capacity(obs.len());
    states.push(z.clone());
    for (k, y) in obs.values.iter().enumerate().skip(1) {
        let f = model.step(&z).map_err(|e| e.at_step(k - 1))?;
        z = lift(y) + &keep * f;
        states.push(z.clone());
    }
    Trajectory::with_offset(states, obs.times[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assimilate::residual;

    #[test]
    fn truth_is_deterministic_orbit() {
        let m = Model::lorenz63(0.005, 1);
        let a = generate_truth(&m, 1.0, 42).unwrap();
        let b = generate_truth(&m, 1.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps(), 200);
        let c = generate_truth(&m, 1.0, 43).unwrap();
        assert_ne!(a, c);
        let r = residual(&m, &a).unwrap();
        assert!(r.max_abs() < 1e-13);
    }

    #[test]
    fn l96_truth_is_bounded() {
        let m = Model::lorenz96(36, 8.0, 0.005, 10).unwrap();
        let t = generate_truth(&m, 50.0, 7).unwrap();
        assert!(t.states().iter().all(|s| s.amax() < 20.0));
    }

    #[test]
    fn noiseless_observations_are_exact() {
        let m = Model::lorenz63(0.005, 1);
        let t = generate_truth(&m, 1.0, 1).unwrap();
        let h = coordinate_selector(3, &[0, 2]).unwrap();
        let o = observe(&t, &h, Noise::Gaussian { std: 0.0 }, 5, 9).unwrap();
        assert_eq!(o.len(), 41);
        for (k, y) in o.times.iter().zip(&o.values) {
            assert_eq!(*y, &h * &t[*k]);
        }
        assert!(observe(&t, &h, Noise::Gaussian { std: 0.0 }, 7, 9).is_err());
    }

    #[test]
    fn noise_variance_matches() {
        let m = Model::lorenz63(0.005, 1);
        let t = generate_truth(&m, 20.0, 2).unwrap();
        let eye = DMatrix::identity(3, 3);
        for noise in [Noise::gaussian_variance(1.0), Noise::gaussian_variance(4.0), Noise::Uniform { half_width: 2.0 }] {
            let o = observe(&t, &eye, noise, 1, 3).unwrap();
            for c in 0..3 {
                let var: f64 = o.times.iter().zip(&o.values).map(|(k, y)| (y[c] - t[*k][c]).powi(2)).sum::<f64>()
                    / o.len() as f64;
                assert!((var / noise.variance() - 1.0).abs() < 0.1, "{noise:?} {var}");
            }
        }
    }

    #[test]
    fn direct_insertion_full_state_returns_observations() {
        let m = Model::lorenz63(0.005, 1);
        let t = generate_truth(&m, 1.0, 4).unwrap();
        let o = observe(&t, &DMatrix::identity(3, 3), Noise::gaussian_variance(1.0), 1, 5).unwrap();
        let z = direct_insertion_complete(&m, &o, None).unwrap();
        assert_eq!(z.states(), o.values.as_slice());
    }

    #[test]
    fn direct_insertion_synchronizes_l63_from_x1() {
        let m = Model::lorenz63(0.005, 1);
        let t = generate_truth(&m, 60.0, 6).unwrap();
        let h = coordinate_selector(3, &[0]).unwrap();
        let o = observe(&t, &h, Noise::Gaussian { std: 0.0 }, 1, 0).unwrap();
        let z0 = &t[0] + DVector::from_vec(vec![0.0, 5.0, -7.0]);
        let z = direct_insertion_complete(&m, &o, Some(&z0)).unwrap();
        let tail = (z.steps() - 2000..=z.steps()).map(|k| (&z[k] - &t[k]).amax()).fold(0.0, f64::max);
        assert!(tail < 1e-6, "sup error after transient {tail}");
        for (k, y) in o.values.iter().enumerate() {
            assert_eq!(z[k][0], y[0]);
        }
    }

    #[test]
    fn fingerprint_tracks_values() {
        let m = Model::lorenz63(0.005, 1);
        let t = generate_truth(&m, 1.0, 4).unwrap();
        let eye = DMatrix::identity(3, 3);
        let a = observe(&t, &eye, Noise::gaussian_variance(1.0), 1, 5).unwrap();
        let b = observe(&t, &eye, Noise::gaussian_variance(1.0), 1, 5).unwrap();
        let c = observe(&t, &eye, Noise::gaussian_variance(1.0), 1, 6).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
