//! Discrete dynamical models built from vector fields.
//!
//! A [`Model`] is a vector field discretized by a one-step integrator and
//! composed `substeps` times into a single map `F`. Observations live on the
//! grid of that composed map, so the residual operator, the tangent frames and
//! synchronization all act at observation spacing.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// The continuous-time right-hand side `f(x; alpha)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    /// Lorenz 63 with parameters `[sigma, rho, beta]`.
    Lorenz63,
    /// Lorenz 96 on a periodic ring of `dim` sites with parameter `[forcing]`.
    Lorenz96 { dim: usize },
    /// `f(x) = A x`, no parameters.
    Linear { a: DMatrix<f64> },
    /// `f(x; a) = (a - 1) x`. With forward Euler and a unit step the map is
    /// `x -> a x`, which is handy for scalar parameter problems.
    Growth { dim: usize },
}

impl Field {
    pub fn dim(&self) -> usize {
        match self {
            Field::Lorenz63 => 3,
            Field::Lorenz96 { dim } | Field::Growth { dim } => *dim,
            Field::Linear { a } => a.nrows(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Field::Lorenz63 => 3,
            Field::Lorenz96 { .. } | Field::Growth { .. } => 1,
            Field::Linear { .. } => 0,
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            Field::Lorenz63 => vec!["sigma", "rho", "beta"],
            Field::Lorenz96 { .. } => vec!["forcing"],
            Field::Growth { .. } => vec!["a"],
            Field::Linear { .. } => vec![],
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Field::Lorenz96 { dim } if *dim < 4 => Err(Error::InvalidModel(format!(
                "Lorenz 96 needs at least 4 sites, got {dim}"
            ))),
            Field::Linear { a } if a.nrows() != a.ncols() || a.nrows() == 0 => {
                Err(Error::InvalidModel("linear field matrix must be square".into()))
            }
            Field::Growth { dim: 0 } => Err(Error::InvalidModel("dimension must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &DVector<f64>, alpha: &[f64]) -> DVector<f64> {
        match self {
            Field::Lorenz63 => {
                let (s, r, b) = (alpha[0], alpha[1], alpha[2]);
                DVector::from_vec(vec![
                    s * (x[1] - x[0]),
                    x[0] * (r - x[2]) - x[1],
                    x[0] * x[1] - b * x[2],
                ])
            }
            Field::Lorenz96 { dim } => {
                let d = *dim;
                let f = alpha[0];
                DVector::from_fn(d, |l, _| {
                    let xm2 = x[(l + d - 2) % d];
                    let xm1 = x[(l + d - 1) % d];
                    let xp1 = x[(l + 1) % d];
                    (xp1 - xm2) * xm1 - x[l] + f
                })
            }
            Field::Linear { a } => a * x,
            Field::Growth { .. } => x * (alpha[0] - 1.0),
        }
    }

    /// `J(x) V` for a block of tangent vectors.
    pub fn jac_apply(&self, x: &DVector<f64>, alpha: &[f64], v: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Field::Lorenz96 { dim } => {
                let d = *dim;
                let mut out = DMatrix::zeros(d, v.ncols());
                for c in 0..v.ncols() {
                    let col = v.column(c);
                    for l in 0..d {
                        let (lm2, lm1, lp1) = ((l + d - 2) % d, (l + d - 1) % d, (l + 1) % d);
                        out[(l, c)] = -x[lm1] * col[lm2] + (x[lp1] - x[lm2]) * col[lm1] - col[l]
                            + x[lm1] * col[lp1];
                    }
                }
                out
            }
            Field::Growth { .. } => v * (alpha[0] - 1.0),
            _ => self.jacobian(x, alpha) * v,
        }
    }

    /// `J(x)^T w`.
    pub fn jac_t_apply(&self, x: &DVector<f64>, alpha: &[f64], w: &DVector<f64>) -> DVector<f64> {
        match self {
            Field::Lorenz96 { dim } => {
                let d = *dim;
                let mut out = DVector::zeros(d);
                for l in 0..d {
                    let (lm2, lm1, lp1) = ((l + d - 2) % d, (l + d - 1) % d, (l + 1) % d);
                    out[lm2] -= x[lm1] * w[l];
                    out[lm1] += (x[lp1] - x[lm2]) * w[l];
                    out[l] -= w[l];
                    out[lp1] += x[lm1] * w[l];
                }
                out
            }
            Field::Growth { .. } => w * (alpha[0] - 1.0),
            _ => self.jacobian(x, alpha).tr_mul(w),
        }
    }

    /// Dense Jacobian `df/dx`.
    pub fn jacobian(&self, x: &DVector<f64>, alpha: &[f64]) -> DMatrix<f64> {
        match self {
            Field::Lorenz63 => {
                let (s, r, b) = (alpha[0], alpha[1], alpha[2]);
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[-s, s, 0.0, r - x[2], -1.0, -x[0], x[1], x[0], -b],
                )
            }
            Field::Linear { a } => a.clone(),
            _ => {
                let d = self.dim();
                self.jac_apply(x, alpha, &DMatrix::identity(d, d))
            }
        }
    }

    /// `df/dalpha`, a `d x q` matrix.
    pub fn param_jacobian(&self, x: &DVector<f64>, _alpha: &[f64]) -> DMatrix<f64> {
        match self {
            Field::Lorenz63 => DMatrix::from_row_slice(
                3,
                3,
                &[x[1] - x[0], 0.0, 0.0, 0.0, x[0], 0.0, 0.0, 0.0, -x[2]],
            ),
            Field::Lorenz96 { dim } => DMatrix::from_element(*dim, 1, 1.0),
            Field::Growth { dim } => DMatrix::from_column_slice(*dim, 1, x.as_slice()),
            Field::Linear { a } => DMatrix::zeros(a.nrows(), 0),
        }
    }
}

/// One-step integrator used for each substep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    ForwardEuler,
    Rk4,
}

/// A map `x[n+1] = F(x[n])` with exact tangent, parameter and adjoint
/// linearizations.
pub trait DynamicalMap {
    fn dim(&self) -> usize;

    /// Number of parameters `q` the map depends on.
    fn n_params(&self) -> usize;

    /// Model time covered by one application of the map.
    fn map_dt(&self) -> f64;

    fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// `DF(x) V`.
    fn tangent_apply(&self, x: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64>;

    /// `DF(x)` as a dense matrix.
    fn tangent(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        self.tangent_apply(x, &DMatrix::identity(d, d))
    }

    /// `dF/dalpha` (`d x q`); empty when the map has no parameters.
    fn param_tangent(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Returns `(DF(x)^T w, (dF/dalpha)^T w)`.
    fn adjoint(&self, x: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
}

/// A vector field discretized by `scheme` with step `dt`, composed `substeps`
/// times.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    field: Field,
    params: Vec<f64>,
    dt: f64,
    substeps: usize,
    scheme: Scheme,
}

impl Model {
    pub fn new(field: Field, params: Vec<f64>, dt: f64, substeps: usize, scheme: Scheme) -> Result<Self> {
        field.validate()?;
        if params.len() != field.n_params() {
            return Err(Error::InvalidModel(format!(
                "expected {} parameters, got {}",
                field.n_params(),
                params.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidModel(format!("time step must be positive, got {dt}")));
        }
        if substeps == 0 {
            return Err(Error::InvalidModel("substep count must be at least 1".into()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidModel("parameters must be finite".into()));
        }
        Ok(Self { field, params, dt, substeps, scheme })
    }

    /// Lorenz 63 with sigma = 10, rho = 28, beta = 8/3.
    pub fn lorenz63(dt: f64, substeps: usize) -> Self {
        Self::new(Field::Lorenz63, vec![10.0, 28.0, 8.0 / 3.0], dt, substeps, Scheme::ForwardEuler)
            .expect("valid Lorenz 63 model")
    }

    pub fn lorenz96(dim: usize, forcing: f64, dt: f64, substeps: usize) -> Result<Self> {
        Self::new(Field::Lorenz96 { dim }, vec![forcing], dt, substeps, Scheme::ForwardEuler)
    }

    /// The map `x -> m x` for a fixed matrix `m` (one unit Euler step of
    /// `f(x) = (m - I) x`).
    pub fn linear_map(m: DMatrix<f64>) -> Result<Self> {
        let d = m.nrows();
        let a = m - DMatrix::identity(d, d);
        Self::new(Field::Linear { a }, vec![], 1.0, 1, Scheme::ForwardEuler)
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        Self::new(self.field.clone(), params.to_vec(), self.dt, self.substeps, self.scheme)
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// The same integrator with a single substep per map application.
    pub fn single_substep(&self) -> Self {
        Self { substeps: 1, ..self.clone() }
    }

    /// The same integrator composed `substeps` times.
    pub fn with_substeps(&self, substeps: usize) -> Result<Self> {
        Self::new(self.field.clone(), self.params.clone(), self.dt, substeps, self.scheme)
    }

    pub fn vector_field(&self, x: &DVector<f64>) -> DVector<f64> {
        self.field.eval(x, &self.params)
    }

    fn substep(&self, x: &DVector<f64>) -> DVector<f64> {
        let (f, a, h) = (&self.field, self.params.as_slice(), self.dt);
        match self.scheme {
            Scheme::ForwardEuler => x + f.eval(x, a) * h,
            Scheme::Rk4 => {
                let k1 = f.eval(x, a);
                let k2 = f.eval(&(x + &k1 * (0.5 * h)), a);
                let k3 = f.eval(&(x + &k2 * (0.5 * h)), a);
                let k4 = f.eval(&(x + &k3 * h), a);
                x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            }
        }
    }

    /// One substep of the state together with the tangent block `v`.
    /// `pdir` (q x m) adds parameter directions: the returned tangent is
    /// `DPhi v + dPhi/dalpha pdir`.
    fn substep_tangent(
        &self,
        x: &DVector<f64>,
        v: &DMatrix<f64>,
        pdir: Option<&DMatrix<f64>>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let (f, a, h) = (&self.field, self.params.as_slice(), self.dt);
        let rate = |y: &DVector<f64>, w: &DMatrix<f64>| {
            let mut t = f.jac_apply(y, a, w);
            if let Some(p) = pdir {
                t += f.param_jacobian(y, a) * p;
            }
            t
        };
        match self.scheme {
            Scheme::ForwardEuler => {
                let t = rate(x, v);
                (x + f.eval(x, a) * h, v + t * h)
            }
            Scheme::Rk4 => {
                let k1 = f.eval(x, a);
                let t1 = rate(x, v);
                let x2 = x + &k1 * (0.5 * h);
                let k2 = f.eval(&x2, a);
                let t2 = rate(&x2, &(v + &t1 * (0.5 * h)));
                let x3 = x + &k2 * (0.5 * h);
                let k3 = f.eval(&x3, a);
                let t3 = rate(&x3, &(v + &t2 * (0.5 * h)));
                let x4 = x + &k3 * h;
                let k4 = f.eval(&x4, a);
                let t4 = rate(&x4, &(v + &t3 * h));
                (
                    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0),
                    v + (t1 + t2 * 2.0 + t3 * 2.0 + t4) * (h / 6.0),
                )
            }
        }
    }

    /// Reverse-mode sweep through one substep: given the adjoint `w` of the
    /// output, returns the adjoint of the input and accumulates into `abar`.
    fn substep_adjoint(&self, x: &DVector<f64>, w: &DVector<f64>, abar: &mut DVector<f64>) -> DVector<f64> {
        let (f, a, h) = (&self.field, self.params.as_slice(), self.dt);
        let q = self.params.len();
        let mut pull = |y: &DVector<f64>, kbar: &DVector<f64>| {
            if q > 0 {
                *abar += f.param_jacobian(y, a).tr_mul(kbar);
            }
            f.jac_t_apply(y, a, kbar)
        };
        match self.scheme {
            Scheme::ForwardEuler => {
                let kbar = w * h;
                w + pull(x, &kbar)
            }
            Scheme::Rk4 => {
                let k1 = f.eval(x, a);
                let x2 = x + &k1 * (0.5 * h);
                let k2 = f.eval(&x2, a);
                let x3 = x + &k2 * (0.5 * h);
                let k3 = f.eval(&x3, a);
                let x4 = x + &k3 * h;
                let mut xbar = w.clone();
                let k1bar = w * (h / 6.0);
                let mut k2bar = w * (h / 3.0);
                let mut k3bar = w * (h / 3.0);
                let k4bar = w * (h / 6.0);
                let x4bar = pull(&x4, &k4bar);
                xbar += &x4bar;
                k3bar += &x4bar * h;
                let x3bar = pull(&x3, &k3bar);
                xbar += &x3bar;
                k2bar += &x3bar * (0.5 * h);
                let x2bar = pull(&x2, &k2bar);
                xbar += &x2bar;
                let k1bar = k1bar + &x2bar * (0.5 * h);
                xbar += pull(x, &k1bar);
                xbar
            }
        }
    }

    /// Jacobian of a single substep, used to check the composed tangent.
    pub fn substep_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        self.substep_tangent(x, &DMatrix::identity(d, d), None).1
    }

    /// States visited by the substeps starting at `x` (excluding the endpoint).
    pub fn substep_states(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut states = Vec::with_capacity(self.substeps);
        let mut y = x.clone();
        for _ in 0..self.substeps {
            let next = self.substep(&y);
            states.push(y);
            y = next;
        }
        states
    }

    /// Iterates the map `n` times starting at `x0`.
    pub fn orbit(&self, x0: &DVector<f64>, n: usize) -> Result<Trajectory> {
        let mut states = Vec::with_capacity(n + 1);
        states.push(x0.clone());
        for k in 0..n {
            let next = self.step(&states[k]).map_err(|e| e.at_step(k))?;
            states.push(next);
        }
        Trajectory::new(states)
    }
}

impl DynamicalMap for Model {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn map_dt(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    fn step(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut y = x.clone();
        for k in 0..self.substeps {
            y = self.substep(&y);
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { step: k });
            }
        }
        Ok(y)
    }

    fn tangent_apply(&self, x: &DVector<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x.clone();
        let mut t = v.clone();
        for _ in 0..self.substeps {
            let (ny, nt) = self.substep_tangent(&y, &t, None);
            y = ny;
            t = nt;
        }
        t
    }

    fn param_tangent(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (d, q) = (self.dim(), self.params.len());
        if q == 0 {
            return DMatrix::zeros(d, 0);
        }
        let eye = DMatrix::identity(q, q);
        let mut y = x.clone();
        let mut s = DMatrix::zeros(d, q);
        for _ in 0..self.substeps {
            let (ny, ns) = self.substep_tangent(&y, &s, Some(&eye));
            y = ny;
            s = ns;
        }
        s
    }

    fn adjoint(&self, x: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let states = self.substep_states(x);
        let mut abar = DVector::zeros(self.params.len());
        let mut lam = w.clone();
        for y in states.iter().rev() {
            lam = self.substep_adjoint(y, &lam, &mut abar);
        }
        (lam, abar)
    }
}

/// A sequence of states `u[0..=N]`, an orbit or pseudo-orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<DVector<f64>>,
    /// Time index of `states[0]` on the global grid.
    pub offset: usize,
}

impl Trajectory {
    pub fn new(states: Vec<DVector<f64>>) -> Result<Self> {
        Self::with_offset(states, 0)
    }

    pub fn with_offset(states: Vec<DVector<f64>>, offset: usize) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a trajectory needs at least 2 states, got {}",
                states.len()
            )));
        }
        let d = states[0].len();
        for (n, s) in states.iter().enumerate() {
            if s.len() != d {
                return Err(Error::LengthMismatch { expected: d, found: s.len() });
            }
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { step: n });
            }
        }
        Ok(Self { states, offset })
    }

    /// Number of steps `N` (one less than the number of states).
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn into_states(self) -> Vec<DVector<f64>> {
        self.states
    }

    pub fn first(&self) -> &DVector<f64> {
        &self.states[0]
    }

    pub fn last(&self) -> &DVector<f64> {
        &self.states[self.states.len() - 1]
    }

    /// States `start..=end` as a new trajectory with the matching offset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if end >= self.states.len() || start >= end {
            return Err(Error::InvalidInput(format!(
                "slice {start}..={end} outside 0..={}",
                self.steps()
            )));
        }
        Self::with_offset(self.states[start..=end].to_vec(), self.offset + start)
    }

    /// Euclidean norm of the stacked state vector.
    pub fn norm(&self) -> f64 {
        self.states.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt()
    }
}

impl std::ops::Index<usize> for Trajectory {
    type Output = DVector<f64>;

    fn index(&self, n: usize) -> &DVector<f64> {
        &self.states[n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(d, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max() / b.abs().max().max(1e-300)
    }

    /// Central differences of the map, column by column.
    fn fd_tangent(m: &Model, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let d = m.dim();
        let mut j = DMatrix::zeros(d, d);
        for c in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let col = (m.step(&xp).unwrap() - m.step(&xm).unwrap()) / (2.0 * h);
            j.set_column(c, &col);
        }
        j
    }

    fn fd_params(m: &Model, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let (d, q) = (m.dim(), m.n_params());
        let mut j = DMatrix::zeros(d, q);
        for c in 0..q {
            let mut ap = m.params().to_vec();
            let mut am = m.params().to_vec();
            ap[c] += h;
            am[c] -= h;
            let fp = m.with_params(&ap).unwrap().step(x).unwrap();
            let fm = m.with_params(&am).unwrap().step(x).unwrap();
            j.set_column(c, &((fp - fm) / (2.0 * h)));
        }
        j
    }

    fn test_models() -> Vec<Model> {
        vec![
            Model::lorenz63(0.005, 1),
            Model::lorenz63(0.005, 7),
            Model::lorenz63(0.01, 3).with_scheme(Scheme::Rk4),
            Model::lorenz96(36, 8.0, 0.005, 10).unwrap(),
            Model::lorenz96(5, 8.0, 0.01, 3).unwrap().with_scheme(Scheme::Rk4),
        ]
    }

    #[test]
    fn l63_field_values() {
        let a = [10.0, 28.0, 8.0 / 3.0];
        let z = Field::Lorenz63.eval(&DVector::zeros(3), &a);
        assert_eq!(z, DVector::zeros(3));
        let v = Field::Lorenz63.eval(&DVector::from_element(3, 1.0), &a);
        assert_eq!(v.as_slice(), &[0.0, 26.0, 1.0 - 8.0 / 3.0]);
        let c = (a[2] * (a[1] - 1.0)).sqrt();
        let fp = DVector::from_vec(vec![c, c, a[1] - 1.0]);
        assert!(Field::Lorenz63.eval(&fp, &a).amax() < 1e-12);
    }

    #[test]
    fn l96_field_values() {
        let f = Field::Lorenz96 { dim: 4 };
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let v = f.eval(&x, &[0.0]);
        // -x[l-2] x[l-1] + x[l-1] x[l+1] - x[l] with cyclic indices.
        let expected = [
            -3.0 * 4.0 + 4.0 * 2.0 - 1.0,
            -4.0 * 1.0 + 1.0 * 3.0 - 2.0,
            -1.0 * 2.0 + 2.0 * 4.0 - 3.0,
            -2.0 * 3.0 + 3.0 * 1.0 - 4.0,
        ];
        assert_eq!(v.as_slice(), &expected);
        for d in [4, 5, 36, 40] {
            let f = Field::Lorenz96 { dim: d };
            assert_eq!(f.eval(&DVector::from_element(d, 8.0), &[8.0]).amax(), 0.0);
        }
    }

    #[test]
    fn l96_rejects_small_dimension() {
        assert!(matches!(Model::lorenz96(3, 8.0, 0.005, 1), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn euler_step_values() {
        let m = Model::lorenz63(0.005, 1);
        let y = m.step(&DVector::from_element(3, 1.0)).unwrap();
        let expected = DVector::from_vec(vec![1.0, 1.0 + 0.005 * 26.0, 1.0 + 0.005 * (1.0 - 8.0 / 3.0)]);
        assert!((y - expected).amax() < 1e-15);

        let zero = Model::new(Field::Linear { a: DMatrix::zeros(2, 2) }, vec![], 0.1, 4, Scheme::ForwardEuler).unwrap();
        let x = DVector::from_vec(vec![0.3, -2.0]);
        assert_eq!(zero.step(&x).unwrap(), x);
        assert_eq!(zero.tangent(&x), DMatrix::identity(2, 2));
    }

    #[test]
    fn divergence_is_reported() {
        let m = Model::lorenz63(10.0, 5);
        let err = m.step(&DVector::from_element(3, 1e100)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn composed_map_is_repeated_substep() {
        let m = Model::lorenz96(36, 8.0, 0.005, 10).unwrap();
        let single = m.single_substep();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_vec(&mut rng, 36, 5.0);
        let mut y = x.clone();
        let mut prod = DMatrix::identity(36, 36);
        for _ in 0..10 {
            prod = single.substep_jacobian(&y) * prod;
            y = single.step(&y).unwrap();
        }
        assert_eq!(m.step(&x).unwrap(), y);
        assert!((m.tangent(&x) - prod).abs().max() < 1e-12);
    }

    #[test]
    fn two_substep_ordering() {
        let m = Model::lorenz63(0.01, 2);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x1 = m.single_substep().step(&x).unwrap();
        let j = m.substep_jacobian(&x1) * m.substep_jacobian(&x);
        assert!((m.tangent(&x) - &j).abs().max() < 1e-14);
        assert!(rel_err(&fd_tangent(&m, &x, 1e-6), &j) < 1e-6);
    }

    #[test]
    fn tangent_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in test_models() {
            for _ in 0..20 {
                let x = random_vec(&mut rng, m.dim(), 10.0);
                let fd = fd_tangent(&m, &x, 1e-6);
                assert!(rel_err(&m.tangent(&x), &fd) < 1e-6, "{:?}", m.field());
            }
        }
    }

    #[test]
    fn param_tangent_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for m in test_models() {
            for _ in 0..20 {
                let x = random_vec(&mut rng, m.dim(), 10.0);
                let fd = fd_params(&m, &x, 1e-6);
                assert!(rel_err(&m.param_tangent(&x), &fd) < 1e-6, "{:?}", m.field());
            }
        }
    }

    #[test]
    fn param_tangent_closed_forms() {
        let m = Model::lorenz63(0.005, 1);
        let pt = m.param_tangent(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        assert!((pt.column(0) - DVector::from_vec(vec![0.005, 0.0, 0.0])).amax() < 1e-15);

        let l96 = Model::lorenz96(6, 8.0, 0.005, 1).unwrap();
        let pt = l96.param_tangent(&DVector::from_element(6, 2.5));
        assert!((pt.column(0) - DVector::from_element(6, 0.005)).amax() < 1e-15);

        let lin = Model::linear_map(DMatrix::identity(2, 2) * 2.0).unwrap();
        assert_eq!(lin.param_tangent(&DVector::zeros(2)).shape(), (2, 0));
    }

    #[test]
    fn adjoint_is_transpose_of_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for m in test_models() {
            for _ in 0..20 {
                let d = m.dim();
                let x = random_vec(&mut rng, d, 10.0);
                let v = random_vec(&mut rng, d, 1.0);
                let w = random_vec(&mut rng, d, 1.0);
                let jv = m.tangent_apply(&x, &DMatrix::from_column_slice(d, 1, v.as_slice()));
                let (jtw, abar) = m.adjoint(&x, &w);
                let lhs = jv.column(0).dot(&w);
                let rhs = v.dot(&jtw);
                assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));

                let pt = m.param_tangent(&x);
                let expected = pt.tr_mul(&w);
                assert!((abar - &expected).amax() <= 1e-12 * expected.amax().max(1.0));
            }
        }
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(vec![DVector::zeros(2)]).is_err());
        let bad = Trajectory::new(vec![DVector::zeros(2), DVector::from_vec(vec![f64::NAN, 0.0])]);
        assert!(matches!(bad, Err(Error::Divergence { step: 1 })));
        let t = Trajectory::new(vec![DVector::zeros(2); 5]).unwrap();
        let s = t.slice(2, 4).unwrap();
        assert_eq!((s.steps(), s.offset), (2, 2));
    }
}
