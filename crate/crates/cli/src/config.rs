//! Experiment configuration: a TOML file with `[model]`, `[truth]`,
//! `[observations]`, `[method]`, optional `[windows]`, `[run]` and `[sweep]`
//! sections. Unknown keys are rejected. See `configs/README.md` for the schema.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shadow_da::models::{Field, Scheme};
use shadow_da::obs::{coordinate_selector, Noise};
use shadow_da::{DMatrix, Model};

/// A configuration problem, located by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

type Checked<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    Lorenz63,
    Lorenz96,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    #[default]
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: ModelName,
    /// State dimension; fixed at 3 for Lorenz 63.
    pub dim: Option<usize>,
    /// True parameter values (defaults: sigma, rho, beta = 10, 28, 8/3;
    /// forcing = 8).
    pub params: Option<Vec<f64>>,
    pub dt: f64,
    /// Integrator steps per map application, i.e. per observation.
    #[serde(default = "one")]
    pub substeps: usize,
    #[serde(default)]
    pub scheme: SchemeName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub seed: u64,
    /// Length of the assimilation period in model time.
    pub horizon: f64,
    /// Model time discarded before the truth starts.
    #[serde(default = "default_transient")]
    pub transient: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseName {
    #[default]
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsSpec {
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseName,
    /// Gaussian noise variance.
    pub variance: Option<f64>,
    /// Uniform noise half width.
    pub half_width: Option<f64>,
    /// Observe every k-th map step.
    #[serde(default = "one")]
    pub every_k: usize,
    /// Observed coordinates (0-based); all when absent.
    pub observe: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    FullNewton,
    Projected,
    Fourdvar,
    ParamEst,
    SyncDemo,
    Lyapunov,
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MethodKind::FullNewton => "full_newton",
            MethodKind::Projected => "projected",
            MethodKind::Fourdvar => "fourdvar",
            MethodKind::ParamEst => "param_est",
            MethodKind::SyncDemo => "sync_demo",
            MethodKind::Lyapunov => "lyapunov",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncName {
    #[default]
    Interleaved,
    AfterConvergence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionName {
    #[default]
    Lyapunov,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorName {
    #[default]
    Augmented,
    Trivial,
    Fourdvar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Frame width for the projected method and the Lyapunov demo.
    pub p: Option<usize>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_floor_tol")]
    pub floor_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub sync: SyncName,
    #[serde(default)]
    pub projection: ProjectionName,
    /// Coordinates spanning the fixed projection basis.
    pub fixed_coords: Option<Vec<usize>>,
    #[serde(default = "default_spin_up")]
    pub spin_up_steps: usize,
    #[serde(default = "yes")]
    pub init_full_newton: bool,
    #[serde(default)]
    pub auto_restart: bool,
    /// 4DVar relative gradient tolerance.
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_cg_max_iter")]
    pub cg_max_iter: usize,
    #[serde(default)]
    pub estimator: EstimatorName,
    /// Names of the estimated parameters.
    pub estimate: Option<Vec<String>>,
    /// One row of initial parameter values per estimation run.
    pub initial_guesses: Option<Vec<Vec<f64>>>,
    /// Frame widths compared by the synchronization demo.
    pub p_values: Option<Vec<usize>>,
    /// Model time used to spin up the frames before the demo starts.
    #[serde(default = "default_sync_spin_up")]
    pub spin_up_time: f64,
    /// Write per-step frame diagnostics (Lyapunov demo).
    #[serde(default)]
    pub dump_diagnostics: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub init_len: f64,
    pub window_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Number of independent noise realizations; member k uses seeds
    /// `truth.seed + k` and `observations.seed + k`.
    #[serde(default = "one")]
    pub ensemble: usize,
    /// Output directory, relative to the output root.
    pub output: Option<String>,
    /// Non-converged windows are expected (failure demonstrations) and do
    /// not make the run fail.
    #[serde(default)]
    pub allow_nonconvergence: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self { ensemble: 1, output: None, allow_nonconvergence: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Dotted path of the swept field, e.g. `method.p`.
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub truth: TruthSpec,
    pub observations: ObsSpec,
    pub method: MethodSpec,
    pub windows: Option<WindowSpec>,
    #[serde(default)]
    pub run: RunSpec,
    pub sweep: Option<SweepSpec>,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_transient() -> f64 {
    shadow_da::obs::TRANSIENT_TIME
}
fn default_tol() -> f64 {
    1e-15
}
fn default_floor_tol() -> f64 {
    1e-12
}
fn default_max_iter() -> usize {
    50
}
fn default_spin_up() -> usize {
    200
}
fn default_grad_tol() -> f64 {
    1e-8
}
fn default_cg_max_iter() -> usize {
    2000
}
fn default_sync_spin_up() -> f64 {
    20.0
}

/// A parsed config together with its canonical text and hash.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub value: toml::Table,
    pub hash: String,
}

impl LoadedConfig {
    pub fn from_str(text: &str) -> Checked<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::new("", e.to_string()))?;
        Self::from_table(value)
    }

    pub fn from_path(path: &Path) -> Checked<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn from_table(value: toml::Table) -> Checked<Self> {
        let config: ExperimentConfig = value
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::new("", e.message().to_string()))?;
        config.validate()?;
        let hash = hash_table(&value);
        Ok(Self { config, value, hash })
    }

    /// The config with `key` replaced by `v`, without the sweep section.
    pub fn with_override(&self, key: &str, v: &toml::Value) -> Checked<Self> {
        let mut table = self.value.clone();
        table.remove("sweep");
        set_path(&mut table, key, v.clone())?;
        Self::from_table(table)
    }
}

/// SHA-256 of the canonical serialization (key order and formatting do not
/// affect the hash).
pub fn hash_table(table: &toml::Table) -> String {
    let canonical = toml::to_string(table).unwrap_or_default();
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn set_path(table: &mut toml::Table, key: &str, v: toml::Value) -> Checked<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, prefix) = parts.split_last().ok_or_else(|| ConfigError::new("sweep.key", "empty key"))?;
    let mut cur = table;
    for p in prefix {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::new("sweep.key", format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), v);
    Ok(())
}

/// A short label for a swept value.
pub fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Table(t) => t.iter().map(|(k, v)| format!("{k}={}", value_label(v))).collect::<Vec<_>>().join(";"),
        toml::Value::Array(a) => a.iter().map(value_label).collect::<Vec<_>>().join(";"),
        other => other.to_string(),
    }
}

fn positive(path: &str, x: f64) -> Checked<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("must be positive, got {x}")))
    }
}

fn coords_in_range(path: &str, coords: &[usize], d: usize) -> Checked<()> {
    if coords.is_empty() {
        return Err(ConfigError::new(path, "must not be empty"));
    }
    if let Some(c) = coords.iter().find(|&&c| c >= d) {
        return Err(ConfigError::new(path, format!("coordinate {c} out of range for dimension {d}")));
    }
    let mut sorted = coords.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != coords.len() {
        return Err(ConfigError::new(path, "coordinates must be distinct"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn dim(&self) -> usize {
        match self.model.name {
            ModelName::Lorenz63 => 3,
            ModelName::Lorenz96 => self.model.dim.unwrap_or(40),
        }
    }

    pub fn output_dir(&self) -> String {
        self.run.output.clone().unwrap_or_else(|| self.name.clone())
    }

    pub fn build_model(&self) -> Checked<Model> {
        let (field, defaults) = match self.model.name {
            ModelName::Lorenz63 => {
                if let Some(d) = self.model.dim {
                    if d != 3 {
                        return Err(ConfigError::new("model.dim", "Lorenz 63 has dimension 3"));
                    }
                }
                (Field::Lorenz63, vec![10.0, 28.0, 8.0 / 3.0])
            }
            ModelName::Lorenz96 => (Field::Lorenz96 { dim: self.dim() }, vec![8.0]),
        };
        let params = self.model.params.clone().unwrap_or(defaults);
        let scheme = match self.model.scheme {
            SchemeName::Euler => Scheme::ForwardEuler,
            SchemeName::Rk4 => Scheme::Rk4,
        };
        Model::new(field, params, self.model.dt, self.model.substeps, scheme)
            .map_err(|e| ConfigError::new("model", e.to_string()))
    }

    pub fn noise(&self) -> Checked<Noise> {
        match self.observations.noise {
            NoiseName::Gaussian => {
                let v = self
                    .observations
                    .variance
                    .ok_or_else(|| ConfigError::new("observations.variance", "required for gaussian noise"))?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err(ConfigError::new("observations.variance", "must be non-negative"));
                }
                Ok(Noise::gaussian_variance(v))
            }
            NoiseName::Uniform => {
                let w = self
                    .observations
                    .half_width
                    .ok_or_else(|| ConfigError::new("observations.half_width", "required for uniform noise"))?;
                if !(w.is_finite() && w >= 0.0) {
                    return Err(ConfigError::new("observations.half_width", "must be non-negative"));
                }
                Ok(Noise::Uniform { half_width: w })
            }
        }
    }

    pub fn observed_coords(&self) -> Vec<usize> {
        self.observations.observe.clone().unwrap_or_else(|| (0..self.dim()).collect())
    }

    pub fn obs_operator(&self) -> Checked<DMatrix<f64>> {
        coordinate_selector(self.dim(), &self.observed_coords())
            .map_err(|e| ConfigError::new("observations.observe", e.to_string()))
    }

    /// Indices of the estimated parameters in the model's parameter vector.
    pub fn estimated_indices(&self) -> Checked<Vec<usize>> {
        let model = self.build_model()?;
        let names = model.field().param_names();
        let wanted = self
            .method
            .estimate
            .as_ref()
            .ok_or_else(|| ConfigError::new("method.estimate", "required for param_est"))?;
        if wanted.is_empty() {
            return Err(ConfigError::new("method.estimate", "must name at least one parameter"));
        }
        wanted
            .iter()
            .map(|w| {
                names.iter().position(|n| n == w).ok_or_else(|| {
                    ConfigError::new("method.estimate", format!("unknown parameter `{w}`; expected one of {names:?}"))
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Checked<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(ConfigError::new("name", "must be a non-empty name without path separators"));
        }
        let d = self.dim();
        positive("model.dt", self.model.dt)?;
        if self.model.substeps == 0 {
            return Err(ConfigError::new("model.substeps", "must be at least 1"));
        }
        if let Some(p) = &self.model.params {
            if p.iter().any(|x| !x.is_finite()) {
                return Err(ConfigError::new("model.params", "must be finite"));
            }
        }
        self.build_model()?;
        positive("truth.horizon", self.truth.horizon)?;
        if !(self.truth.transient.is_finite() && self.truth.transient >= 0.0) {
            return Err(ConfigError::new("truth.transient", "must be non-negative"));
        }
        self.noise()?;
        if self.observations.every_k == 0 {
            return Err(ConfigError::new("observations.every_k", "must be at least 1"));
        }
        if let Some(c) = &self.observations.observe {
            coords_in_range("observations.observe", c, d)?;
        }
        if self.run.ensemble == 0 {
            return Err(ConfigError::new("run.ensemble", "must be at least 1"));
        }
        if let Some(out) = &self.run.output {
            if out.is_empty() || Path::new(out).is_absolute() || out.split(['/', '\\']).any(|c| c == "..") {
                return Err(ConfigError::new("run.output", "must be a relative path inside the output root"));
            }
        }
        if let Some(w) = &self.windows {
            positive("windows.init_len", w.init_len)?;
            positive("windows.window_len", w.window_len)?;
        }
        let m = &self.method;
        positive("method.tol", m.tol)?;
        positive("method.floor_tol", m.floor_tol)?;
        positive("method.grad_tol", m.grad_tol)?;
        if m.max_iter == 0 {
            return Err(ConfigError::new("method.max_iter", "must be at least 1"));
        }
        let check_p = |p: usize, path: &str| {
            if p == 0 || p > d {
                Err(ConfigError::new(path, format!("must be in 1..={d}, got {p}")))
            } else {
                Ok(())
            }
        };
        let shadowing = matches!(m.kind, MethodKind::FullNewton | MethodKind::Projected | MethodKind::ParamEst);
        if shadowing && self.observations.every_k != 1 {
            return Err(ConfigError::new(
                "observations.every_k",
                "shadowing methods need observations at every map step; use model.substeps for the interval",
            ));
        }
        if matches!(m.kind, MethodKind::Fourdvar) || matches!((m.kind, m.estimator), (MethodKind::ParamEst, EstimatorName::Fourdvar)) {
            if self.observations.observe.as_ref().is_some_and(|c| c.len() != d) {
                return Err(ConfigError::new("observations.observe", "4DVar initialization needs full-state observations"));
            }
            if self.observations.every_k != 1 {
                return Err(ConfigError::new("observations.every_k", "4DVar windows use observations at every map step"));
            }
        }
        if m.kind == MethodKind::FullNewton && self.windows.is_some() {
            return Err(ConfigError::new("windows", "full_newton treats the horizon as a single window"));
        }
        match m.kind {
            MethodKind::Projected => match m.projection {
                ProjectionName::Lyapunov => {
                    check_p(m.p.ok_or_else(|| ConfigError::new("method.p", "required for the projected method"))?, "method.p")?;
                }
                ProjectionName::Fixed => {
                    let c = m
                        .fixed_coords
                        .as_ref()
                        .ok_or_else(|| ConfigError::new("method.fixed_coords", "required for a fixed projection"))?;
                    coords_in_range("method.fixed_coords", c, d)?;
                }
            },
            MethodKind::ParamEst => {
                let which = self.estimated_indices()?;
                let guesses = m
                    .initial_guesses
                    .as_ref()
                    .ok_or_else(|| ConfigError::new("method.initial_guesses", "required for param_est"))?;
                if guesses.is_empty() {
                    return Err(ConfigError::new("method.initial_guesses", "must not be empty"));
                }
                for (i, g) in guesses.iter().enumerate() {
                    if g.len() != which.len() || g.iter().any(|x| !x.is_finite()) {
                        return Err(ConfigError::new(
                            format!("method.initial_guesses[{i}]"),
                            format!("needs {} finite values", which.len()),
                        ));
                    }
                }
            }
            MethodKind::SyncDemo => {
                let ps = m.p_values.as_ref().ok_or_else(|| ConfigError::new("method.p_values", "required for sync_demo"))?;
                if ps.is_empty() {
                    return Err(ConfigError::new("method.p_values", "must not be empty"));
                }
                for (i, &p) in ps.iter().enumerate() {
                    check_p(p, &format!("method.p_values[{i}]"))?;
                }
                positive("method.spin_up_time", m.spin_up_time)?;
            }
            MethodKind::Lyapunov => {
                if let Some(p) = m.p {
                    check_p(p, "method.p")?;
                }
            }
            MethodKind::FullNewton | MethodKind::Fourdvar => {}
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(ConfigError::new("sweep.values", "must not be empty"));
            }
            if s.key.is_empty() || s.key.starts_with("sweep") {
                return Err(ConfigError::new("sweep.key", "must name a field outside the sweep section"));
            }
        }
        Ok(())
    }
}
