//! Running a configured experiment and writing its output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use shadow_da::assimilate::{
    drive_response, full_newton, window_driver, AssimilationReport, DriverSettings, NewtonSettings, SyncMode,
    WindowSchedule,
};
use shadow_da::fourdvar::{fourdvar_driver, fourdvar_param_driver, CgSettings};
use shadow_da::io::{fmt_f64, observations_csv, scores_csv, trajectory_csv, Provenance};
use shadow_da::metrics::ScoreSet;
use shadow_da::obs::{
    direct_insertion_complete, generate_truth_with_transient, observe, rng, standard_normal_vector, steps_for,
    ObservationSet,
};
use shadow_da::params::{newton_with_params, trivial_dynamics_estimate, ParamEstimate};
use shadow_da::tangent::{identity_seed, lyapunov_exponents, propagate_frames, spin_up_frame};
use shadow_da::{DMatrix, DynamicalMap, Error, Model, Trajectory};

use crate::config::{
    ConfigError, EstimatorName, ExperimentConfig, LoadedConfig, MethodKind, ProjectionName, SyncName,
};

/// Why a run did not succeed; maps onto the process exit code.
#[derive(Debug)]
pub enum RunError {
    /// Invalid configuration or input (exit code 1).
    Config(ConfigError),
    /// Files could not be read or written (exit code 1).
    Io(String),
    /// The numerics failed: an error was raised or windows did not converge
    /// (exit code 2). Output files are still written.
    Numerical(String),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Io(_) => 1,
            RunError::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "invalid config: {e}"),
            RunError::Io(e) => write!(f, "i/o error: {e}"),
            RunError::Numerical(e) => write!(f, "numerical failure: {e}"),
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

/// Errors raised by the library: invalid input counts as validation, all
/// others as numerical failures.
fn lib_err(e: Error) -> RunError {
    match e {
        Error::InvalidModel(_) | Error::InvalidInput(_) | Error::LengthMismatch { .. } => {
            RunError::Config(ConfigError::new("", e.to_string()))
        }
        other => RunError::Numerical(other.to_string()),
    }
}

/// Environment variable that overrides the output root directory.
pub const OUTPUT_ROOT_ENV: &str = "SHADOW_DA_OUTPUT_ROOT";

/// The output root: `$SHADOW_DA_OUTPUT_ROOT` or `./output`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("output"))
}

/// Scores of one labelled estimate (a method, or an initial guess in
/// parameter estimation) for one ensemble member.
#[derive(Debug, Clone)]
pub struct ScoredRow {
    pub label: String,
    pub scores: ScoreSet,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberRecord {
    pub index: usize,
    pub truth_seed: u64,
    pub obs_seed: u64,
    /// Fingerprint of the observation values and operator.
    pub obs_fingerprint: String,
    /// Non-converged windows and raised errors.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct MemberOutcome {
    pub record: MemberRecord,
    pub rows: Vec<ScoredRow>,
    /// A library error that aborted the member.
    pub error: Option<String>,
    /// Whether that error was a validation problem.
    pub error_is_validation: bool,
}

/// Everything `run` produced, for summaries and comparisons.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub name: String,
    pub method: MethodKind,
    pub hash: String,
    /// Ensemble-mean scores per label, in first-seen order.
    pub mean_rows: Vec<(String, ScoreSet)>,
}

#[derive(Serialize)]
struct Metadata<'a> {
    name: &'a str,
    method: String,
    config_hash: &'a str,
    version: &'a str,
    rng: &'a str,
    status: String,
    exit_code: u8,
    members: Vec<MemberRecord>,
    config: &'a toml::Table,
}

fn write(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn newton_settings(cfg: &ExperimentConfig, p: usize) -> NewtonSettings {
    let m = &cfg.method;
    NewtonSettings {
        tol: m.tol,
        floor_tol: m.floor_tol,
        max_iter: m.max_iter,
        p,
        sync_mode: match m.sync {
            SyncName::Interleaved => SyncMode::Interleaved,
            SyncName::AfterConvergence => SyncMode::AfterConvergence,
        },
        reorthogonalize: false,
    }
}

fn schedule(cfg: &ExperimentConfig) -> WindowSchedule {
    match &cfg.windows {
        Some(w) => WindowSchedule { init_len: w.init_len, window_len: w.window_len, horizon: cfg.truth.horizon },
        None => WindowSchedule::single(cfg.truth.horizon),
    }
}

fn cg_settings(cfg: &ExperimentConfig) -> CgSettings {
    CgSettings { grad_tol: cfg.method.grad_tol, max_iter: cfg.method.cg_max_iter, ..CgSettings::default() }
}

fn proxy_of(model: &Model, obs: &ObservationSet) -> shadow_da::Result<Trajectory> {
    if obs.is_full_state() {
        obs.as_trajectory()
    } else {
        direct_insertion_complete(model, obs, None)
    }
}

fn window_failures(tag: &str, report: &AssimilationReport) -> Vec<String> {
    report
        .windows
        .iter()
        .filter(|w| !w.converged())
        .map(|w| format!("{tag}window {} (steps {}..={}): {}", w.index, w.start, w.end, w.termination))
        .collect()
}

struct Member<'a> {
    cfg: &'a ExperimentConfig,
    hash: &'a str,
    index: usize,
    dir: PathBuf,
    model: Model,
}

impl Member<'_> {
    fn truth_seed(&self) -> u64 {
        self.cfg.truth.seed + self.index as u64
    }

    fn obs_seed(&self) -> u64 {
        self.cfg.observations.seed + self.index as u64
    }

    fn prov(&self) -> Provenance {
        Provenance::new(self.hash, self.truth_seed()).with("obs_seed", self.obs_seed()).with("member", self.index)
    }

    fn observed(&self) -> Option<Vec<usize>> {
        let c = self.cfg.observed_coords();
        (c.len() != self.cfg.dim()).then_some(c)
    }

    fn run(&self) -> MemberOutcome {
        let mut record = MemberRecord {
            index: self.index,
            truth_seed: self.truth_seed(),
            obs_seed: self.obs_seed(),
            obs_fingerprint: String::new(),
            failures: Vec::new(),
        };
        let mut rows = Vec::new();
        let result = self.run_inner(&mut record, &mut rows);
        let (error, error_is_validation) = match result {
            Ok(()) => (None, false),
            Err(e) => {
                record.failures.push(e.to_string());
                (Some(e.to_string()), e.exit_code() == 1)
            }
        };
        MemberOutcome { record, rows, error, error_is_validation }
    }

    fn run_inner(&self, record: &mut MemberRecord, rows: &mut Vec<ScoredRow>) -> Result<(), RunError> {
        let cfg = self.cfg;
        if cfg.method.kind == MethodKind::SyncDemo {
            record.obs_fingerprint = "none".into();
            return self.sync_demo(record);
        }
        let truth =
            generate_truth_with_transient(&self.model, cfg.truth.horizon, self.truth_seed(), cfg.truth.transient)
                .map_err(lib_err)?;
        let prov = self.prov();
        write(&self.dir.join("truth.csv"), &trajectory_csv(&truth, &prov))?;
        if cfg.method.kind == MethodKind::Lyapunov {
            record.obs_fingerprint = "none".into();
            return self.lyapunov(&truth);
        }
        let h = cfg.obs_operator()?;
        let obs =
            observe(&truth, &h, cfg.noise()?, cfg.observations.every_k, self.obs_seed()).map_err(lib_err)?;
        record.obs_fingerprint = format!("{:016x}", obs.fingerprint());
        write(&self.dir.join("observations.csv"), &observations_csv(&obs, &prov))?;
        let observed = self.observed();
        let coords = observed.as_deref();
        let label = cfg.method.kind.to_string();
        match cfg.method.kind {
            MethodKind::FullNewton | MethodKind::Projected | MethodKind::Fourdvar => {
                let mut report = match cfg.method.kind {
                    MethodKind::FullNewton => {
                        let proxy = proxy_of(&self.model, &obs).map_err(lib_err)?;
                        full_newton(&self.model, &proxy, &newton_settings(cfg, cfg.dim()))
                    }
                    MethodKind::Projected => {
                        let proxy = proxy_of(&self.model, &obs).map_err(lib_err)?;
                        window_driver(&self.model, &proxy, &schedule(cfg), &self.driver_settings())
                            .map_err(lib_err)?
                    }
                    _ => fourdvar_driver(&self.model, &obs, &schedule(cfg), &cg_settings(cfg)).map_err(lib_err)?,
                };
                let scores = report.score(&self.model, &truth, &obs, coords).map_err(lib_err)?.clone();
                write(&self.dir.join("estimate.csv"), &trajectory_csv(&report.estimate, &prov))?;
                write(&self.dir.join("windows.csv"), &prov.wrap(&report.windows_csv(&label)))?;
                record.failures.extend(window_failures("", &report));
                rows.push(ScoredRow { label, scores });
            }
            MethodKind::ParamEst => self.param_est(&truth, &obs, record, rows)?,
            MethodKind::SyncDemo | MethodKind::Lyapunov => unreachable!(),
        }
        Ok(())
    }

    fn driver_settings(&self) -> DriverSettings {
        let m = &self.cfg.method;
        let d = self.cfg.dim();
        let (p, fixed_basis) = match m.projection {
            ProjectionName::Lyapunov => (m.p.unwrap_or(d), None),
            ProjectionName::Fixed => {
                let coords = m.fixed_coords.clone().unwrap_or_default();
                let mut q = DMatrix::zeros(d, coords.len());
                for (j, &c) in coords.iter().enumerate() {
                    q[(c, j)] = 1.0;
                }
                (coords.len(), Some(q))
            }
        };
        DriverSettings {
            newton: newton_settings(self.cfg, p),
            fixed_basis,
            spin_up_steps: m.spin_up_steps,
            init_full_newton: m.init_full_newton,
            auto_restart: m.auto_restart,
        }
    }

    fn param_est(
        &self,
        truth: &Trajectory,
        obs: &ObservationSet,
        record: &mut MemberRecord,
        rows: &mut Vec<ScoredRow>,
    ) -> Result<(), RunError> {
        let cfg = self.cfg;
        let which = cfg.estimated_indices()?;
        let names = cfg.method.estimate.clone().unwrap_or_default();
        let observed = self.observed();
        let prov = self.prov();
        let mut table = String::from("guess");
        for n in &names {
            let _ = write!(table, ",initial_{n}");
        }
        for n in &names {
            let _ = write!(table, ",estimated_{n}");
        }
        table.push_str(",mse,c,c_truth,iterations,converged,termination\n");
        let mut windows_csv = String::new();
        for (g, guess) in cfg.method.initial_guesses.clone().unwrap_or_default().iter().enumerate() {
            let label = format!(
                "guess_{}",
                guess.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("_")
            );
            let est: ParamEstimate = match cfg.method.estimator {
                EstimatorName::Augmented => {
                    let proxy = proxy_of(&self.model, obs).map_err(lib_err)?;
                    newton_with_params(&self.model, &proxy, &which, guess, &newton_settings(cfg, cfg.dim()))
                        .map_err(lib_err)?
                }
                EstimatorName::Trivial => {
                    let proxy = proxy_of(&self.model, obs).map_err(lib_err)?;
                    trivial_dynamics_estimate(&self.model, &proxy, &which, guess, &newton_settings(cfg, cfg.dim()))
                        .map_err(lib_err)?
                }
                EstimatorName::Fourdvar => {
                    let base = self.model.with_params(&{
                        let mut p = self.model.params().to_vec();
                        for (&i, &a) in which.iter().zip(guess) {
                            p[i] = a;
                        }
                        p
                    });
                    let base = base.map_err(lib_err)?;
                    let (report, params) =
                        fourdvar_param_driver(&base, obs, &schedule(cfg), &which, &cg_settings(cfg)).map_err(lib_err)?;
                    ParamEstimate { report, params, history: Vec::new() }
                }
            };
            let mut report = est.report.clone();
            // A diverged estimate may carry non-finite parameters; score it
            // under the true model so the row is still reported.
            let score_model = est.model(&self.model).unwrap_or_else(|_| self.model.clone());
            let scores = match report.score(&score_model, truth, obs, observed.as_deref()) {
                Ok(s) => s.clone(),
                Err(_) => report.score(&self.model, truth, obs, observed.as_deref()).map_err(lib_err)?.clone(),
            };
            let estimated: Vec<f64> = which.iter().map(|&i| est.params[i]).collect();
            let termination = report.windows.iter().find(|w| !w.converged()).map_or_else(
                || report.windows.last().map(|w| w.termination.to_string()).unwrap_or_default(),
                |w| w.termination.to_string(),
            );
            let _ = write!(table, "{g}");
            for x in guess.iter().chain(&estimated) {
                let _ = write!(table, ",{}", fmt_f64(*x));
            }
            let _ = writeln!(
                table,
                ",{},{},{},{},{},{}",
                fmt_f64(scores.mse),
                fmt_f64(scores.c),
                fmt_f64(scores.c_truth),
                report.total_iterations(),
                report.converged(),
                termination.replace(',', ";")
            );
            let tag = format!("{label}/");
            let mut body = report.windows_csv(&label);
            if !windows_csv.is_empty() {
                body = body.lines().skip(1).map(|l| format!("{l}\n")).collect();
            }
            windows_csv.push_str(&body);
            write(&self.dir.join(format!("estimate_{label}.csv")), &trajectory_csv(&report.estimate, &prov))?;
            record.failures.extend(window_failures(&tag, &report));
            rows.push(ScoredRow { label, scores });
        }
        write(&self.dir.join("params.csv"), &prov.wrap(&table))?;
        write(&self.dir.join("windows.csv"), &prov.wrap(&windows_csv))?;
        Ok(())
    }

    /// Drives a perturbed response with the truth projected onto frames of
    /// each width and records the sup-norm error over time.
    fn sync_demo(&self, record: &mut MemberRecord) -> Result<(), RunError> {
        let cfg = self.cfg;
        let d = cfg.dim();
        let map_dt = self.model.map_dt();
        // A pre-history before the driver segment spins up the frames.
        let spin = steps_for(cfg.method.spin_up_time, map_dt).map_err(lib_err)?;
        let total = cfg.truth.horizon + cfg.method.spin_up_time;
        let full = generate_truth_with_transient(&self.model, total, self.truth_seed(), cfg.truth.transient)
            .map_err(lib_err)?;
        let pre = full.slice(0, spin).map_err(lib_err)?;
        let driver = full.slice(spin, full.steps()).map_err(lib_err)?;
        let driver = Trajectory::with_offset(driver.into_states(), 0).map_err(lib_err)?;
        let prov = self.prov();
        write(&self.dir.join("truth.csv"), &trajectory_csv(&driver, &prov))?;
        let z0 = &driver[0] + standard_normal_vector(&mut rng(self.obs_seed()), d);
        let ps = cfg.method.p_values.clone().unwrap_or_default();
        let curves: Vec<(usize, Result<Vec<f64>, String>)> = ps
            .par_iter()
            .map(|&p| {
                let run = || -> shadow_da::Result<Vec<f64>> {
                    let q0 = spin_up_frame(&self.model, &pre, p, spin)?;
                    let frame = propagate_frames(&self.model, &driver, &q0)?;
                    let z = drive_response(&self.model, &driver, &frame, &z0)?;
                    Ok((0..driver.len()).map(|n| (&z[n] - &driver[n]).amax()).collect())
                };
                (p, run().map_err(|e| e.to_string()))
            })
            .collect();
        let mut table = String::from("time_index,time");
        for p in &ps {
            let _ = write!(table, ",p{p}");
        }
        table.push('\n');
        for n in 0..driver.len() {
            let _ = write!(table, "{n},{}", fmt_f64(n as f64 * map_dt));
            for (_, c) in &curves {
                match c {
                    Ok(errs) => {
                        let _ = write!(table, ",{}", fmt_f64(errs[n]));
                    }
                    Err(_) => table.push(','),
                }
            }
            table.push('\n');
        }
        write(&self.dir.join("sync_error.csv"), &prov.wrap(&table))?;
        let mut summary = String::from("p,final_error,time_below_1e-8,status\n");
        for (p, c) in &curves {
            match c {
                Ok(errs) => {
                    let first = errs.iter().position(|e| *e < 1e-8).map(|n| fmt_f64(n as f64 * map_dt));
                    let _ = writeln!(
                        summary,
                        "{p},{},{},{}",
                        fmt_f64(*errs.last().unwrap_or(&f64::NAN)),
                        first.unwrap_or_default(),
                        if errs.last().is_some_and(|e| *e < 1e-8) { "synchronized" } else { "not synchronized" }
                    );
                }
                Err(e) => {
                    let _ = writeln!(summary, "{p},,,{}", e.replace(',', ";"));
                    record.failures.push(format!("p={p}: {e}"));
                }
            }
        }
        write(&self.dir.join("sync_summary.csv"), &prov.wrap(&summary))?;
        Ok(())
    }

    fn lyapunov(&self, truth: &Trajectory) -> Result<(), RunError> {
        let d = self.cfg.dim();
        let p = self.cfg.method.p.unwrap_or(d);
        let frame = propagate_frames(&self.model, truth, &identity_seed(d, p)).map_err(lib_err)?;
        let lambda = lyapunov_exponents(&frame, self.model.map_dt());
        let mut table = String::from("index,exponent\n");
        for (i, l) in lambda.iter().enumerate() {
            let _ = writeln!(table, "{},{}", i + 1, fmt_f64(*l));
        }
        let prov = self.prov();
        write(&self.dir.join("exponents.csv"), &prov.wrap(&table))?;
        if self.cfg.method.dump_diagnostics {
            write(&self.dir.join("frame_diagnostics.csv"), &prov.wrap(&frame.diagnostics_csv(self.model.map_dt())))?;
        }
        Ok(())
    }
}

fn mean_scores(rows: &[&ScoreSet]) -> ScoreSet {
    let n = rows.len().max(1) as f64;
    let avg = |f: &dyn Fn(&ScoreSet) -> f64| rows.iter().map(|s| f(s)).sum::<f64>() / n;
    let observed: Option<Vec<f64>> = rows.iter().map(|s| s.mse_observed).collect();
    ScoreSet {
        c_truth: avg(&|s| s.c_truth),
        c: avg(&|s| s.c),
        mse: avg(&|s| s.mse),
        mse_observed: observed.map(|v| v.iter().sum::<f64>() / n),
        d: avg(&|s| s.d),
        mean_iterations: avg(&|s| s.mean_iterations),
        windows: rows.iter().map(|s| s.windows).sum(),
        converged_windows: rows.iter().map(|s| s.converged_windows).sum(),
    }
}

/// Runs every ensemble member of `loaded` into `dir` and writes the scores
/// table and the metadata sidecar. The outer error means nothing useful was
/// produced; the second element is the run's own failure, if any, with all
/// output files written.
pub fn run_into(loaded: &LoadedConfig, dir: &Path) -> Result<(RunSummary, Option<RunError>), RunError> {
    let cfg = &loaded.config;
    let model = cfg.build_model()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let members: Vec<MemberOutcome> = (0..cfg.run.ensemble)
        .into_par_iter()
        .map(|index| {
            let member_dir =
                if cfg.run.ensemble == 1 { dir.to_path_buf() } else { dir.join(format!("member_{index:03}")) };
            Member { cfg, hash: &loaded.hash, index, dir: member_dir, model: model.clone() }.run()
        })
        .collect();

    let mut labels: Vec<String> = Vec::new();
    for m in &members {
        for r in &m.rows {
            if !labels.contains(&r.label) {
                labels.push(r.label.clone());
            }
        }
    }
    let mean_rows: Vec<(String, ScoreSet)> = labels
        .iter()
        .map(|l| {
            let rows: Vec<&ScoreSet> =
                members.iter().flat_map(|m| m.rows.iter().filter(|r| &r.label == l).map(|r| &r.scores)).collect();
            (l.clone(), mean_scores(&rows))
        })
        .collect();

    let prov = Provenance::new(&loaded.hash, cfg.truth.seed).with("obs_seed", cfg.observations.seed);
    if !labels.is_empty() {
        let mut rows: Vec<(String, &ScoreSet)> = Vec::new();
        for m in &members {
            for r in &m.rows {
                let label =
                    if cfg.run.ensemble == 1 { r.label.clone() } else { format!("{}/member_{:03}", r.label, m.record.index) };
                rows.push((label, &r.scores));
            }
        }
        if cfg.run.ensemble > 1 {
            for (l, s) in &mean_rows {
                rows.push((format!("{l}/mean"), s));
            }
        }
        let text = scores_csv(rows.iter().map(|(l, s)| (l.as_str(), *s)), &prov);
        write(&dir.join("scores.csv"), &text)?;
    }

    let validation = members.iter().find(|m| m.error_is_validation).and_then(|m| m.error.clone());
    let failures: Vec<String> = members
        .iter()
        .flat_map(|m| m.record.failures.iter().map(move |f| format!("member {}: {f}", m.record.index)))
        .collect();
    let hard_error = members.iter().find_map(|m| m.error.clone());
    let status: Result<(), RunError> = if let Some(e) = validation {
        Err(RunError::Config(ConfigError::new("", e)))
    } else if let Some(e) = hard_error {
        Err(RunError::Numerical(e))
    } else if !failures.is_empty() && !cfg.run.allow_nonconvergence {
        Err(RunError::Numerical(format!("{} failure(s); first: {}", failures.len(), failures[0])))
    } else {
        Ok(())
    };
    let meta = Metadata {
        name: &cfg.name,
        method: cfg.method.kind.to_string(),
        config_hash: &loaded.hash,
        version: env!("CARGO_PKG_VERSION"),
        rng: "ChaCha20 (rand_chacha), member k uses seed + k",
        status: match &status {
            Ok(()) if failures.is_empty() => "ok".into(),
            Ok(()) => format!("ok ({} expected non-convergence record(s))", failures.len()),
            Err(e) => e.to_string(),
        },
        exit_code: status.as_ref().map_or_else(RunError::exit_code, |_| 0),
        members: members.iter().map(|m| m.record.clone()).collect(),
        config: &loaded.value,
    };
    let meta_text = toml::to_string(&meta).map_err(|e| RunError::Io(e.to_string()))?;
    write(&dir.join("metadata.toml"), &meta_text)?;
    let summary = RunSummary {
        name: cfg.name.clone(),
        method: cfg.method.kind,
        hash: loaded.hash.clone(),
        mean_rows,
    };
    Ok((summary, status.err()))
}

/// A plain-text table with one column per label.
pub fn format_table(rows: &[(String, ScoreSet)]) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(12);
    let _ = write!(out, "{:<38}", "Property");
    for (l, _) in rows {
        let _ = write!(out, " | {l:>width$}");
    }
    out.push('\n');
    let line = |out: &mut String, name: &str, f: &dyn Fn(&ScoreSet) -> String| {
        let _ = write!(out, "{name:<38}");
        for (_, s) in rows {
            let _ = write!(out, " | {:>width$}", f(s));
        }
        out.push('\n');
    };
    line(&mut out, "Observation error C(truth)", &|s| format!("{:.4}", s.c_truth));
    line(&mut out, "Estimate vs observations C(u)", &|s| format!("{:.4}", s.c));
    line(&mut out, "Estimate vs truth MSE", &|s| format!("{:.4e}", s.mse));
    if rows.iter().any(|(_, s)| s.mse_observed.is_some()) {
        line(&mut out, "MSE, observed coordinates", &|s| s.mse_observed.map_or("-".into(), |m| format!("{m:.4e}")));
    }
    line(&mut out, "Discontinuity D", &|s| format!("{:.4}", s.d));
    line(&mut out, "Mean iterations", &|s| format!("{:.2}", s.mean_iterations));
    line(&mut out, "Converged windows", &|s| format!("{}/{}", s.converged_windows, s.windows));
    out
}

/// Observation fingerprints of every member, computed without running the
/// assimilation.
pub fn observation_fingerprints(loaded: &LoadedConfig) -> Result<Vec<String>, RunError> {
    let cfg = &loaded.config;
    if matches!(cfg.method.kind, MethodKind::SyncDemo | MethodKind::Lyapunov) {
        return Err(RunError::Config(ConfigError::new("method.kind", "this method uses no observations")));
    }
    let model = cfg.build_model()?;
    let h = cfg.obs_operator()?;
    let noise = cfg.noise()?;
    (0..cfg.run.ensemble)
        .map(|k| {
            let truth = generate_truth_with_transient(
                &model,
                cfg.truth.horizon,
                cfg.truth.seed + k as u64,
                cfg.truth.transient,
            )
            .map_err(lib_err)?;
            let obs = observe(&truth, &h, noise, cfg.observations.every_k, cfg.observations.seed + k as u64)
                .map_err(lib_err)?;
            Ok(format!("{:016x}", obs.fingerprint()))
        })
        .collect()
}
