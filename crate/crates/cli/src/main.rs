//! `shadow-da`: config-driven experiments for shadowing-based data
//! assimilation.
//!
//! Exit codes: 0 success, 1 invalid config or input, 2 numerical failure.
//! Outputs go to `$SHADOW_DA_OUTPUT_ROOT/<run.output>` (default root
//! `./output`).

mod config;
mod run;
mod selftest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shadow_da::io::{scores_csv, Provenance};
use shadow_da::metrics::ScoreSet;

use config::{value_label, ConfigError, LoadedConfig};
use run::{format_table, observation_fingerprints, output_root, run_into, RunError};

#[derive(Parser)]
#[command(name = "shadow-da", version, about = "Shadowing-based data assimilation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or its sweep, if the config has a [sweep] section).
    Run { config: PathBuf },
    /// Run two experiments on identical observations and tabulate them side by side.
    Compare { config_a: PathBuf, config_b: PathBuf },
    /// Run the grid described by the config's [sweep] section.
    Sweep { config: PathBuf },
    /// Check library invariants against independent oracles.
    Selftest,
}

fn load(path: &Path) -> Result<LoadedConfig, RunError> {
    LoadedConfig::from_path(path).map_err(|e| {
        RunError::Config(ConfigError::new(e.path.clone(), format!("{} ({})", e.message, path.display())))
    })
}

fn cmd_run(path: &Path) -> Result<(), RunError> {
    let loaded = load(path)?;
    if loaded.config.sweep.is_some() {
        return cmd_sweep_loaded(&loaded);
    }
    let dir = output_root().join(loaded.config.output_dir());
    let (summary, err) = run_into(&loaded, &dir)?;
    println!("{} [{}] config {}", summary.name, summary.method, &summary.hash[..12]);
    if !summary.mean_rows.is_empty() {
        print!("{}", format_table(&summary.mean_rows));
    }
    println!("outputs: {}", dir.display());
    err.map_or(Ok(()), Err)
}

fn cmd_sweep(path: &Path) -> Result<(), RunError> {
    let loaded = load(path)?;
    if loaded.config.sweep.is_none() {
        return Err(RunError::Config(ConfigError::new("sweep", "the config has no [sweep] section")));
    }
    cmd_sweep_loaded(&loaded)
}

fn cmd_sweep_loaded(loaded: &LoadedConfig) -> Result<(), RunError> {
    let sweep = loaded.config.sweep.clone().expect("checked by caller");
    let base = output_root().join(loaded.config.output_dir());
    let leaf = sweep.key.rsplit('.').next().unwrap_or(&sweep.key).to_string();
    let mut rows: Vec<(String, ScoreSet)> = Vec::new();
    let mut worst: Option<RunError> = None;
    for v in &sweep.values {
        let point = loaded.with_override(&sweep.key, v)?;
        let label = format!("{leaf}={}", value_label(v));
        let dir = base.join(label.replace(['=', ';'], "_"));
        let (summary, err) = run_into(&point, &dir)?;
        for (l, s) in &summary.mean_rows {
            let row = if summary.mean_rows.len() == 1 { label.clone() } else { format!("{label}/{l}") };
            rows.push((row, s.clone()));
        }
        if let Some(e) = err {
            eprintln!("{label}: {e}");
            if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                worst = Some(e);
            }
        }
    }
    let prov = Provenance::new(&loaded.hash, loaded.config.truth.seed)
        .with("obs_seed", loaded.config.observations.seed)
        .with("sweep_key", &sweep.key);
    let text = scores_csv(rows.iter().map(|(l, s)| (l.as_str(), s)), &prov);
    std::fs::create_dir_all(&base).map_err(|e| RunError::Io(format!("{}: {e}", base.display())))?;
    let path = base.join("sweep.csv");
    std::fs::write(&path, text).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    println!("{} sweep over {} ({} points), config {}", loaded.config.name, sweep.key, sweep.values.len(), &loaded.hash[..12]);
    if !rows.is_empty() {
        print!("{}", format_table(&rows));
    }
    println!("outputs: {}", base.display());
    worst.map_or(Ok(()), Err)
}

fn cmd_compare(a: &Path, b: &Path) -> Result<(), RunError> {
    let la = load(a)?;
    let lb = load(b)?;
    if la.config.sweep.is_some() || lb.config.sweep.is_some() {
        return Err(RunError::Config(ConfigError::new("sweep", "compare takes single runs, not sweeps")));
    }
    let fa = observation_fingerprints(&la)?;
    let fb = observation_fingerprints(&lb)?;
    if fa != fb {
        return Err(RunError::Config(ConfigError::new(
            "observations",
            "the two configs produce different observations; refusing to compare",
        )));
    }
    let root = output_root();
    let (sa, ea) = run_into(&la, &root.join(la.config.output_dir()))?;
    let (sb, eb) = run_into(&lb, &root.join(lb.config.output_dir()))?;
    let mut rows: Vec<(String, ScoreSet)> = Vec::new();
    for (s, name) in [(&sa, &la.config.name), (&sb, &lb.config.name)] {
        for (l, sc) in &s.mean_rows {
            let row = if s.mean_rows.len() == 1 { name.clone() } else { format!("{name}/{l}") };
            rows.push((row, sc.clone()));
        }
    }
    let prov = Provenance::new(format!("{}+{}", la.hash, lb.hash), la.config.truth.seed)
        .with("obs_seed", la.config.observations.seed)
        .with("obs_fingerprints", fa.join(";"));
    let mut text = scores_csv(rows.iter().map(|(l, s)| (l.as_str(), s)), &prov);
    let mut ratios = String::new();
    if let ([(_, x)], [(_, y)]) = (sa.mean_rows.as_slice(), sb.mean_rows.as_slice()) {
        let _ = writeln!(
            ratios,
            "iteration ratio ({} / {}): {:.2}",
            lb.config.name,
            la.config.name,
            y.mean_iterations / x.mean_iterations
        );
        let _ = writeln!(ratios, "MSE ratio ({} / {}): {:.3}", lb.config.name, la.config.name, y.mse / x.mse);
        text.push_str(&ratios.lines().map(|l| format!("# {l}\n")).collect::<String>());
    }
    let path = root.join(format!("compare_{}_vs_{}.csv", la.config.name, lb.config.name));
    std::fs::create_dir_all(&root).map_err(|e| RunError::Io(format!("{}: {e}", root.display())))?;
    std::fs::write(&path, text).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
    print!("{}", format_table(&rows));
    print!("{ratios}");
    println!("outputs: {}", path.display());
    match (ea, eb) {
        (Some(e), _) | (None, Some(e)) => Err(e),
        _ => Ok(()),
    }
}

fn cmd_selftest() -> Result<(), RunError> {
    let checks = selftest::run_checks();
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        println!("{tag} {:<60} error {:.3e} (tol {:.0e})", c.name, c.error, c.tol);
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        Err(RunError::Numerical(format!("{failed} of {} checks failed", checks.len())))
    } else {
        println!("all {} checks passed", checks.len());
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => cmd_run(config),
        Command::Compare { config_a, config_b } => cmd_compare(config_a, config_b),
        Command::Sweep { config } => cmd_sweep(config),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
