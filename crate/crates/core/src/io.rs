//! Plain-text output: CSV tables with a provenance comment block.
//!
//! Every file starts with `#`-prefixed lines carrying the config hash and
//! seed, followed by a header row and one row per record. Floats are written
//! with 17 significant digits so that reruns are byte-identical and values
//! round-trip exactly.

use std::fmt::Write as _;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::metrics::ScoreSet;
use crate::models::Trajectory;
use crate::obs::ObservationSet;

/// Identifies the run that produced a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    /// Further `key: value` lines, e.g. secondary seeds.
    pub extra: Vec<(String, String)>,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self { config_hash: config_hash.into(), seed, extra: Vec::new() }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.extra.push((key.into(), value.to_string()));
        self
    }

    /// The comment block placed at the top of every output file.
    pub fn header(&self) -> String {
        let mut out = format!("# config_hash: {}\n# seed: {}\n", self.config_hash, self.seed);
        for (k, v) in &self.extra {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out
    }

    /// Prefix `body` with the comment block.
    pub fn wrap(&self, body: &str) -> String {
        let mut out = self.header();
        out.push_str(body);
        out
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// `x1, ..., xd`.
pub fn component_names(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}{i}")).collect()
}

fn push_row(out: &mut String, index: usize, v: &DVector<f64>) {
    let _ = write!(out, "{index}");
    for x in v.iter() {
        let _ = write!(out, ",{}", fmt_f64(*x));
    }
    out.push('\n');
}

/// One row per stored state, indexed by absolute time index.
pub fn trajectory_csv(traj: &Trajectory, prov: &Provenance) -> String {
    let mut out = prov.header();
    let _ = writeln!(out, "time_index,{}", component_names("x", traj.dim()).join(","));
    for (n, s) in traj.states().iter().enumerate() {
        push_row(&mut out, traj.offset + n, s);
    }
    out
}

/// One row per observation time.
pub fn observations_csv(obs: &ObservationSet, prov: &Provenance) -> String {
    let mut out = prov.header();
    let _ = writeln!(out, "time_index,{}", component_names("y", obs.h.nrows()).join(","));
    for (t, y) in obs.times.iter().zip(&obs.values) {
        push_row(&mut out, *t, y);
    }
    out
}

pub const SCORES_HEADER: &str =
    "label,c_truth,c,mse,mse_observed,d,mean_iterations,windows,converged_windows";

/// One score row; `label` identifies the method or sweep point.
pub fn scores_row(label: &str, s: &ScoreSet) -> String {
    let observed = s.mse_observed.map(fmt_f64).unwrap_or_default();
    format!(
        "{label},{},{},{},{observed},{},{},{},{}\n",
        fmt_f64(s.c_truth),
        fmt_f64(s.c),
        fmt_f64(s.mse),
        fmt_f64(s.d),
        fmt_f64(s.mean_iterations),
        s.windows,
        s.converged_windows
    )
}

/// A scores table with one row per `(label, scores)` pair.
pub fn scores_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a ScoreSet)>, prov: &Provenance) -> String {
    let mut out = prov.header();
    out.push_str(SCORES_HEADER);
    out.push('\n');
    for (label, s) in rows {
        out.push_str(&scores_row(label, s));
    }
    out
}

/// Read back a file written by [`trajectory_csv`], ignoring comment lines.
pub fn read_trajectory_csv(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::InvalidInput("empty trajectory file".into()))?;
    let width = header.split(',').count();
    if width < 2 {
        return Err(Error::InvalidInput("trajectory header has no components".into()));
    }
    let mut states = Vec::new();
    let mut offset = None;
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(Error::InvalidInput(format!("row {}: expected {width} fields, found {}", row + 1, fields.len())));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| Error::InvalidInput(format!("row {}: bad time index {:?}", row + 1, fields[0])))?;
        let start = *offset.get_or_insert(index);
        if index != start + row {
            return Err(Error::InvalidInput(format!("row {}: time index {index} is not consecutive", row + 1)));
        }
        let vals = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::InvalidInput(format!("row {}: bad value {f:?}", row + 1))))
            .collect::<Result<Vec<_>>>()?;
        states.push(DVector::from_vec(vals));
    }
    Trajectory::with_offset(states, offset.unwrap_or(0))
}

/// Extract a `# key: value` comment from a file written by this module.
pub fn read_comment<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l.trim_start_matches('#').trim().split_once(':'))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
}
