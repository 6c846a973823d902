use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::capped::{CappedSolution, Residuals};
use crate::error::{Error, Result};
use crate::metrics::LoadStats;

/// Where a run's tokens came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataEcho {
    /// Batch file path, when the input was read from disk.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub input: Option<String>,
    pub n: usize,
    pub d: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clusters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skew: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub data_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverEcho {
    pub iterations_used: usize,
    pub residuals: Residuals,
    pub cap_violations: usize,
}

impl SolverEcho {
    pub fn new(sol: &CappedSolution, cap_violations: usize) -> Self {
        Self { iterations_used: sol.iterations_used, residuals: sol.residuals, cap_violations }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: RunConfig,
    pub data: DataEcho,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stats: Option<LoadStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub solver: Option<SolverEcho>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diverged_at_step: Option<usize>,
    /// Milliseconds per phase; omitted when timestamps are disabled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

impl RunReport {
    pub fn new(command: &str, config: RunConfig, data: DataEcho) -> Self {
        Self {
            command: command.into(),
            config,
            data,
            stats: None,
            solver: None,
            losses: Vec::new(),
            final_loss: None,
            diverged_at_step: None,
            timings_ms: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Phase timer; records nothing when disabled so reports stay byte-stable.
#[derive(Debug)]
pub struct PhaseTimer {
    enabled: bool,
    phases: BTreeMap<String, f64>,
}

impl PhaseTimer {
    pub fn new(enabled: bool) -> Self {
        Self { enabled, phases: BTreeMap::new() }
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        if self.enabled {
            *self.phases.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64() * 1e3;
        }
        out
    }

    pub fn finish(self) -> Option<BTreeMap<String, f64>> {
        self.enabled.then_some(self.phases)
    }
}

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// `expert_id,count` rows.
pub fn write_load_csv(path: impl AsRef<Path>, stats: &LoadStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["expert_id", "count"]).map_err(csv_err)?;
    for (i, c) in stats.per_expert_load.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `num_experts,token_count` rows.
pub fn write_hist_csv(path: impl AsRef<Path>, stats: &LoadStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["num_experts", "token_count"]).map_err(csv_err)?;
    for (m, c) in stats.experts_per_token_hist.iter().enumerate() {
        w.write_record([m.to_string(), c.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
