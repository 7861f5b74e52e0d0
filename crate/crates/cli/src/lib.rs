//! Command implementations behind the `cin` binary.
//!
//! `cmd_run` executes one scenario and writes per-(vehicle, method)
//! trace CSVs plus a metrics JSON, printing the per-phase comparison
//! table. `cmd_montecarlo` executes a batch with seeds base..base+N-1
//! and writes the aggregate summary. Exit-code mapping lives in
//! `main`: 2 for configuration errors, 1 for runtime failures.

use std::path::{Path, PathBuf};

use cin_core::metrics::{
    compute_run_metrics, render_comparison_table, run_monte_carlo, write_metrics_json,
    write_monte_carlo_json, write_traces_csv,
};
use cin_core::sim::{run_scenario_methods, ConfigError, MethodId, ScenarioConfig, SimError};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit 2).
    Config(String),
    /// Everything else (exit 1).
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => CliError::Config(c.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = ScenarioConfig::from_json(&text)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    Ok(config)
}

pub fn parse_methods(spec: Option<&str>) -> Result<Vec<MethodId>, CliError> {
    match spec {
        None => Ok(MethodId::ALL.to_vec()),
        Some(s) => s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.parse::<MethodId>().map_err(CliError::Config))
            .collect(),
    }
}

/// Run one scenario; write traces + metrics; print the comparison
/// table. Returns the metrics JSON path.
pub fn cmd_run(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    methods_spec: Option<&str>,
) -> Result<PathBuf, CliError> {
    let config = load_config(config_path, seed_override)?;
    let methods = parse_methods(methods_spec)?;
    let output = run_scenario_methods(&config, &methods)?;
    let metrics = compute_run_metrics(&output, config.seed);

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    write_traces_csv(out_dir, &output)
        .map_err(|e| CliError::Runtime(format!("writing traces: {e}")))?;
    let metrics_path = out_dir.join("metrics.json");
    write_metrics_json(&metrics_path, &metrics)
        .map_err(|e| CliError::Runtime(format!("writing metrics: {e}")))?;

    print!("{}", render_comparison_table(&metrics));
    let rejected: u64 = output.rejected.values().sum();
    let dropped: u64 = output.dropped_v2v.values().sum();
    if rejected + dropped > 0 {
        log::info!("diagnostics: {rejected} rejected updates, {dropped} dropped V2V rows");
    }
    Ok(metrics_path)
}

/// Run a Monte Carlo batch and write the aggregate summary JSON.
pub fn cmd_montecarlo(
    config_path: &Path,
    runs: usize,
    out_dir: &Path,
    methods_spec: Option<&str>,
) -> Result<PathBuf, CliError> {
    if runs == 0 {
        return Err(CliError::Config("--runs must be >= 1".into()));
    }
    let config = load_config(config_path, None)?;
    let methods = parse_methods(methods_spec)?;
    let summary = run_monte_carlo(&config, runs, &methods)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join("montecarlo.json");
    write_monte_carlo_json(&path, &summary)
        .map_err(|e| CliError::Runtime(format!("writing summary: {e}")))?;

    for series in &summary.nees {
        println!(
            "NEES v{} {}: {:.1}% of steps within [{:.3}, {:.3}]",
            series.vehicle,
            series.method,
            100.0 * series.fraction_within,
            series.bound_lo,
            series.bound_hi
        );
    }
    Ok(path)
}
