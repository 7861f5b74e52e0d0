//! Run metrics (RMSE, max error, NEES), Monte Carlo aggregation with
//! chi-square consistency bounds, the comparison-table renderer, and
//! the trace/metrics file writers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::chi_square_quantile;
use crate::sim::runner::{MethodId, Phase, RunOutput, TraceRow};
use crate::sim::truth::generate_truth;
use crate::sim::{run_prepared, ScenarioConfig, SimError};
use crate::v2v::VehicleId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no samples in the requested interval [{0}, {1})")]
    EmptyInterval(f64, f64),
    #[error("trace sample at t={t} has no truth sample within {max_gap} s")]
    Misaligned { t: f64, max_gap: f64 },
}

/// Horizontal RMSE of an estimate trace against a truth trace over a
/// half-open interval. Each estimate sample pairs with the nearest
/// truth sample; a gap beyond `max_align_gap` (half a GNSS period in
/// the pipeline) is an error, as is an empty interval.
pub fn compute_rmse(
    trace: &[(f64, f64, f64)],
    truth: &[(f64, f64, f64)],
    interval: (f64, f64),
    max_align_gap: f64,
) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut count = 0u64;
    for &(t, n, e) in trace {
        if t < interval.0 || t >= interval.1 {
            continue;
        }
        let idx = truth.partition_point(|s| s.0 < t);
        let candidates = [idx.checked_sub(1), Some(idx)];
        let nearest = candidates
            .iter()
            .flatten()
            .filter_map(|&i| truth.get(i))
            .min_by(|a, b| {
                (a.0 - t)
                    .abs()
                    .partial_cmp(&(b.0 - t).abs())
                    .expect("finite times")
            })
            .ok_or(MetricsError::EmptyInterval(interval.0, interval.1))?;
        if (nearest.0 - t).abs() > max_align_gap {
            return Err(MetricsError::Misaligned {
                t,
                max_gap: max_align_gap,
            });
        }
        let dn = n - nearest.1;
        let de = e - nearest.2;
        sum += dn * dn + de * de;
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::EmptyInterval(interval.0, interval.1));
    }
    Ok((sum / count as f64).sqrt())
}

/// RMSE over already truth-aligned trace rows.
pub fn rmse_from_rows(rows: &[TraceRow], t0: f64, t1: f64) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0u64;
    for r in rows {
        if r.t >= t0 && r.t < t1 {
            sum += r.err_norm * r.err_norm;
            count += 1;
        }
    }
    (count > 0).then(|| (sum / count as f64).sqrt())
}

/// Metrics for one (phase, method, vehicle) cell.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricCell {
    pub phase: String,
    pub method: String,
    pub vehicle: VehicleId,
    pub rmse_m: f64,
    pub max_err_m: f64,
    pub nees_mean: f64,
    pub samples: u64,
}

/// Per-run metric set; cells are ordered (phase, method, vehicle) and
/// cells without samples are omitted.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub phases: Vec<Phase>,
    pub methods: Vec<String>,
    pub vehicles: Vec<VehicleId>,
    pub cells: Vec<MetricCell>,
}

pub fn compute_run_metrics(out: &RunOutput, seed: u64) -> RunMetrics {
    let mut cells = Vec::new();
    for phase in &out.phases {
        for &m in &out.methods {
            for &v in &out.vehicle_ids {
                let rows = &out.traces[&(v, m)];
                let mut sum = 0.0;
                let mut max = 0.0f64;
                let mut nees_sum = 0.0;
                let mut nees_count = 0u64;
                let mut count = 0u64;
                for r in rows {
                    if r.t >= phase.t0 && r.t < phase.t1 {
                        sum += r.err_norm * r.err_norm;
                        max = max.max(r.err_norm);
                        if r.nees.is_finite() {
                            nees_sum += r.nees;
                            nees_count += 1;
                        }
                        count += 1;
                    }
                }
                if count > 0 {
                    cells.push(MetricCell {
                        phase: phase.name.clone(),
                        method: m.to_string(),
                        vehicle: v,
                        rmse_m: (sum / count as f64).sqrt(),
                        max_err_m: max,
                        nees_mean: if nees_count > 0 {
                            nees_sum / nees_count as f64
                        } else {
                            0.0
                        },
                        samples: count,
                    });
                }
            }
        }
    }
    RunMetrics {
        seed,
        phases: out.phases.clone(),
        methods: out.methods.iter().map(|m| m.to_string()).collect(),
        vehicles: out.vehicle_ids.clone(),
        cells,
    }
}

/// 95%-style chi-square interval for the per-step NEES average over
/// `runs` independent runs with `dof` degrees of freedom each:
/// [chi2_{a/2}(dof*runs), chi2_{1-a/2}(dof*runs)] / runs.
pub fn nees_chi_square_bounds(runs: usize, dof: usize, confidence: f64) -> (f64, f64) {
    let alpha = 1.0 - confidence;
    let k = dof * runs;
    (
        chi_square_quantile(k, alpha / 2.0) / runs as f64,
        chi_square_quantile(k, 1.0 - alpha / 2.0) / runs as f64,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McRmseCell {
    pub phase: String,
    pub method: String,
    pub vehicle: VehicleId,
    pub mean_rmse_m: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
    pub runs_counted: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McNeesSeries {
    pub method: String,
    pub vehicle: VehicleId,
    pub dof: usize,
    pub bound_lo: f64,
    pub bound_hi: f64,
    /// Fraction of time steps whose across-run average NEES lies
    /// inside [bound_lo, bound_hi].
    pub fraction_within: f64,
    pub t: Vec<f64>,
    pub avg_nees: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub runs: usize,
    pub base_seed: u64,
    pub methods: Vec<String>,
    pub vehicles: Vec<VehicleId>,
    pub phases: Vec<Phase>,
    pub rmse: Vec<McRmseCell>,
    pub nees: Vec<McNeesSeries>,
}

/// Execute `runs` scenario instances with seeds base..base+runs-1 in
/// parallel (results merged by run index, so the output is independent
/// of scheduling) and aggregate mean RMSE with normal-approximation
/// confidence intervals plus per-step average NEES against chi-square
/// bounds.
pub fn run_monte_carlo(
    config: &ScenarioConfig,
    runs: usize,
    methods: &[MethodId],
) -> Result<MonteCarloSummary, SimError> {
    config.validate()?;
    let truths = generate_truth(config)?;
    let base_seed = config.seed;

    struct PerRun {
        metrics: RunMetrics,
        nees: BTreeMap<(VehicleId, MethodId), Vec<f64>>,
        times: Vec<f64>,
    }

    let per_run: Vec<PerRun> = (0..runs)
        .into_par_iter()
        .map(|r| -> Result<PerRun, SimError> {
            let seed = base_seed + r as u64;
            let out = run_prepared(config, &truths, methods, seed)?;
            let metrics = compute_run_metrics(&out, seed);
            let mut nees = BTreeMap::new();
            let mut times = Vec::new();
            for (key, rows) in &out.traces {
                if times.is_empty() {
                    times = rows.iter().map(|r| r.t).collect();
                }
                nees.insert(*key, rows.iter().map(|r| r.nees).collect());
            }
            Ok(PerRun {
                metrics,
                nees,
                times,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let phases = per_run[0].metrics.phases.clone();
    let vehicles = per_run[0].metrics.vehicles.clone();

    // RMSE aggregation.
    let mut rmse_cells = Vec::new();
    for phase in &phases {
        for &m in methods {
            for &v in &vehicles {
                let values: Vec<f64> = per_run
                    .iter()
                    .filter_map(|pr| {
                        pr.metrics
                            .cells
                            .iter()
                            .find(|c| {
                                c.phase == phase.name && c.method == m.to_string() && c.vehicle == v
                            })
                            .map(|c| c.rmse_m)
                    })
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var =
                    values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                let half = 1.96 * (var / n).sqrt();
                rmse_cells.push(McRmseCell {
                    phase: phase.name.clone(),
                    method: m.to_string(),
                    vehicle: v,
                    mean_rmse_m: mean,
                    ci95_lo: mean - half,
                    ci95_hi: mean + half,
                    runs_counted: values.len(),
                });
            }
        }
    }

    // Per-step average NEES.
    let (lo, hi) = nees_chi_square_bounds(runs, 2, 0.95);
    let times = per_run[0].times.clone();
    let mut nees_series = Vec::new();
    for &m in methods {
        for &v in &vehicles {
            let n_steps = times.len();
            let mut avg = vec![0.0f64; n_steps];
            let mut counts = vec![0u64; n_steps];
            for pr in &per_run {
                if let Some(series) = pr.nees.get(&(v, m)) {
                    for (k, &x) in series.iter().enumerate() {
                        if x.is_finite() {
                            avg[k] += x;
                            counts[k] += 1;
                        }
                    }
                }
            }
            for k in 0..n_steps {
                avg[k] = if counts[k] > 0 {
                    avg[k] / counts[k] as f64
                } else {
                    0.0
                };
            }
            let within = avg.iter().filter(|&&x| x >= lo && x <= hi).count();
            nees_series.push(McNeesSeries {
                method: m.to_string(),
                vehicle: v,
                dof: 2,
                bound_lo: lo,
                bound_hi: hi,
                fraction_within: within as f64 / n_steps.max(1) as f64,
                t: times.clone(),
                avg_nees: avg,
            });
        }
    }

    Ok(MonteCarloSummary {
        runs,
        base_seed,
        methods: methods.iter().map(|m| m.to_string()).collect(),
        vehicles,
        phases,
        rmse: rmse_cells,
        nees: nees_series,
    })
}

/// Render the per-phase comparison tables (methods as rows, vehicles
/// as columns). Pure function of the metrics, so formatting is
/// reproducible from the JSON alone.
pub fn render_comparison_table(metrics: &RunMetrics) -> String {
    let mut out = String::new();
    for phase in &metrics.phases {
        out.push_str(&format!(
            "phase {} [{:.2} s .. {:.2} s) RMSE\n",
            phase.name, phase.t0, phase.t1
        ));
        out.push_str(&format!("{:<8}", "method"));
        for v in &metrics.vehicles {
            out.push_str(&format!("{:>12}", format!("v{v}")));
        }
        out.push('\n');
        for m in &metrics.methods {
            out.push_str(&format!("{m:<8}"));
            for v in &metrics.vehicles {
                let cell = metrics
                    .cells
                    .iter()
                    .find(|c| c.phase == phase.name && &c.method == m && c.vehicle == *v);
                match cell {
                    Some(c) => out.push_str(&format!("{:>12}", format!("{:.3} m", c.rmse_m))),
                    None => out.push_str(&format!("{:>12}", "/")),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Write one CSV per (vehicle, method) with the spec'd columns.
pub fn write_traces_csv(dir: &Path, out: &RunOutput) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for ((vehicle, method), rows) in &out.traces {
        let path = dir.join(format!("trace_v{vehicle}_{method}.csv"));
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(file, "t,truth_n,truth_e,est_n,est_e,err_norm,case_tag")?;
        for r in rows {
            writeln!(
                file,
                "{},{},{},{},{},{},{}",
                r.t, r.truth_n, r.truth_e, r.est_n, r.est_e, r.err_norm, r.case_tag
            )?;
        }
        paths.push(path);
    }
    Ok(paths)
}

pub fn write_metrics_json(path: &Path, metrics: &RunMetrics) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    std::fs::write(path, json)
}

pub fn write_monte_carlo_json(path: &Path, summary: &MonteCarloSummary) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(summary).expect("summary serialize");
    std::fs::write(path, json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat_truth() -> Vec<(f64, f64, f64)> {
        (0..100).map(|k| (k as f64 * 0.2, 0.0, 0.0)).collect()
    }

    #[test]
    fn zero_error_trace_has_zero_rmse() {
        let truth = flat_truth();
        let trace: Vec<_> = truth.clone();
        let rmse = compute_rmse(&trace, &truth, (0.0, 20.0), 0.1).unwrap();
        assert_eq!(rmse, 0.0);
    }

    #[test]
    fn constant_offset_trace_has_that_rmse() {
        let truth = flat_truth();
        let trace: Vec<_> = truth.iter().map(|&(t, n, e)| (t, n + 3.0, e)).collect();
        let rmse = compute_rmse(&trace, &truth, (0.0, 20.0), 0.1).unwrap();
        assert_relative_eq!(rmse, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn mixed_errors_match_hand_expansion() {
        // Errors {3, 4} equally weighted: sqrt((9 + 16)/2) = 3.5355...
        let truth = vec![(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)];
        let trace = vec![(0.0, 3.0, 0.0), (1.0, 0.0, 4.0)];
        let rmse = compute_rmse(&trace, &truth, (0.0, 2.0), 0.5).unwrap();
        assert_relative_eq!(rmse, 12.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(rmse, 3.5355, epsilon = 1e-4);
    }

    #[test]
    fn empty_interval_is_an_error() {
        let truth = flat_truth();
        let err = compute_rmse(&truth, &truth, (1000.0, 1001.0), 0.1).unwrap_err();
        assert!(matches!(err, MetricsError::EmptyInterval(..)));
    }

    #[test]
    fn misalignment_is_an_error() {
        let truth = vec![(0.0, 0.0, 0.0), (10.0, 0.0, 0.0)];
        let trace = vec![(5.0, 1.0, 0.0)];
        let err = compute_rmse(&trace, &truth, (0.0, 10.0), 0.1).unwrap_err();
        assert!(matches!(err, MetricsError::Misaligned { .. }));
    }

    #[test]
    fn rmse_invariant_to_uniform_oversampling() {
        // The same piecewise-constant signal sampled at 5 Hz and at
        // 20 Hz (zero-order hold) gives the same RMSE.
        let truth: Vec<_> = (0..400).map(|k| (k as f64 * 0.05, 0.0, 0.0)).collect();
        let base: Vec<_> = (0..100)
            .map(|k| {
                let t = k as f64 * 0.2;
                let err = if k % 2 == 0 { 3.0 } else { 4.0 };
                (t, err, 0.0)
            })
            .collect();
        let oversampled: Vec<_> = (0..400)
            .map(|k| {
                let t = k as f64 * 0.05;
                let err = if (k / 4) % 2 == 0 { 3.0 } else { 4.0 };
                (t, err, 0.0)
            })
            .collect();
        let a = compute_rmse(&base, &truth, (0.0, 20.0), 0.05).unwrap();
        let b = compute_rmse(&oversampled, &truth, (0.0, 20.0), 0.05).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_monte_carlo_reports_zero_rmse() {
        let mut config = crate::sim::presets::scenario1();
        config.duration_s = 20.0;
        config.noise = crate::sim::config::NoiseConfig {
            gnss_pos_sigma_m: 0.0,
            gnss_vel_sigma_mps: 0.0,
            gnss_bias_sigma_m: 0.0,
            gnss_bias_tau_s: 60.0,
            gnss_bias_common_fraction: 0.5,
            gyro_arw: 0.0,
            accel_vrw: 0.0,
            gyro_bias_sigma: 0.0,
            accel_bias_sigma: 0.0,
            sigma_v2v_m: 0.0,
            init_pos_sigma_m: 0.0,
            init_vel_sigma_mps: 0.0,
            init_att_sigma_rad: 0.0,
        };
        let summary = run_monte_carlo(&config, 3, &[crate::sim::MethodId::Sp]).unwrap();
        assert!(!summary.rmse.is_empty());
        for cell in &summary.rmse {
            assert!(
                cell.mean_rmse_m < 1e-3,
                "{}: {}",
                cell.phase,
                cell.mean_rmse_m
            );
            assert_eq!(cell.runs_counted, 3);
        }
    }

    #[test]
    fn chi_square_bounds_bracket_the_dof() {
        // Oracle: for 200 runs and 2 dof the 95% interval is roughly
        // 2 * (1 -/+ 0.14).
        let (lo, hi) = nees_chi_square_bounds(200, 2, 0.95);
        assert!(lo > 1.6 && lo < 2.0, "lo {lo}");
        assert!(hi > 2.0 && hi < 2.5, "hi {hi}");
        // Oracle numbers via the chi-square quantile itself.
        assert_relative_eq!(lo, chi_square_quantile(400, 0.025) / 200.0, epsilon = 1e-12);
        assert_relative_eq!(hi, chi_square_quantile(400, 0.975) / 200.0, epsilon = 1e-12);
    }

    #[test]
    fn table_rendering_round_trips_through_json() {
        let metrics = RunMetrics {
            seed: 7,
            phases: vec![
                Phase {
                    name: "start".into(),
                    t0: 0.0,
                    t1: 20.0,
                },
                Phase {
                    name: "stop_v1".into(),
                    t0: 20.0,
                    t1: 50.0,
                },
            ],
            methods: vec!["sp".into(), "sl-sp".into()],
            vehicles: vec![0, 1],
            cells: vec![
                MetricCell {
                    phase: "start".into(),
                    method: "sp".into(),
                    vehicle: 0,
                    rmse_m: 3.21,
                    max_err_m: 5.0,
                    nees_mean: 2.1,
                    samples: 100,
                },
                MetricCell {
                    phase: "stop_v1".into(),
                    method: "sl-sp".into(),
                    vehicle: 1,
                    rmse_m: 0.24,
                    max_err_m: 0.5,
                    nees_mean: 1.9,
                    samples: 150,
                },
            ],
        };
        let json = serde_json::to_string(&metrics).unwrap();
        let back: RunMetrics = serde_json::from_str(&json).unwrap();
        assert_eq!(
            render_comparison_table(&metrics),
            render_comparison_table(&back)
        );
        assert!(render_comparison_table(&metrics).contains("0.240 m"));
        assert!(render_comparison_table(&metrics).contains('/'));
    }
}
