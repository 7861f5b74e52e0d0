//! Acceptance suite: one test per criterion, each printing a PASS or
//! FAIL line (run with `cargo test --test acceptance -- --nocapture`
//! to see them all).
//!
//! Oracles here are independent of the implementation paths they
//! check: a lattice search for the stop-line solve, central finite
//! differences for the Jacobians, explicit matrix algebra for the
//! filter identities, and chi-square statistics for consistency.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, SVector, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;

use cin_core::ekf::{self, FilterState, ObsMatrix, Observation, ObservationKind, StateMatrix};
use cin_core::geodesy::{geodetic_of, position_scaling, GeodeticPosition, NedVector};
use cin_core::ins::{
    build_transition, mechanize, ErrorState15, ImuSample, NavSolution, BA, BG, POS,
};
use cin_core::metrics::{
    compute_run_metrics, nees_chi_square_bounds, rmse_from_rows, write_metrics_json,
    write_traces_csv,
};
use cin_core::sim::rng::StreamRng;
use cin_core::sim::truth::generate_truth;
use cin_core::sim::{presets, run_prepared, run_scenario, MethodId};
use cin_core::stopline::{
    detect_first_stopped, distance_to_line, solve_position, LineGeometry, StopLineMapEntry,
    StopLinePrior,
};
use cin_core::v2v::{range_observation, BeaconPacket, RangeMeasurement};

fn report(criterion: u32, pass: bool, detail: &str) {
    println!(
        "{}: criterion {criterion} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion}: {detail}");
}

// ---------------------------------------------------------------- C1

fn random_entry(rng: &StreamRng, k: u64) -> StopLineMapEntry {
    let theta = 2.0 * std::f64::consts::PI * rng.uniform([k, 0, 9]);
    let dtheta = 0.2 + (std::f64::consts::PI - 0.4) * rng.uniform([k, 1, 9]);
    let phi = theta + dtheta;
    let n1 = Vector2::new(theta.cos(), theta.sin());
    let n2 = Vector2::new(phi.cos(), phi.sin());
    let c1 = 20.0 * (2.0 * rng.uniform([k, 2, 9]) - 1.0);
    let c2 = 20.0 * (2.0 * rng.uniform([k, 3, 9]) - 1.0);
    let f1 = if rng.uniform([k, 4, 9]) < 0.5 {
        1.0
    } else {
        -1.0
    };
    let f2 = if rng.uniform([k, 5, 9]) < 0.5 {
        1.0
    } else {
        -1.0
    };
    StopLineMapEntry::new(
        LineGeometry::from_general(n1.x, n1.y, c1).unwrap(),
        LineGeometry::from_general(n2.x, n2.y, c2).unwrap(),
        cin_core::geodesy::RoadFrame::new(theta),
        f1 * n1,
        f2 * n2,
        StopLinePrior::default(),
    )
    .unwrap()
}

/// Brute-force coarse-to-fine lattice search down to the 1 mm grid,
/// restricted to the approach/lane sides where the squared-residual
/// objective is convex (two squared affine residuals).
///
/// The search region is bounded from the line coefficients alone: the
/// solution sits within (|c1| + |c2| + d_e + d_l) * sqrt(2) / |sin a|
/// of the origin, with `a` the angle between the normals. Near-parallel
/// geometries stretch the objective's level sets by the same 1/sin
/// factor, so each refinement keeps a window of several parent steps.
fn grid_search_oracle(entry: &StopLineMapEntry, d_e: f64, d_l: f64) -> Vector2<f64> {
    let s_e = if entry.stop_line.normal().dot(&entry.approach_side) >= 0.0 {
        1.0
    } else {
        -1.0
    };
    let s_l = if entry.left_lane_line.normal().dot(&entry.lane_side) >= 0.0 {
        1.0
    } else {
        -1.0
    };
    let objective = |p: &Vector2<f64>| {
        let r1 = distance_to_line(&entry.stop_line, p) - d_e;
        let r2 = distance_to_line(&entry.left_lane_line, p) - d_l;
        r1 * r1 + r2 * r2
    };
    let on_sides = |p: &Vector2<f64>| {
        s_e * entry.stop_line.signed_eval(p) >= 0.0
            && s_l * entry.left_lane_line.signed_eval(p) >= 0.0
    };
    let sin_angle = (entry.stop_line.a * entry.left_lane_line.b
        - entry.stop_line.b * entry.left_lane_line.a)
        .abs();
    let bound = (entry.stop_line.c.abs() + entry.left_lane_line.c.abs() + d_e + d_l)
        * std::f64::consts::SQRT_2
        / sin_angle
        + 5.0;

    let stretch = (1.0 / sin_angle).ceil().max(4.0);
    let mut center = Vector2::new(0.0, 0.0);
    let mut best = center;
    let mut half = bound;
    let mut step = bound / 160.0;
    loop {
        let n = (2.0 * half / step).round() as i64;
        let mut best_val = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let p = Vector2::new(
                    center.x - half + i as f64 * step,
                    center.y - half + j as f64 * step,
                );
                if !on_sides(&p) {
                    continue;
                }
                let v = objective(&p);
                if v < best_val {
                    best_val = v;
                    best = p;
                }
            }
        }
        center = best;
        if step <= 0.001 {
            break;
        }
        // Window wide enough to contain the continuous minimum even on
        // stretched level sets, then refine the lattice.
        half = stretch * 2.0 * step;
        step = (step / 8.0).max(0.001);
    }
    best
}

#[test]
fn criterion_1_geometry_oracle_equivalence() {
    let start = Instant::now();
    let rng = StreamRng::new(101);
    let mut max_dev = 0.0f64;
    for k in 0..100u64 {
        let entry = random_entry(&rng, k);
        let d_e = 20.0 * rng.uniform([k, 6, 9]);
        let d_l = 20.0 * rng.uniform([k, 7, 9]);
        let solved = solve_position(&entry, d_e, d_l).unwrap();
        let oracle = grid_search_oracle(&entry, d_e, d_l);
        max_dev = max_dev.max((solved - oracle).norm());
    }
    let elapsed = start.elapsed();
    let pass = max_dev <= 2e-3 && elapsed.as_secs_f64() < 10.0;
    report(
        1,
        pass,
        &format!(
            "solve_position vs 1 mm grid search on 100 instances: max deviation {max_dev:.2e} m \
             (limit 2e-3), runtime {:.2} s (limit 10)",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- C2

/// INS = truth (+) error, matching the filter's conventions.
fn perturb_nav(nav: &NavSolution, err: &ErrorState15) -> NavSolution {
    let mut attitude = UnitQuaternion::from_scaled_axis(-err.attitude_err()) * nav.attitude;
    attitude.renormalize();
    let dp = err.position_err();
    NavSolution {
        attitude,
        velocity: nav.velocity + err.velocity_err(),
        position: GeodeticPosition {
            latitude: nav.position.latitude + dp.x,
            longitude: nav.position.longitude + dp.y,
            height: nav.position.height + dp.z,
        },
        timestamp: nav.timestamp,
    }
}

fn nav_difference(ins: &NavSolution, truth: &NavSolution) -> SVector<f64, 9> {
    let mut d = SVector::<f64, 9>::zeros();
    let dq = ins.attitude * truth.attitude.inverse();
    d.fixed_rows_mut::<3>(0).copy_from(&(-dq.scaled_axis()));
    d.fixed_rows_mut::<3>(3)
        .copy_from(&(ins.velocity - truth.velocity));
    d[6] = ins.position.latitude - truth.position.latitude;
    d[7] = ins.position.longitude - truth.position.longitude;
    d[8] = ins.position.height - truth.position.height;
    d
}

#[test]
fn criterion_2_jacobian_correctness() {
    let start = Instant::now();
    let rng = StreamRng::new(202);

    // V2V range row vs central finite differences of the range.
    let origin = GeodeticPosition::from_degrees(40.0, 116.3, 50.0).unwrap();
    let (sn, se) = position_scaling(&origin);
    let mut max_rel_v2v = 0.0f64;
    let mut v2v_checked = 0u32;
    let mut k = 0u64;
    while v2v_checked < 1000 {
        k += 1;
        let pi = Vector2::new(
            150.0 * (2.0 * rng.uniform([k, 0, 2]) - 1.0),
            150.0 * (2.0 * rng.uniform([k, 1, 2]) - 1.0),
        );
        let pj = Vector2::new(
            150.0 * (2.0 * rng.uniform([k, 2, 2]) - 1.0),
            150.0 * (2.0 * rng.uniform([k, 3, 2]) - 1.0),
        );
        if (pi - pj).norm() < 2.0 {
            continue;
        }
        let nav = NavSolution {
            attitude: UnitQuaternion::identity(),
            velocity: Vector3::zeros(),
            position: geodetic_of(&NedVector::new(pi.x, pi.y, 0.0), &origin),
            timestamp: 0.0,
        };
        let beacon = BeaconPacket {
            sender: 1,
            timestamp: 0.0,
            position: pj,
            pos_cov: Matrix2::zeros(),
            first_stopped: false,
        };
        let range = RangeMeasurement {
            from: 1,
            to: 0,
            distance: (pi - pj).norm(),
            timestamp: 0.0,
            sigma: 0.1,
        };
        let obs = range_observation(&nav, &origin, &beacon, &range, 0.5, 0.25).unwrap();
        let step = 1e-6;
        let f = |p: Vector2<f64>| (p - pj).norm();
        let dn = (f(pi + Vector2::new(step, 0.0)) - f(pi - Vector2::new(step, 0.0))) / (2.0 * step);
        let de = (f(pi + Vector2::new(0.0, step)) - f(pi - Vector2::new(0.0, step))) / (2.0 * step);
        let rel = (Vector2::new(obs.h[(0, POS)] / sn, obs.h[(0, POS + 1)] / se)
            - Vector2::new(dn, de))
        .norm();
        max_rel_v2v = max_rel_v2v.max(rel);
        v2v_checked += 1;
    }

    // Transition matrix vs finite differences of the mechanization.
    let mut max_rel_f = 0.0f64;
    for trial in 0..1000u64 {
        let nav = NavSolution {
            attitude: UnitQuaternion::from_euler_angles(
                0.05 * (2.0 * rng.uniform([trial, 10, 2]) - 1.0),
                0.05 * (2.0 * rng.uniform([trial, 11, 2]) - 1.0),
                2.0 * std::f64::consts::PI * rng.uniform([trial, 12, 2]),
            ),
            velocity: Vector3::new(
                15.0 * (2.0 * rng.uniform([trial, 13, 2]) - 1.0),
                15.0 * (2.0 * rng.uniform([trial, 14, 2]) - 1.0),
                0.5 * (2.0 * rng.uniform([trial, 15, 2]) - 1.0),
            ),
            position: GeodeticPosition::from_degrees(
                -60.0 + 120.0 * rng.uniform([trial, 16, 2]),
                116.3,
                50.0,
            )
            .unwrap(),
            timestamp: 0.0,
        };
        let imu = ImuSample {
            timestamp: 0.0,
            gyro: Vector3::new(
                0.2 * (2.0 * rng.uniform([trial, 17, 2]) - 1.0),
                0.2 * (2.0 * rng.uniform([trial, 18, 2]) - 1.0),
                0.2 * (2.0 * rng.uniform([trial, 19, 2]) - 1.0),
            ),
            accel: Vector3::new(
                2.0 * rng.uniform([trial, 20, 2]) - 1.0,
                2.0 * rng.uniform([trial, 21, 2]) - 1.0,
                -9.8 + (2.0 * rng.uniform([trial, 22, 2]) - 1.0),
            ),
        };
        let dt = 0.01;
        let f = build_transition(&nav, &imu, dt);
        let mut dx = SVector::<f64, 15>::zeros();
        for i in 0..15 {
            dx[i] = 2.0 * rng.uniform([trial, 30 + i as u64, 2]) - 1.0;
        }
        dx *= 1e-6 / dx.norm();
        let err = ErrorState15::from(dx);
        let ins0 = perturb_nav(&nav, &err);
        let imu_ins = ImuSample {
            timestamp: 0.0,
            gyro: imu.gyro + err.gyro_bias(),
            accel: imu.accel + err.accel_bias(),
        };
        let ins1 = mechanize(&ins0, &imu_ins, dt).unwrap();
        let truth1 = mechanize(&nav, &imu, dt).unwrap();
        let mut fd = SVector::<f64, 15>::zeros();
        fd.fixed_rows_mut::<9>(0)
            .copy_from(&nav_difference(&ins1, &truth1));
        fd.fixed_rows_mut::<3>(BG).copy_from(&err.gyro_bias());
        fd.fixed_rows_mut::<3>(BA).copy_from(&err.accel_bias());
        let predicted = f * dx;
        max_rel_f = max_rel_f.max((fd - predicted).norm() / predicted.norm());
    }

    let elapsed = start.elapsed();
    let pass = max_rel_v2v <= 1e-5 && max_rel_f <= 1e-3 && elapsed.as_secs_f64() < 30.0;
    report(
        2,
        pass,
        &format!(
            "range-row FD max rel err {max_rel_v2v:.2e} (limit 1e-5), transition FD max rel err \
             {max_rel_f:.2e} (limit 1e-3) over 1000 states each, runtime {:.2} s (limit 30)",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- C3

fn random_psd(rng: &StreamRng, k: u64, scale: f64) -> StateMatrix {
    let mut a = StateMatrix::zeros();
    for i in 0..15 {
        for j in 0..15 {
            a[(i, j)] = (2.0 * rng.uniform([k, (i * 15 + j) as u64, 3]) - 1.0) * scale;
        }
    }
    a * a.transpose() + StateMatrix::identity() * 1e-6
}

fn random_obs(rng: &StreamRng, k: u64, rows: usize) -> Observation {
    let mut h = ObsMatrix::zeros(rows);
    for i in 0..rows {
        for j in 0..15 {
            h[(i, j)] = 2.0 * rng.uniform([k, 400 + (i * 15 + j) as u64, 3]) - 1.0;
        }
    }
    let mut r = DMatrix::zeros(rows, rows);
    for i in 0..rows {
        r[(i, i)] = 0.5 + rng.uniform([k, 700 + i as u64, 3]);
    }
    let mut z = DVector::zeros(rows);
    for i in 0..rows {
        z[i] = 2.0 * rng.uniform([k, 800 + i as u64, 3]) - 1.0;
    }
    Observation::new(z, h, r, ObservationKind::Sp).unwrap()
}

#[test]
fn criterion_3_filter_algebra() {
    let rng = StreamRng::new(303);

    // Joseph form vs canonical (I - K H) P.
    let mut max_joseph = 0.0f64;
    for k in 0..100u64 {
        let fs = FilterState::new(ErrorState15::zeros(), random_psd(&rng, k, 1.0), 0.0);
        let obs = random_obs(&rng, k, 1 + (k % 5) as usize);
        let joseph = ekf::update(&fs, &obs).unwrap();
        let s = &obs.h * fs.p * obs.h.transpose() + &obs.r;
        let k_gain = fs.p * obs.h.transpose() * s.try_inverse().unwrap();
        let canonical = (StateMatrix::identity() - &k_gain * &obs.h) * fs.p;
        max_joseph = max_joseph.max((joseph.p - canonical).norm() / (1.0 + canonical.norm()));
    }

    // Batch stacked update vs sequential.
    let mut max_batch = 0.0f64;
    for k in 0..100u64 {
        let fs = FilterState::new(ErrorState15::zeros(), random_psd(&rng, 1000 + k, 1.0), 0.0);
        let a = random_obs(&rng, 2000 + k, 2);
        let b = random_obs(&rng, 3000 + k, 1);
        let batch = ekf::update(&fs, &ekf::stack(&[a.clone(), b.clone()]).unwrap()).unwrap();
        let seq = ekf::update(&ekf::update(&fs, &a).unwrap(), &b).unwrap();
        max_batch = max_batch.max((batch.x.0 - seq.x.0).norm());
    }

    // PSD over 1e4 randomized predict/update cycles.
    let mut fs = FilterState::new(ErrorState15::zeros(), StateMatrix::identity(), 0.0);
    let mut min_eig = f64::INFINITY;
    let mut max_asym = 0.0f64;
    for k in 0..10_000u64 {
        let mut f = StateMatrix::identity();
        for i in 0..4 {
            f[(i + 3, i)] = 0.02 * (2.0 * rng.uniform([k, 900 + i as u64, 3]) - 1.0);
        }
        fs = ekf::predict(&fs, &f, &(StateMatrix::identity() * 1e-6));
        let mut obs = random_obs(&rng, 5000 + k, 1 + (k % 3) as usize);
        if k % 7 == 0 {
            obs.r *= 1e-9;
        }
        if let Ok(next) = ekf::update(&fs, &obs) {
            fs = next;
        }
        min_eig = min_eig.min(fs.p.symmetric_eigenvalues().min());
        max_asym = max_asym.max((fs.p - fs.p.transpose()).norm());
    }

    let pass = max_joseph <= 1e-10 && max_batch <= 1e-8 && min_eig >= -1e-9 && max_asym <= 1e-9;
    report(
        3,
        pass,
        &format!(
            "Joseph vs canonical max {max_joseph:.2e} (limit 1e-10); batch vs sequential max \
             {max_batch:.2e} (limit 1e-8); 1e4 cycles min eigenvalue {min_eig:.2e} (limit -1e-9), \
             max asymmetry {max_asym:.2e}"
        ),
    );
}

// ------------------------------------------------------- C4 / C5 / C7

struct McRatios {
    sp_v1_stopped: f64,
    slsp_v1_stopped: f64,
    cp_v2_stopped: f64,
    slcp_v2_stopped: f64,
    sp_v1_post: f64,
    slsp_v1_post: f64,
    elapsed_s: f64,
}

fn shared_monte_carlo(runs: u64) -> McRatios {
    let config = presets::scenario1();
    let truths = generate_truth(&config).unwrap();
    let stop = truths
        .iter()
        .find(|t| t.vehicle == 1)
        .unwrap()
        .stop
        .unwrap();
    let (t0, t1) = (stop.t_stop, stop.t_depart);
    let green = 50.0;
    let methods = MethodId::ALL;

    let start = Instant::now();
    let results: Vec<[f64; 6]> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let out = run_prepared(&config, &truths, &methods, config.seed + r).unwrap();
            let g = |v: u32, m: MethodId, a: f64, b: f64| {
                rmse_from_rows(&out.traces[&(v, m)], a, b).unwrap()
            };
            [
                g(1, MethodId::Sp, t0, t1),
                g(1, MethodId::SlSp, t0, t1),
                g(2, MethodId::Cp, t0, t1),
                g(2, MethodId::SlCp, t0, t1),
                g(1, MethodId::Sp, green, green + 60.0),
                g(1, MethodId::SlSp, green, green + 60.0),
            ]
        })
        .collect();
    let elapsed_s = start.elapsed().as_secs_f64();
    let n = results.len() as f64;
    let mean = |i: usize| results.iter().map(|r| r[i]).sum::<f64>() / n;
    McRatios {
        sp_v1_stopped: mean(0),
        slsp_v1_stopped: mean(1),
        cp_v2_stopped: mean(2),
        slcp_v2_stopped: mean(3),
        sp_v1_post: mean(4),
        slsp_v1_post: mean(5),
        elapsed_s,
    }
}

#[test]
fn criterion_4_stopline_update_efficacy() {
    let m = shared_monte_carlo(50);
    let ratio = m.slsp_v1_stopped / m.sp_v1_stopped;
    let pass = m.slsp_v1_stopped <= 0.5 && ratio <= 0.2 && m.elapsed_s < 120.0;
    report(
        4,
        pass,
        &format!(
            "first-stopped SL-SP RMSE {:.3} m (limit 0.5) = {:.1}% of SP {:.3} m (limit 20%) over \
             50 runs, runtime {:.1} s (limit 120)",
            m.slsp_v1_stopped,
            100.0 * ratio,
            m.sp_v1_stopped,
            m.elapsed_s
        ),
    );
}

#[test]
fn criterion_5_cooperative_extension() {
    let m = shared_monte_carlo(50);
    let ratio = m.slcp_v2_stopped / m.cp_v2_stopped;
    let pass = ratio <= 0.7 && m.elapsed_s < 120.0;
    report(
        5,
        pass,
        &format!(
            "neighbor SL-CP RMSE {:.3} m = {:.1}% of CP {:.3} m (limit 70%) while the anchor \
             broadcasts, over 50 runs, runtime {:.1} s (limit 120)",
            m.slcp_v2_stopped,
            100.0 * ratio,
            m.cp_v2_stopped,
            m.elapsed_s
        ),
    );
}

#[test]
fn criterion_7_better_initialization() {
    let m = shared_monte_carlo(50);
    let ratio = m.slsp_v1_post / m.sp_v1_post;
    let pass = ratio <= 0.6 && m.elapsed_s < 120.0;
    report(
        7,
        pass,
        &format!(
            "departing ex-anchor SL-SP RMSE {:.3} m = {:.1}% of SP {:.3} m (limit 60%) for 60 s \
             after the green onset, over 50 runs, runtime {:.1} s (limit 120)",
            m.slsp_v1_post,
            100.0 * ratio,
            m.sp_v1_post,
            m.elapsed_s
        ),
    );
}

// ---------------------------------------------------------------- C6

#[test]
fn criterion_6_pre_stop_equivalence() {
    let config = presets::scenario1();
    let truths = generate_truth(&config).unwrap();
    let entries = config.map_entries().unwrap();

    // First instant any vehicle takes the first-stopped role, from the
    // same truth-driven rule the runner uses.
    let mut t_first_role = f64::INFINITY;
    for truth in &truths {
        let Some(entry_idx) = truth.entry else {
            continue;
        };
        for i in 0..truth.len() {
            let tick = truth.ticks_us[i];
            let occ: Vec<Vector2<f64>> = truths
                .iter()
                .filter(|o| o.vehicle != truth.vehicle && o.entry == truth.entry)
                .map(|o| o.pos_ned_at(tick))
                .collect();
            if detect_first_stopped(
                truth.speed[i],
                &truth.pos_ned[i],
                &entries[entry_idx],
                &occ,
                config.detection.v_stop_mps,
                config.detection.d_gate_m,
            ) {
                t_first_role = t_first_role.min(tick as f64 / 1e6);
                break;
            }
        }
    }
    assert!(t_first_role.is_finite());

    let out =
        cin_core::sim::run_scenario_methods(&config, &[MethodId::Cp, MethodId::SlCp]).unwrap();
    let mut compared = 0u64;
    let mut identical = true;
    for &v in &out.vehicle_ids {
        let cp = &out.traces[&(v, MethodId::Cp)];
        let slcp = &out.traces[&(v, MethodId::SlCp)];
        for (a, b) in cp.iter().zip(slcp.iter()) {
            if a.t >= t_first_role {
                break;
            }
            identical &= a.est_n.to_bits() == b.est_n.to_bits()
                && a.est_e.to_bits() == b.est_e.to_bits()
                && a.truth_n.to_bits() == b.truth_n.to_bits()
                && a.err_norm.to_bits() == b.err_norm.to_bits();
            compared += 1;
        }
    }
    let pass = identical && compared > 100;
    report(
        6,
        pass,
        &format!(
            "SL-CP and CP traces bit-identical on {compared} rows before the first vehicle stops \
             (t < {t_first_role:.2} s)"
        ),
    );
}

// ---------------------------------------------------------------- C8

#[test]
fn criterion_8_filter_consistency() {
    // White-noise-only configuration: NEES consistency is meaningful
    // only under the filter's modeled noise; the Gauss-Markov bias of
    // the other criteria is deliberately unmodeled degradation.
    let mut config = presets::scenario1();
    config.noise.gnss_bias_sigma_m = 0.0;
    let runs = 200usize;
    let methods = [MethodId::Sp, MethodId::SlCp];
    let truths = generate_truth(&config).unwrap();

    let series: Vec<_> = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let out = run_prepared(&config, &truths, &methods, config.seed + r).unwrap();
            let mut per_key = std::collections::BTreeMap::new();
            for (key, rows) in &out.traces {
                per_key.insert(*key, rows.iter().map(|row| row.nees).collect::<Vec<_>>());
            }
            per_key
        })
        .collect();

    let (lo, hi) = nees_chi_square_bounds(runs, 2, 0.95);
    let fraction_within = |v: u32, m: MethodId| -> f64 {
        let n_steps = series[0][&(v, m)].len();
        let mut within = 0usize;
        for k in 0..n_steps {
            let avg: f64 = series.iter().map(|s| s[&(v, m)][k]).sum::<f64>() / runs as f64;
            if avg >= lo && avg <= hi {
                within += 1;
            }
        }
        within as f64 / n_steps as f64
    };

    let mut pass = true;
    let mut detail = format!("bounds [{lo:.3}, {hi:.3}] over {runs} runs;");
    for v in [0u32, 1, 2] {
        let frac = fraction_within(v, MethodId::Sp);
        pass &= frac >= 0.90;
        detail.push_str(&format!(" SP v{v}: {:.1}% of steps within;", 100.0 * frac));
    }
    // Documented exception: SL-CP inherits the r_j cross-correlation
    // approximation; report, don't fail.
    for v in [0u32, 1, 2] {
        let frac = fraction_within(v, MethodId::SlCp);
        detail.push_str(&format!(
            " SL-CP v{v}: {:.1}% (reported only);",
            100.0 * frac
        ));
    }
    report(8, pass, &detail);
}

// ---------------------------------------------------------------- C9

#[test]
fn criterion_9_determinism() {
    let config = presets::scenario1();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let out = run_scenario(&config).unwrap();
        write_traces_csv(dir.path(), &out).unwrap();
        write_metrics_json(
            &dir.path().join("metrics.json"),
            &compute_run_metrics(&out, config.seed),
        )
        .unwrap();
    }
    let mut files: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    assert!(files.len() >= 13, "expected 12 traces + metrics");
    let mut identical = true;
    for name in &files {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        identical &= a == b;
    }
    report(
        9,
        identical,
        &format!(
            "{} output files byte-identical across two runs with the same seed",
            files.len()
        ),
    );
}
