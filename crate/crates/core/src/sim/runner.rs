//! The deterministic multi-vehicle event loop.
//!
//! All method variants (SP, SL-SP, CP, SL-CP) consume the same
//! synthesized sensor streams; each runs one filter instance per
//! vehicle. Events dispatch in timestamp order with the tie-break
//! IMU < GNSS < beacon < range, then vehicle id; updates fire at the
//! end of any tick that delivered a GNSS fix or a beacon, assembling
//! the case-appropriate stacked observation. Beacons are emitted from
//! the sender's post-predict (pre-update) state, which keeps
//! within-tick processing order-independent across vehicles.
//!
//! The first-stopped role is derived from truth kinematics (speed,
//! queue occupancy, distance gate), emulating a system in which the
//! role is known; estimation errors therefore never corrupt role
//! assignment.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, UnitQuaternion, Vector2};

use crate::ekf::{self, FilterState, ObsMatrix, Observation, ObservationKind, StateMatrix};
use crate::geodesy::{ned_of, position_scaling, GeodeticPosition};
use crate::ins::{
    apply_feedback, build_transition, mechanize, process_noise, ErrorState15, ImuBiases,
    NavSolution, BA, BG, POS, VEL,
};
use crate::sim::config::{ConfigError, ScenarioConfig};
use crate::sim::sensors::{comm_link_up, synthesize_sensors, GnssFix, SensorPayload};
use crate::sim::truth::{generate_truth, TruthTrajectory, TICKS_PER_SECOND};
use crate::stopline::{build_stopline_observation, detect_first_stopped, StopLineMapEntry};
use crate::v2v::{
    assemble_update, decode_beacon, emit_beacon, encode_beacon, range_observation, select_case,
    NeighborTable, UpdateCase, VehicleId, DEFAULT_D_MIN,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// The four compared positioning methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodId {
    Sp,
    SlSp,
    Cp,
    SlCp,
}

impl MethodId {
    pub const ALL: [MethodId; 4] = [MethodId::Sp, MethodId::SlSp, MethodId::Cp, MethodId::SlCp];

    pub fn use_stopline(&self) -> bool {
        matches!(self, MethodId::SlSp | MethodId::SlCp)
    }

    pub fn use_v2v(&self) -> bool {
        matches!(self, MethodId::Cp | MethodId::SlCp)
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MethodId::Sp => "sp",
            MethodId::SlSp => "sl-sp",
            MethodId::Cp => "cp",
            MethodId::SlCp => "sl-cp",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MethodId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sp" => Ok(MethodId::Sp),
            "sl-sp" | "slsp" | "sl_sp" => Ok(MethodId::SlSp),
            "cp" => Ok(MethodId::Cp),
            "sl-cp" | "slcp" | "sl_cp" => Ok(MethodId::SlCp),
            other => Err(format!(
                "unknown method `{other}` (expected sp, sl-sp, cp, sl-cp)"
            )),
        }
    }
}

/// Which observation equation fed the update at a trace row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseTag {
    /// No update at this tick (prediction only).
    None,
    Case1Sp,
    Case1SpSl,
    Case2,
    Case3Sp,
    Case3SpSl,
    /// Update attempted but rejected (singular innovation covariance).
    Rejected,
}

impl std::fmt::Display for CaseTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CaseTag::None => "none",
            CaseTag::Case1Sp => "case1_sp",
            CaseTag::Case1SpSl => "case1_sp_sl",
            CaseTag::Case2 => "case2",
            CaseTag::Case3Sp => "case3_sp",
            CaseTag::Case3SpSl => "case3_sp_sl",
            CaseTag::Rejected => "rejected",
        };
        f.write_str(s)
    }
}

/// One estimate sample, aligned with the truth at the same instant.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub t: f64,
    pub truth_n: f64,
    pub truth_e: f64,
    pub est_n: f64,
    pub est_e: f64,
    pub err_norm: f64,
    pub case_tag: CaseTag,
    /// Horizontal normalized estimation error squared (NaN when the
    /// position covariance is singular).
    pub nees: f64,
}

/// A half-open interval of the run, labeled by the truth event that
/// starts it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Phase {
    pub name: String,
    pub t0: f64,
    pub t1: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TruthEvent {
    pub vehicle: VehicleId,
    pub t_stop: f64,
    pub t_depart: f64,
    pub queue_index: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub methods: Vec<MethodId>,
    pub vehicle_ids: Vec<VehicleId>,
    pub phases: Vec<Phase>,
    pub traces: BTreeMap<(VehicleId, MethodId), Vec<TraceRow>>,
    pub truth_events: Vec<TruthEvent>,
    /// Rejected-update diagnostics per (vehicle, method).
    pub rejected: BTreeMap<(VehicleId, MethodId), u64>,
    /// V2V rows dropped by gating or degenerate geometry.
    pub dropped_v2v: BTreeMap<(VehicleId, MethodId), u64>,
}

struct Agent {
    nav: NavSolution,
    fs: FilterState,
    biases: ImuBiases,
    table: NeighborTable,
    last_tick_us: u64,
    pending_gnss: Option<GnssFix>,
    rejected: u64,
    dropped_v2v: u64,
}

/// GNSS self-positioning observation (velocity and position rows).
///
/// Position innovations are expressed in NED meters through the same
/// geodetic scale factors the stop-line and V2V rows use, which keeps
/// the innovation covariance well-conditioned against the meter-scale
/// velocity rows.
fn gnss_observation(
    nav: &NavSolution,
    fix: &GnssFix,
    origin: &GeodeticPosition,
    config: &ScenarioConfig,
) -> Observation {
    let (sn, se) = position_scaling(origin);
    let mut z = nalgebra::DVector::zeros(6);
    let dv = nav.velocity - fix.velocity;
    z[0] = dv.x;
    z[1] = dv.y;
    z[2] = dv.z;
    z[3] = sn * (nav.position.latitude - fix.position.latitude);
    z[4] = se * (nav.position.longitude - fix.position.longitude);
    z[5] = nav.position.height - fix.position.height;

    let mut h = ObsMatrix::zeros(6);
    for i in 0..3 {
        h[(i, VEL + i)] = 1.0;
    }
    h[(3, POS)] = sn;
    h[(4, POS + 1)] = se;
    h[(5, POS + 2)] = 1.0;

    let n = &config.noise;
    // The Gauss-Markov bias is unmodeled time correlation; its
    // marginal variance is folded into R.
    let pos_var = n.gnss_pos_sigma_m.powi(2) + n.gnss_bias_sigma_m.powi(2);
    let vel_var = n.gnss_vel_sigma_mps.powi(2);
    let mut r = nalgebra::DMatrix::zeros(6, 6);
    for i in 0..3 {
        r[(i, i)] = vel_var;
    }
    r[(3, 3)] = pos_var;
    r[(4, 4)] = pos_var;
    r[(5, 5)] = n.gnss_pos_sigma_m.powi(2);
    Observation::new(z, h, r, ObservationKind::Sp).expect("dimensions fixed")
}

fn initial_covariance(config: &ScenarioConfig, origin: &GeodeticPosition) -> StateMatrix {
    let n = &config.noise;
    let (sn, se) = position_scaling(origin);
    let mut p = StateMatrix::zeros();
    for i in 0..3 {
        p[(i, i)] = n.init_att_sigma_rad.powi(2);
        p[(VEL + i, VEL + i)] = n.init_vel_sigma_mps.powi(2);
        p[(BG + i, BG + i)] = n.gyro_bias_sigma.powi(2);
        p[(BA + i, BA + i)] = n.accel_bias_sigma.powi(2);
    }
    p[(POS, POS)] = (n.init_pos_sigma_m / sn).powi(2);
    p[(POS + 1, POS + 1)] = (n.init_pos_sigma_m / se).powi(2);
    p[(POS + 2, POS + 2)] = n.init_pos_sigma_m.powi(2);
    p
}

/// Horizontal position covariance in NED meters from the filter state.
fn horizontal_cov_ned(fs: &FilterState, origin: &GeodeticPosition) -> Matrix2<f64> {
    let (sn, se) = position_scaling(origin);
    Matrix2::new(
        fs.p[(POS, POS)] * sn * sn,
        fs.p[(POS, POS + 1)] * sn * se,
        fs.p[(POS + 1, POS)] * sn * se,
        fs.p[(POS + 1, POS + 1)] * se * se,
    )
}

/// Run every method on the scenario.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunOutput, SimError> {
    run_scenario_methods(config, &MethodId::ALL)
}

/// Run the selected methods on the scenario.
pub fn run_scenario_methods(
    config: &ScenarioConfig,
    methods: &[MethodId],
) -> Result<RunOutput, SimError> {
    config.validate()?;
    let truths = generate_truth(config)?;
    run_prepared(config, &truths, methods, config.seed)
}

/// Run with precomputed truth (Monte Carlo batches reuse it across
/// seeds, since truth is seed-independent).
pub fn run_prepared(
    config: &ScenarioConfig,
    truths: &[TruthTrajectory],
    methods: &[MethodId],
    seed: u64,
) -> Result<RunOutput, SimError> {
    let origin = config.origin_position()?;
    let entries = config.map_entries()?;
    let streams = synthesize_sensors(truths, config, seed);

    // Vehicle index in id order (truth order already follows config;
    // enforce an id-sorted view for deterministic processing).
    let mut order: Vec<usize> = (0..truths.len()).collect();
    order.sort_by_key(|&i| truths[i].vehicle);
    let vehicle_ids: Vec<VehicleId> = order.iter().map(|&i| truths[i].vehicle).collect();
    let idx_of_id: BTreeMap<VehicleId, usize> = vehicle_ids
        .iter()
        .enumerate()
        .map(|(k, &id)| (id, k))
        .collect();
    let truth_of: Vec<&TruthTrajectory> = order.iter().map(|&i| &truths[i]).collect();

    let mut agents: Vec<Vec<Agent>> = methods
        .iter()
        .map(|_| {
            truth_of
                .iter()
                .map(|truth| {
                    let init = streams
                        .init_errors
                        .iter()
                        .find(|e| e.vehicle == truth.vehicle)
                        .expect("init error per vehicle");
                    let (sn, se) = position_scaling(&origin);
                    let nav = NavSolution {
                        attitude: UnitQuaternion::from_scaled_axis(-init.attitude)
                            * truth.attitude[0],
                        velocity: truth.vel_ned[0] + init.velocity,
                        position: GeodeticPosition {
                            latitude: truth.pos_geo[0].latitude + init.position_ned.x / sn,
                            longitude: truth.pos_geo[0].longitude + init.position_ned.y / se,
                            height: truth.pos_geo[0].height + init.position_ned.z,
                        },
                        timestamp: 0.0,
                    };
                    Agent {
                        nav,
                        fs: FilterState::new(
                            ErrorState15::zeros(),
                            initial_covariance(config, &origin),
                            0.0,
                        ),
                        biases: ImuBiases::default(),
                        table: NeighborTable::new(),
                        last_tick_us: 0,
                        pending_gnss: None,
                        rejected: 0,
                        dropped_v2v: 0,
                    }
                })
                .collect()
        })
        .collect();

    let gyro_psd = config.noise.gyro_arw.powi(2);
    let accel_psd = config.noise.accel_vrw.powi(2);
    let staleness = config.detection.staleness_s;

    let first_stopped_at = |tick: u64, vidx: usize| -> bool {
        let truth = truth_of[vidx];
        let Some(entry_idx) = truth.entry else {
            return false;
        };
        let entry: &StopLineMapEntry = &entries[entry_idx];
        let i = nearest_index(truth, tick);
        let occupancy: Vec<Vector2<f64>> = truth_of
            .iter()
            .enumerate()
            .filter(|(w, other)| *w != vidx && other.entry == truth.entry)
            .map(|(_, other)| other.pos_ned_at(tick))
            .collect();
        detect_first_stopped(
            truth.speed[i],
            &truth.pos_ned[i],
            entry,
            &occupancy,
            config.detection.v_stop_mps,
            config.detection.d_gate_m,
        )
    };

    let mut traces: BTreeMap<(VehicleId, MethodId), Vec<TraceRow>> = BTreeMap::new();
    for &m in methods {
        for &id in &vehicle_ids {
            traces.insert((id, m), Vec::new());
        }
    }

    let events = &streams.events;
    let mut i = 0usize;
    while i < events.len() {
        let tick = events[i].tick_us;
        let mut j = i;
        let mut has_gnss_or_beacon = false;
        let mut has_range = false;
        while j < events.len() && events[j].tick_us == tick {
            match events[j].payload {
                SensorPayload::Gnss { .. } | SensorPayload::BeaconSlot { .. } => {
                    has_gnss_or_beacon = true
                }
                SensorPayload::Range { .. } => has_range = true,
                SensorPayload::Imu { .. } => {}
            }
            j += 1;
        }
        let now = tick as f64 / TICKS_PER_SECOND as f64;

        for e in &events[i..j] {
            match &e.payload {
                SensorPayload::Imu { vehicle, sample } => {
                    let vidx = idx_of_id[vehicle];
                    for agents_m in agents.iter_mut() {
                        let agent = &mut agents_m[vidx];
                        let dt = (tick - agent.last_tick_us) as f64 / TICKS_PER_SECOND as f64;
                        let corrected = sample.corrected(&agent.biases);
                        let f = build_transition(&agent.nav, &corrected, dt);
                        match mechanize(&agent.nav, &corrected, dt) {
                            Ok(nav) => agent.nav = nav,
                            Err(err) => {
                                log::warn!("vehicle {vehicle} mechanization error: {err}");
                                continue;
                            }
                        }
                        let q = process_noise(gyro_psd, accel_psd, dt);
                        agent.fs = ekf::predict(&agent.fs, &f, &q);
                        agent.fs.timestamp = agent.nav.timestamp;
                        agent.last_tick_us = tick;
                    }
                }
                SensorPayload::Gnss { vehicle, fix } => {
                    let vidx = idx_of_id[vehicle];
                    for agents_m in agents.iter_mut() {
                        agents_m[vidx].pending_gnss = Some(*fix);
                    }
                }
                SensorPayload::BeaconSlot { vehicle } => {
                    let vidx = idx_of_id[vehicle];
                    let role = first_stopped_at(tick, vidx);
                    for (mi, &m) in methods.iter().enumerate() {
                        if !m.use_v2v() {
                            continue;
                        }
                        let packet = {
                            let sender = &agents[mi][vidx];
                            emit_beacon(&sender.fs, &sender.nav, &origin, role, *vehicle)
                        };
                        let wire = encode_beacon(&packet);
                        for (ridx, rid) in vehicle_ids.iter().enumerate() {
                            if ridx == vidx {
                                continue;
                            }
                            let dist = (truth_of[ridx].pos_ned_at(tick)
                                - truth_of[vidx].pos_ned_at(tick))
                            .norm();
                            if dist > config.comm_range_m
                                || !comm_link_up(config, *vehicle, *rid, now)
                            {
                                continue;
                            }
                            let decoded = decode_beacon(&wire).expect("own wire format");
                            agents[mi][ridx].table.insert_beacon(decoded);
                        }
                    }
                }
                SensorPayload::Range { a, b, meas } => {
                    let (ai, bi) = (idx_of_id[a], idx_of_id[b]);
                    for (mi, m) in methods.iter().enumerate() {
                        if !m.use_v2v() {
                            continue;
                        }
                        agents[mi][ai].table.insert_range(*b, *meas);
                        agents[mi][bi].table.insert_range(*a, *meas);
                    }
                }
            }
        }

        // Tick-end updates: triggered by GNSS or beacon receptions
        // (optionally by ranges when fusing at full rate).
        let update_tick = has_gnss_or_beacon || (config.fuse_all_ranges && has_range);
        if update_tick {
            for vidx in 0..vehicle_ids.len() {
                let role = first_stopped_at(tick, vidx);
                for (mi, &m) in methods.iter().enumerate() {
                    let agent = &mut agents[mi][vidx];
                    let tag = step_update(
                        agent,
                        config,
                        &origin,
                        &entries,
                        truth_of[vidx],
                        m,
                        role,
                        now,
                        staleness,
                    );
                    if has_gnss_or_beacon {
                        let truth_p = truth_of[vidx].pos_ned_at(tick);
                        let est = ned_of(&agent.nav.position, &origin);
                        let e = Vector2::new(est.north - truth_p.x, est.east - truth_p.y);
                        let p2 = horizontal_cov_ned(&agent.fs, &origin);
                        let nees = p2
                            .try_inverse()
                            .map(|inv| (e.transpose() * inv * e)[(0, 0)])
                            .unwrap_or(f64::NAN);
                        traces
                            .get_mut(&(vehicle_ids[vidx], m))
                            .expect("trace initialized")
                            .push(TraceRow {
                                t: now,
                                truth_n: truth_p.x,
                                truth_e: truth_p.y,
                                est_n: est.north,
                                est_e: est.east,
                                err_norm: e.norm(),
                                case_tag: tag,
                                nees,
                            });
                    }
                }
            }
        }

        i = j;
    }

    let truth_events: Vec<TruthEvent> = truth_of
        .iter()
        .filter_map(|t| {
            t.stop.map(|s| TruthEvent {
                vehicle: t.vehicle,
                t_stop: s.t_stop,
                t_depart: s.t_depart,
                queue_index: s.queue_index,
            })
        })
        .collect();
    let phases = derive_phases(&truth_events, config.duration_s);

    let mut rejected = BTreeMap::new();
    let mut dropped = BTreeMap::new();
    for (mi, &m) in methods.iter().enumerate() {
        for (vidx, &id) in vehicle_ids.iter().enumerate() {
            rejected.insert((id, m), agents[mi][vidx].rejected);
            dropped.insert((id, m), agents[mi][vidx].dropped_v2v);
        }
    }

    Ok(RunOutput {
        methods: methods.to_vec(),
        vehicle_ids,
        phases,
        traces,
        truth_events,
        rejected,
        dropped_v2v: dropped,
    })
}

fn nearest_index(truth: &TruthTrajectory, tick: u64) -> usize {
    match truth.ticks_us.binary_search(&tick) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i >= truth.len() => truth.len() - 1,
        Err(i) => {
            if tick - truth.ticks_us[i - 1] <= truth.ticks_us[i] - tick {
                i - 1
            } else {
                i
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn step_update(
    agent: &mut Agent,
    config: &ScenarioConfig,
    origin: &GeodeticPosition,
    entries: &[StopLineMapEntry],
    truth: &TruthTrajectory,
    method: MethodId,
    first_stopped: bool,
    now: f64,
    staleness: f64,
) -> CaseTag {
    let fix = agent.pending_gnss.take();
    let has_gnss = fix.is_some();

    // Neighbor range rows, gated.
    let mut neighbor_obs = Vec::new();
    if method.use_v2v() {
        agent.table.evict_stale(now, staleness);
        for (beacon, range) in agent.table.ready(now, staleness) {
            match range_observation(
                &agent.nav,
                origin,
                &beacon,
                &range,
                DEFAULT_D_MIN,
                staleness,
            ) {
                Ok(obs) => {
                    if config.v2v_gate_alpha > 0.0 {
                        let innovation = &obs.z - &obs.h * agent.fs.x.0;
                        let s = &obs.h * agent.fs.p * obs.h.transpose() + &obs.r;
                        if !ekf::gate(&innovation, &s, config.v2v_gate_alpha) {
                            agent.dropped_v2v += 1;
                            continue;
                        }
                    }
                    neighbor_obs.push(obs);
                }
                Err(err) => {
                    log::debug!("range row dropped: {err}");
                    agent.dropped_v2v += 1;
                }
            }
        }
    }

    // Self rows: sp, upgraded to sp_sl for the first-stopped vehicle.
    let mut self_is_sl = false;
    let self_obs: Option<Observation> = fix.map(|fix| {
        let sp = gnss_observation(&agent.nav, &fix, origin, config);
        if method.use_stopline() && first_stopped {
            if let Some(entry_idx) = truth.entry {
                let entry = &entries[entry_idx];
                match build_stopline_observation(&agent.nav, entry, &entry.priors, origin) {
                    Ok(sl) => {
                        let mut stacked = ekf::stack(&[sl, sp]).expect("two fixed-size parts");
                        stacked.kind = ObservationKind::SpSl;
                        self_is_sl = true;
                        return stacked;
                    }
                    Err(err) => log::warn!("stop-line observation failed: {err}"),
                }
            }
        }
        sp
    });

    let Some(case) = select_case(has_gnss, neighbor_obs.len()) else {
        return CaseTag::None;
    };
    let obs = match assemble_update(case, self_obs, neighbor_obs) {
        Ok(obs) => obs,
        Err(_) => return CaseTag::None,
    };

    match ekf::update(&agent.fs, &obs) {
        Ok(next) => {
            agent.fs = next;
            let (nav, fb) = apply_feedback(&agent.nav, &agent.fs.x);
            agent.nav = nav;
            agent.biases.gyro += fb.gyro;
            agent.biases.accel += fb.accel;
            agent.fs.x = ErrorState15::zeros();
            match (case, self_is_sl) {
                (UpdateCase::Case1, false) => CaseTag::Case1Sp,
                (UpdateCase::Case1, true) => CaseTag::Case1SpSl,
                (UpdateCase::Case2, _) => CaseTag::Case2,
                (UpdateCase::Case3, false) => CaseTag::Case3Sp,
                (UpdateCase::Case3, true) => CaseTag::Case3SpSl,
            }
        }
        Err(err) => {
            log::debug!("update rejected: {err}");
            agent.rejected += 1;
            CaseTag::Rejected
        }
    }
}

/// Phase boundaries from truth events: run start, each stop, each
/// departure, run end. Boundaries closer than 0.2 s merge.
fn derive_phases(events: &[TruthEvent], duration: f64) -> Vec<Phase> {
    let mut bounds: Vec<(f64, String)> = vec![(0.0, "start".to_string())];
    for e in events {
        bounds.push((e.t_stop, format!("stop_v{}", e.vehicle)));
        bounds.push((e.t_depart, format!("depart_v{}", e.vehicle)));
    }
    bounds.retain(|(t, _)| *t < duration);
    bounds.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite times"));
    let mut merged: Vec<(f64, String)> = Vec::new();
    for (t, name) in bounds {
        match merged.last() {
            Some((prev, _)) if t - prev < 0.2 => {}
            _ => merged.push((t, name)),
        }
    }
    let mut phases = Vec::new();
    for k in 0..merged.len() {
        let t1 = if k + 1 < merged.len() {
            merged[k + 1].0
        } else {
            duration
        };
        phases.push(Phase {
            name: merged[k].1.clone(),
            t0: merged[k].0,
            t1,
        });
    }
    phases
}
