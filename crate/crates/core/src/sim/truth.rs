//! Ground-truth choreography: traffic light, per-vehicle speed plans,
//! and kinematically consistent trajectories on the IMU grid.
//!
//! Trajectories are built so that the discrete sequences are exactly
//! self-consistent: positions are the trapezoid integral of the
//! sampled velocities, and the braking segment is displacement-
//! corrected so a stopping vehicle halts with its head exactly at the
//! prior-mean distance before the stop line (queue followers exactly a
//! queue gap behind their predecessor). Sensor synthesis then inverts
//! the mechanization step between consecutive truth states, so a
//! noise-free INS reproduces the truth to rounding error.

use nalgebra::{UnitQuaternion, Vector2, Vector3};

use crate::geodesy::{geodetic_of, GeodeticPosition, NedVector};
use crate::sim::config::{ConfigError, LightPhase, ScenarioConfig};
use crate::stopline::StopLineMapEntry;
use crate::v2v::VehicleId;

/// Microseconds per second; all schedules live on an integer tick grid.
pub const TICKS_PER_SECOND: u64 = 1_000_000;

/// Tick of the k-th event of a stream at `hz`, with an offset in
/// seconds. Computed directly from k, so schedules never drift.
pub fn event_tick(k: u64, hz: u32, offset_s: f64) -> u64 {
    let base = (k * TICKS_PER_SECOND) / hz as u64;
    base + (offset_s * TICKS_PER_SECOND as f64).round() as u64
}

/// Traffic-light phase with time already spent in it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficLightState {
    pub phase: LightPhase,
    pub time_in_phase: f64,
}

/// Two-group cyclic signal; group 1 always shows the opposite of
/// group 0.
#[derive(Debug, Clone, Copy)]
pub struct TrafficLight {
    red_s: f64,
    green_s: f64,
    initial: LightPhase,
    offset_s: f64,
}

impl TrafficLight {
    pub fn new(config: &ScenarioConfig) -> Self {
        Self {
            red_s: config.light.red_s,
            green_s: config.light.green_s,
            initial: config.light.initial,
            offset_s: config.light.offset_s,
        }
    }

    fn cycle(&self) -> f64 {
        self.red_s + self.green_s
    }

    /// Group-0 phase clock: position within the cycle, with the cycle
    /// starting at a red onset.
    fn clock(&self, t: f64) -> f64 {
        let into_initial = self.offset_s;
        let base = match self.initial {
            LightPhase::Red => into_initial,
            LightPhase::Green => self.red_s + into_initial,
        };
        (t + base).rem_euclid(self.cycle())
    }

    pub fn state(&self, group: u8, t: f64) -> TrafficLightState {
        let c = self.clock(t);
        let (phase0, time0) = if c < self.red_s {
            (LightPhase::Red, c)
        } else {
            (LightPhase::Green, c - self.red_s)
        };
        match group {
            0 => TrafficLightState {
                phase: phase0,
                time_in_phase: time0,
            },
            _ => TrafficLightState {
                phase: match phase0 {
                    LightPhase::Red => LightPhase::Green,
                    LightPhase::Green => LightPhase::Red,
                },
                time_in_phase: time0,
            },
        }
    }

    /// First green onset for `group` at or after `t`.
    pub fn next_green_onset(&self, group: u8, t: f64) -> f64 {
        if self.state(group, t).phase == LightPhase::Green {
            return t - self.state(group, t).time_in_phase;
        }
        let mut s = t;
        let step = 1e-3;
        // The phase function is piecewise constant with period cycle();
        // walk to the boundary analytically via the group-0 clock.
        let c = self.clock(s);
        let remaining = match group {
            0 => self.red_s - c,
            _ => {
                // Group 1 is red while group 0 is green.
                self.cycle() - c
            }
        };
        s += remaining.max(step * 0.0);
        s
    }
}

/// Truth events for one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopEvent {
    /// Grid time at which the vehicle is fully stopped.
    pub t_stop: f64,
    /// Grid time at which it starts moving again.
    pub t_depart: f64,
    /// Zero-based position in the queue behind the stop line.
    pub queue_index: usize,
    /// Braking onset time.
    pub t_brake: f64,
}

/// Ground truth for one vehicle on the IMU grid.
#[derive(Debug, Clone)]
pub struct TruthTrajectory {
    pub vehicle: VehicleId,
    pub ticks_us: Vec<u64>,
    pub pos_geo: Vec<GeodeticPosition>,
    pub pos_ned: Vec<Vector2<f64>>,
    pub vel_ned: Vec<Vector3<f64>>,
    pub attitude: Vec<UnitQuaternion<f64>>,
    /// Forward-difference acceleration, NED.
    pub accel_ned: Vec<Vector3<f64>>,
    /// Longitudinal speed profile, m/s.
    pub speed: Vec<f64>,
    pub stop: Option<StopEvent>,
    /// Map entry index governing this vehicle, if any.
    pub entry: Option<usize>,
}

impl TruthTrajectory {
    pub fn len(&self) -> usize {
        self.ticks_us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ticks_us.is_empty()
    }

    /// Grid index of an on-grid tick.
    pub fn index_of_tick(&self, tick_us: u64) -> Option<usize> {
        self.ticks_us.binary_search(&tick_us).ok()
    }

    /// Horizontal position at an arbitrary tick, linearly interpolated.
    pub fn pos_ned_at(&self, tick_us: u64) -> Vector2<f64> {
        match self.ticks_us.binary_search(&tick_us) {
            Ok(i) => self.pos_ned[i],
            Err(0) => self.pos_ned[0],
            Err(i) if i >= self.len() => *self.pos_ned.last().expect("non-empty"),
            Err(i) => {
                let (t0, t1) = (self.ticks_us[i - 1], self.ticks_us[i]);
                let w = (tick_us - t0) as f64 / (t1 - t0) as f64;
                self.pos_ned[i - 1] * (1.0 - w) + self.pos_ned[i] * w
            }
        }
    }

    pub fn speed_at_index(&self, i: usize) -> f64 {
        self.speed[i]
    }
}

struct SpeedPlan {
    /// Per-grid-point longitudinal speed.
    v: Vec<f64>,
    stop: Option<StopEvent>,
}

/// Where (arc length) a vehicle's path crosses a line, if ahead of it.
fn line_crossing_distance(
    start: &Vector2<f64>,
    dir: &Vector2<f64>,
    entry: &StopLineMapEntry,
) -> Option<f64> {
    let denom = entry.stop_line.a * dir.x + entry.stop_line.b * dir.y;
    if denom.abs() < 1e-9 {
        return None;
    }
    let s = -entry.stop_line.signed_eval(start) / denom;
    (s > 0.0).then_some(s)
}

/// Generate per-vehicle ground truth for the configured scenario.
pub fn generate_truth(config: &ScenarioConfig) -> Result<Vec<TruthTrajectory>, ConfigError> {
    let origin = config.origin_position()?;
    let entries = config.map_entries()?;
    let light = TrafficLight::new(config);
    let imu_hz = config.rates.imu_hz;
    let n_steps = (config.duration_s * imu_hz as f64).floor() as u64;
    let ticks: Vec<u64> = (0..=n_steps).map(|k| event_tick(k, imu_hz, 0.0)).collect();

    struct Approach {
        vehicle_idx: usize,
        t_arrival: f64,
        green_onset: f64,
        cross_s: f64,
    }

    // Which vehicles stop, grouped by (entry, green onset they await).
    let mut stoppers: Vec<Approach> = Vec::new();
    let mut cross_distance: Vec<Option<f64>> = vec![None; config.vehicles.len()];
    for (vi, v) in config.vehicles.iter().enumerate() {
        let Some(entry_idx) = v.entry else { continue };
        let entry = &entries[entry_idx];
        let heading = v.heading_deg.to_radians();
        let dir = Vector2::new(heading.cos(), heading.sin());
        let start = Vector2::new(v.start_ned[0], v.start_ned[1]);
        let Some(cross_s) = line_crossing_distance(&start, &dir, entry) else {
            continue;
        };
        cross_distance[vi] = Some(cross_s);
        let t_arrival = cross_s / v.cruise_mps;
        if t_arrival > config.duration_s {
            continue;
        }
        if light.state(v.road_group, t_arrival).phase == LightPhase::Red {
            stoppers.push(Approach {
                vehicle_idx: vi,
                t_arrival,
                green_onset: light.next_green_onset(v.road_group, t_arrival),
                cross_s,
            });
        }
    }

    // Queue indices: per (entry, green onset) group, by arrival order.
    stoppers.sort_by(|a, b| {
        a.t_arrival
            .partial_cmp(&b.t_arrival)
            .expect("finite arrival times")
    });
    let mut queue_assignment: Vec<(usize, usize, f64, f64)> = Vec::new(); // (vehicle_idx, queue_index, stop_target_s, green_onset)
    {
        use std::collections::BTreeMap;
        let mut queues: BTreeMap<(usize, u64), Vec<usize>> = BTreeMap::new();
        for (si, s) in stoppers.iter().enumerate() {
            let v = &config.vehicles[stoppers[si].vehicle_idx];
            let key = (
                v.entry.expect("stoppers have entries"),
                s.green_onset.to_bits(),
            );
            queues.entry(key).or_default().push(si);
        }
        for ((entry_idx, _), group) in queues {
            let priors = &entries[entry_idx].priors;
            let mut offset = priors.m_xb + priors.l0;
            for (qi, &si) in group.iter().enumerate() {
                let s = &stoppers[si];
                let v = &config.vehicles[s.vehicle_idx];
                let target = s.cross_s - offset;
                queue_assignment.push((s.vehicle_idx, qi, target, s.green_onset));
                offset += v.length_m + config.driving.queue_gap_m;
            }
        }
    }

    // Build speed plans.
    let dt_of = |i: usize| (ticks[i + 1] - ticks[i]) as f64 / TICKS_PER_SECOND as f64;
    let mut plans: Vec<SpeedPlan> = Vec::with_capacity(config.vehicles.len());
    for (vi, v) in config.vehicles.iter().enumerate() {
        let assignment = queue_assignment.iter().find(|(idx, ..)| *idx == vi);
        let plan = match assignment {
            None => SpeedPlan {
                v: vec![v.cruise_mps; ticks.len()],
                stop: None,
            },
            Some(&(_, queue_index, target_s, green_onset)) => {
                let vc = v.cruise_mps;
                let d = &config.driving;
                if target_s <= 0.0 {
                    return Err(ConfigError::invalid(
                        format!("vehicles[{vi}]"),
                        "stop target behind the start position",
                    ));
                }
                let required = vc * vc / (2.0 * target_s);
                if required > d.max_decel {
                    return Err(ConfigError::invalid(
                        format!("vehicles[{vi}]"),
                        format!(
                            "cannot stop before the line: requires {required:.2} m/s^2 > max_decel {:.2}",
                            d.max_decel
                        ),
                    ));
                }
                let decel = required.max(d.comfort_decel);
                let brake_dist = vc * vc / (2.0 * decel);
                let t_brake = (target_s - brake_dist) / vc;
                let t_stop = t_brake + vc / decel;
                let t_depart_raw =
                    green_onset + d.reaction_s + d.depart_headway_s * queue_index as f64;
                // Snap the departure to the grid, never before the stop.
                let dt_nominal = 1.0 / imu_hz as f64;
                let t_depart = (t_depart_raw / dt_nominal).ceil() * dt_nominal;
                if t_depart <= t_stop {
                    return Err(ConfigError::invalid(
                        format!("vehicles[{vi}]"),
                        "light turns green before the vehicle can stop; reduce approach distance or red phase",
                    ));
                }

                // Sample the analytic profile on the grid.
                let mut vel: Vec<f64> = ticks
                    .iter()
                    .map(|&tk| {
                        let t = tk as f64 / TICKS_PER_SECOND as f64;
                        if t < t_brake {
                            vc
                        } else if t < t_stop {
                            (vc - decel * (t - t_brake)).max(0.0)
                        } else if t < t_depart {
                            0.0
                        } else {
                            (d.depart_accel * (t - t_depart)).min(vc)
                        }
                    })
                    .collect();

                // Displacement-correct the braking window so the
                // trapezoid integral lands exactly on target_s. A stop
                // completing after the run end needs no correction
                // (and records no stop event).
                let k0 = ticks
                    .iter()
                    .position(|&tk| tk as f64 / TICKS_PER_SECOND as f64 >= t_brake)
                    .unwrap_or(0);
                let Some(k1) = ticks
                    .iter()
                    .position(|&tk| tk as f64 / TICKS_PER_SECOND as f64 >= t_stop)
                else {
                    plans.push(SpeedPlan { v: vel, stop: None });
                    continue;
                };
                if k1 <= k0 + 2 {
                    return Err(ConfigError::invalid(
                        format!("vehicles[{vi}]"),
                        "braking window does not fit in the run duration",
                    ));
                }
                vel[k1] = 0.0;
                let mut s_at_k1 = 0.0;
                for i in 0..k1 {
                    s_at_k1 += 0.5 * (vel[i] + vel[i + 1]) * dt_of(i);
                }
                let delta = target_s - s_at_k1;
                // Quadratic bump, zero at both window ends; weight of
                // v[k] in the trapezoid sum is (dt_{k-1} + dt_k)/2.
                let bump = |k: usize| ((k - k0) as f64) * ((k1 - k) as f64);
                let mut w = 0.0;
                for k in (k0 + 1)..k1 {
                    w += 0.5 * (dt_of(k - 1) + dt_of(k)) * bump(k);
                }
                let gamma = delta / w;
                for (k, val) in vel.iter_mut().enumerate().take(k1).skip(k0 + 1) {
                    *val += gamma * bump(k);
                    debug_assert!(*val >= 0.0, "corrected speed went negative");
                }
                let mut check = 0.0;
                for i in 0..k1 {
                    check += 0.5 * (vel[i] + vel[i + 1]) * dt_of(i);
                }
                debug_assert!((check - target_s).abs() < 1e-9);

                let t_stop_grid = ticks[k1] as f64 / TICKS_PER_SECOND as f64;
                SpeedPlan {
                    v: vel,
                    stop: Some(StopEvent {
                        t_stop: t_stop_grid,
                        t_depart,
                        queue_index,
                        t_brake,
                    }),
                }
            }
        };
        plans.push(plan);
    }

    // Choreography validation: nobody may drive through a standing
    // queue on the same approach.
    for (vi, v) in config.vehicles.iter().enumerate() {
        if plans[vi].stop.is_some() {
            continue;
        }
        let Some(cross_s) = cross_distance[vi] else {
            continue;
        };
        let t_cross = cross_s / v.cruise_mps;
        if t_cross > config.duration_s {
            continue;
        }
        for (wi, w) in config.vehicles.iter().enumerate() {
            if wi == vi || w.entry != v.entry {
                continue;
            }
            if let Some(stop) = plans[wi].stop {
                if t_cross >= stop.t_brake && t_cross <= stop.t_depart {
                    return Err(ConfigError::invalid(
                        format!("vehicles[{vi}]"),
                        format!("would pass vehicle {} standing in the same lane", w.id),
                    ));
                }
            }
        }
    }

    // Integrate to trajectories.
    let mut out = Vec::with_capacity(config.vehicles.len());
    for (vi, v) in config.vehicles.iter().enumerate() {
        let heading = v.heading_deg.to_radians();
        let dir = Vector2::new(heading.cos(), heading.sin());
        let start = Vector2::new(v.start_ned[0], v.start_ned[1]);
        let attitude = UnitQuaternion::from_euler_angles(0.0, 0.0, heading);
        let plan = &plans[vi];

        let n = ticks.len();
        let mut pos_ned = Vec::with_capacity(n);
        let mut pos_geo = Vec::with_capacity(n);
        let mut vel_ned = Vec::with_capacity(n);
        let mut accel = Vec::with_capacity(n);
        let mut s = 0.0f64;
        for i in 0..n {
            if i > 0 {
                s += 0.5 * (plan.v[i - 1] + plan.v[i]) * dt_of(i - 1);
            }
            let p = start + dir * s;
            pos_ned.push(p);
            pos_geo.push(geodetic_of(&NedVector::new(p.x, p.y, 0.0), &origin));
            vel_ned.push(Vector3::new(dir.x * plan.v[i], dir.y * plan.v[i], 0.0));
        }
        for i in 0..n {
            let a = if i + 1 < n {
                (vel_ned[i + 1] - vel_ned[i]) / dt_of(i)
            } else {
                Vector3::zeros()
            };
            accel.push(a);
        }

        out.push(TruthTrajectory {
            vehicle: v.id,
            ticks_us: ticks.clone(),
            pos_geo,
            pos_ned,
            vel_ned,
            attitude: vec![attitude; n],
            accel_ned: accel,
            speed: plan.v.clone(),
            stop: plan.stop,
            entry: v.entry,
        });
    }
    Ok(out)
}
