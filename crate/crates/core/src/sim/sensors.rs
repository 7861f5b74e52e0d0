//! Sensor synthesis at the configured rates.
//!
//! IMU samples are the exact inverse of one mechanization step between
//! consecutive truth states (plus bias and white noise), so a
//! noise-free INS reproduces the truth trajectory to rounding error.
//! GNSS fixes carry white noise plus a slowly varying first-order
//! Gauss-Markov bias per horizontal axis, emulating multi-meter urban
//! errors. All draws come from counter-based streams keyed by
//! (vehicle or pair, channel, tick), so streams are order-independent
//! and replayable.

use nalgebra::{UnitQuaternion, Vector2, Vector3};

use crate::geodesy::{geodetic_of, GeodeticPosition, NedVector};
use crate::ins::{earth_rate_ned, gravity_ned, transport_rate, ImuSample};
use crate::sim::config::ScenarioConfig;
use crate::sim::rng::StreamRng;
use crate::sim::truth::{event_tick, TruthTrajectory, TICKS_PER_SECOND};
use crate::v2v::{RangeMeasurement, VehicleId};

/// RNG channel codes; the axis index is folded into the first key.
pub mod channel {
    pub const IMU_GYRO: u64 = 1;
    pub const IMU_ACCEL: u64 = 2;
    pub const IMU_GYRO_BIAS: u64 = 3;
    pub const IMU_ACCEL_BIAS: u64 = 4;
    pub const GNSS_POS: u64 = 5;
    pub const GNSS_VEL: u64 = 6;
    pub const GNSS_BIAS: u64 = 7;
    pub const RANGE: u64 = 8;
    pub const INIT: u64 = 9;

    pub fn key(ch: u64, axis: u64) -> u64 {
        ch * 16 + axis
    }
}

/// One GNSS position/velocity fix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssFix {
    pub timestamp: f64,
    pub position: GeodeticPosition,
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub enum SensorPayload {
    /// IMU sample covering the interval ending at this tick.
    Imu {
        vehicle: VehicleId,
        sample: ImuSample,
    },
    Gnss {
        vehicle: VehicleId,
        fix: GnssFix,
    },
    /// Beacon emission slot; the payload is built by the sender's
    /// filter at dispatch time.
    BeaconSlot {
        vehicle: VehicleId,
    },
    /// Symmetric range event delivered to both endpoints.
    Range {
        a: VehicleId,
        b: VehicleId,
        meas: RangeMeasurement,
    },
}

impl SensorPayload {
    fn kind_rank(&self) -> u8 {
        match self {
            SensorPayload::Imu { .. } => 0,
            SensorPayload::Gnss { .. } => 1,
            SensorPayload::BeaconSlot { .. } => 2,
            SensorPayload::Range { .. } => 3,
        }
    }

    fn entity_key(&self) -> (u32, u32) {
        match self {
            SensorPayload::Imu { vehicle, .. } => (*vehicle, 0),
            SensorPayload::Gnss { vehicle, .. } => (*vehicle, 0),
            SensorPayload::BeaconSlot { vehicle } => (*vehicle, 0),
            SensorPayload::Range { a, b, .. } => (*a, *b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Event {
    pub tick_us: u64,
    pub payload: SensorPayload,
}

/// Everything the event loop needs besides the truth itself.
#[derive(Debug, Clone)]
pub struct SensorStreams {
    /// Timestamp-ordered events (ties: IMU < GNSS < beacon < range,
    /// then vehicle id).
    pub events: Vec<Event>,
    /// Initial navigation error draw per vehicle, in error-state
    /// component order (attitude, velocity, position).
    pub init_errors: Vec<InitError>,
}

#[derive(Debug, Clone, Copy)]
pub struct InitError {
    pub vehicle: VehicleId,
    pub attitude: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// NED meters; converted to geodetic by the consumer.
    pub position_ned: Vector3<f64>,
}

fn pair_code(a: VehicleId, b: VehicleId) -> u64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    (lo as u64) << 32 | hi as u64
}

/// Invert one mechanization step: the IMU sample that drives the truth
/// state at grid index `i` exactly onto the state at `i + 1`.
fn exact_imu(truth: &TruthTrajectory, i: usize, dt: f64, t: f64) -> ImuSample {
    let q0 = truth.attitude[i];
    let q1 = truth.attitude[i + 1];
    let p0 = truth.pos_geo[i];
    let v0 = truth.vel_ned[i];
    let v1 = truth.vel_ned[i + 1];

    let omega_ie = earth_rate_ned(p0.latitude);
    let omega_en = transport_rate(&p0, &v0);
    let q_nav = UnitQuaternion::from_scaled_axis(-(omega_ie + omega_en) * dt);
    let q_body = (q_nav * q0).inverse() * q1;
    let gyro = q_body.scaled_axis() / dt;

    let coriolis = (2.0 * omega_ie + omega_en).cross(&v0);
    let f_ned = (v1 - v0) / dt - gravity_ned(&p0) + coriolis;
    let c0 = q0.to_rotation_matrix().into_inner();
    let c1 = q1.to_rotation_matrix().into_inner();
    let m = 0.5 * (c0 + c1);
    let f_body = m
        .try_inverse()
        .expect("averaged DCM invertible for small rotations")
        * f_ned;

    ImuSample {
        timestamp: t,
        gyro,
        accel: f_body,
    }
}

fn gauss3(rng: &StreamRng, ch: u64, entity: u64, tick: u64) -> Vector3<f64> {
    Vector3::new(
        rng.gauss([channel::key(ch, 0), entity, tick]),
        rng.gauss([channel::key(ch, 1), entity, tick]),
        rng.gauss([channel::key(ch, 2), entity, tick]),
    )
}

/// Synthesize all sensor events for one seeded run.
pub fn synthesize_sensors(
    truths: &[TruthTrajectory],
    config: &ScenarioConfig,
    seed: u64,
) -> SensorStreams {
    let rng = StreamRng::new(seed);
    let origin = config
        .origin_position()
        .expect("config validated before synthesis");
    let noise = &config.noise;
    let duration_ticks = (config.duration_s * TICKS_PER_SECOND as f64).round() as u64;
    let mut events: Vec<Event> = Vec::new();

    // IMU: per-vehicle constant bias draw plus white noise scaled to
    // the sample rate (sigma = density / sqrt(dt)).
    for truth in truths {
        let vid = truth.vehicle as u64;
        let gyro_bias = gauss3(&rng, channel::IMU_GYRO_BIAS, vid, 0) * noise.gyro_bias_sigma;
        let accel_bias = gauss3(&rng, channel::IMU_ACCEL_BIAS, vid, 0) * noise.accel_bias_sigma;
        for i in 0..truth.len() - 1 {
            let tick = truth.ticks_us[i + 1];
            let dt = (tick - truth.ticks_us[i]) as f64 / TICKS_PER_SECOND as f64;
            let t = tick as f64 / TICKS_PER_SECOND as f64;
            let mut sample = exact_imu(truth, i, dt, t);
            let sqrt_dt = dt.sqrt();
            sample.gyro +=
                gyro_bias + gauss3(&rng, channel::IMU_GYRO, vid, tick) * (noise.gyro_arw / sqrt_dt);
            sample.accel += accel_bias
                + gauss3(&rng, channel::IMU_ACCEL, vid, tick) * (noise.accel_vrw / sqrt_dt);
            events.push(Event {
                tick_us: tick,
                payload: SensorPayload::Imu {
                    vehicle: truth.vehicle,
                    sample,
                },
            });
        }
    }

    // GNSS: white noise + Gauss-Markov horizontal bias, skipping
    // scripted outages. The bias variance splits into a component
    // common to all vehicles and a per-vehicle remainder.
    let gnss_phi = (-1.0 / (noise.gnss_bias_tau_s * config.rates.gnss_hz as f64)).exp();
    let sigma_common = noise.gnss_bias_sigma_m * noise.gnss_bias_common_fraction.sqrt();
    let sigma_indiv = noise.gnss_bias_sigma_m * (1.0 - noise.gnss_bias_common_fraction).sqrt();
    const COMMON: u64 = u64::MAX;
    let gm_step = |state: Vector2<f64>, entity: u64, k: u64, sigma: f64| -> Vector2<f64> {
        let innov = sigma * (1.0 - gnss_phi * gnss_phi).sqrt();
        state * gnss_phi
            + Vector2::new(
                rng.gauss([channel::key(channel::GNSS_BIAS, 0), entity, k]),
                rng.gauss([channel::key(channel::GNSS_BIAS, 1), entity, k]),
            ) * innov
    };
    let gm_init = |entity: u64, sigma: f64| -> Vector2<f64> {
        Vector2::new(
            rng.gauss([channel::key(channel::GNSS_BIAS, 0), entity, 0]),
            rng.gauss([channel::key(channel::GNSS_BIAS, 1), entity, 0]),
        ) * sigma
    };
    for truth in truths {
        let vid = truth.vehicle as u64;
        let mut bias_indiv = gm_init(vid, sigma_indiv);
        let mut bias_common = gm_init(COMMON, sigma_common);
        let mut k = 1u64;
        loop {
            let tick = event_tick(k, config.rates.gnss_hz, 0.0);
            if tick > duration_ticks {
                break;
            }
            bias_indiv = gm_step(bias_indiv, vid, k, sigma_indiv);
            bias_common = gm_step(bias_common, COMMON, k, sigma_common);
            let bias = bias_indiv + bias_common;
            let t = tick as f64 / TICKS_PER_SECOND as f64;
            let outage = config
                .gnss_outages
                .iter()
                .any(|o| o.vehicle == truth.vehicle && t >= o.start_s && t < o.end_s);
            if !outage {
                if let Some(i) = truth.index_of_tick(tick) {
                    let white = gauss3(&rng, channel::GNSS_POS, vid, tick) * noise.gnss_pos_sigma_m;
                    let p = truth.pos_ned[i];
                    let noisy = NedVector::new(
                        p.x + bias.x + white.x,
                        p.y + bias.y + white.y,
                        -(truth.pos_geo[i].height - origin.height) + white.z,
                    );
                    let fix = GnssFix {
                        timestamp: t,
                        position: geodetic_of(&noisy, &origin),
                        velocity: truth.vel_ned[i]
                            + gauss3(&rng, channel::GNSS_VEL, vid, tick) * noise.gnss_vel_sigma_mps,
                    };
                    events.push(Event {
                        tick_us: tick,
                        payload: SensorPayload::Gnss {
                            vehicle: truth.vehicle,
                            fix,
                        },
                    });
                }
                k += 1;
                continue;
            }
            k += 1;
        }
    }

    // Beacon slots (payload built at dispatch time).
    for truth in truths {
        let mut k = 1u64;
        loop {
            let tick = event_tick(k, config.rates.beacon_hz, config.beacon_offset_s);
            if tick > duration_ticks {
                break;
            }
            events.push(Event {
                tick_us: tick,
                payload: SensorPayload::BeaconSlot {
                    vehicle: truth.vehicle,
                },
            });
            k += 1;
        }
    }

    // Ranges per unordered pair, gated by comm range and outages.
    for (ai, ta) in truths.iter().enumerate() {
        for tb in truths.iter().skip(ai + 1) {
            let (a, b) = (ta.vehicle, tb.vehicle);
            let code = pair_code(a, b);
            let mut k = 1u64;
            loop {
                let tick = event_tick(k, config.rates.range_hz, 0.0);
                if tick > duration_ticks {
                    break;
                }
                k += 1;
                let t = tick as f64 / TICKS_PER_SECOND as f64;
                if !comm_link_up(config, a, b, t) {
                    continue;
                }
                let true_dist = (ta.pos_ned_at(tick) - tb.pos_ned_at(tick)).norm();
                if true_dist > config.comm_range_m {
                    continue;
                }
                let meas = RangeMeasurement {
                    from: a,
                    to: b,
                    distance: true_dist
                        + rng.gauss([channel::key(channel::RANGE, 0), code, tick])
                            * noise.sigma_v2v_m,
                    timestamp: t,
                    sigma: noise.sigma_v2v_m.max(1e-6),
                };
                events.push(Event {
                    tick_us: tick,
                    payload: SensorPayload::Range { a, b, meas },
                });
            }
        }
    }

    events.sort_by_key(|e| {
        let (x, y) = e.payload.entity_key();
        (e.tick_us, e.payload.kind_rank(), x, y)
    });

    let init_errors = truths
        .iter()
        .map(|truth| {
            let vid = truth.vehicle as u64;
            InitError {
                vehicle: truth.vehicle,
                attitude: gauss3(&rng, channel::INIT, vid, 0) * noise.init_att_sigma_rad,
                velocity: gauss3(&rng, channel::INIT, vid, 1) * noise.init_vel_sigma_mps,
                position_ned: gauss3(&rng, channel::INIT, vid, 2) * noise.init_pos_sigma_m,
            }
        })
        .collect();

    SensorStreams {
        events,
        init_errors,
    }
}

/// Whether the V2V link between `a` and `b` is scripted up at time `t`
/// (comm-range gating is applied separately against truth distance).
pub fn comm_link_up(config: &ScenarioConfig, a: VehicleId, b: VehicleId, t: f64) -> bool {
    !config.link_outages.iter().any(|o| {
        ((o.a == a && o.b == b) || (o.a == b && o.b == a)) && t >= o.start_s && t < o.end_s
    })
}
