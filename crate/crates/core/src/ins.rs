//! Strapdown INS mechanization in the local NED frame, the 15-state
//! error transition model, and closed-loop error feedback.
//!
//! The error state follows the fixed ordering
//! `[attitude(3), velocity(3), position(dLat, dLon, dH), gyro bias(3),
//! accel bias(3)]` with additive errors: the INS quantity equals truth
//! plus error. The attitude error is a small rotation of the computed
//! navigation frame, `C_ins = (I - [phi x]) C_true`.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geodesy::{radii_of_curvature, GeodeticPosition, EARTH_RATE};

/// Dimension of the error state.
pub const STATE_DIM: usize = 15;

/// Index of the first attitude-error component.
pub const ATT: usize = 0;
/// Index of the first velocity-error component.
pub const VEL: usize = 3;
/// Index of the first position-error component (dLat, dLon, dH).
pub const POS: usize = 6;
/// Index of the first gyro-bias component.
pub const BG: usize = 9;
/// Index of the first accel-bias component.
pub const BA: usize = 12;

#[derive(Debug, Error)]
pub enum InsError {
    #[error("dt {0} outside (0, 0.1] s")]
    InvalidDt(f64),
    #[error("non-finite IMU sample")]
    NonFiniteImu,
}

/// One IMU sample: body-frame angular rate and specific force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Angular rate, rad/s, body axes.
    pub gyro: Vector3<f64>,
    /// Specific force, m/s^2, body axes.
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.gyro.iter().all(|v| v.is_finite())
            && self.accel.iter().all(|v| v.is_finite())
    }

    /// Sample with the given bias estimates removed.
    pub fn corrected(&self, biases: &ImuBiases) -> ImuSample {
        ImuSample {
            timestamp: self.timestamp,
            gyro: self.gyro - biases.gyro,
            accel: self.accel - biases.accel,
        }
    }
}

/// Accumulated gyro/accelerometer bias corrections fed back from the
/// filter to the raw IMU stream.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ImuBiases {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Full INS navigation state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavSolution {
    /// Body-to-NED rotation.
    pub attitude: UnitQuaternion<f64>,
    /// NED velocity, m/s.
    pub velocity: Vector3<f64>,
    pub position: GeodeticPosition,
    pub timestamp: f64,
}

/// The 15-component navigation error vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorState15(pub SVector<f64, STATE_DIM>);

impl ErrorState15 {
    pub fn zeros() -> Self {
        Self(SVector::zeros())
    }

    pub fn attitude_err(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(ATT).into()
    }

    pub fn velocity_err(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(VEL).into()
    }

    /// (dLat rad, dLon rad, dH m).
    pub fn position_err(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(POS).into()
    }

    pub fn gyro_bias(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(BG).into()
    }

    pub fn accel_bias(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(BA).into()
    }
}

impl From<SVector<f64, STATE_DIM>> for ErrorState15 {
    fn from(v: SVector<f64, STATE_DIM>) -> Self {
        Self(v)
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Earth rotation rate expressed in NED at latitude `lat`.
pub fn earth_rate_ned(lat: f64) -> Vector3<f64> {
    Vector3::new(EARTH_RATE * lat.cos(), 0.0, -EARTH_RATE * lat.sin())
}

/// Transport rate: rotation of the NED frame due to motion over the
/// curved Earth.
pub fn transport_rate(pos: &GeodeticPosition, vel: &Vector3<f64>) -> Vector3<f64> {
    let (r_m, r_n) = radii_of_curvature(pos.latitude);
    Vector3::new(
        vel.y / (r_n + pos.height),
        -vel.x / (r_m + pos.height),
        -vel.y * pos.latitude.tan() / (r_n + pos.height),
    )
}

/// Normal gravity magnitude (Somigliana surface model with an
/// inverse-square height factor), positive down.
pub fn gravity_magnitude(lat: f64, height: f64) -> f64 {
    // WGS-84 Somigliana constants.
    const GE: f64 = 9.780_325_335_9;
    const K: f64 = 1.931_852_652_41e-3;
    let s2 = lat.sin().powi(2);
    let g0 = GE * (1.0 + K * s2) / (1.0 - crate::geodesy::WGS84_E2 * s2).sqrt();
    let ratio = crate::geodesy::WGS84_A / (crate::geodesy::WGS84_A + height);
    g0 * ratio * ratio
}

/// Gravity vector in NED.
pub fn gravity_ned(pos: &GeodeticPosition) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, gravity_magnitude(pos.latitude, pos.height))
}

/// One strapdown mechanization step over `dt` seconds.
///
/// Attitude integrates the body rate against the rotating navigation
/// frame; velocity integrates the trapezoid-rotated specific force plus
/// gravity minus Coriolis/transport terms; position integrates the
/// velocity trapezoid through the curvature radii. A body at rest fed
/// the exact Earth-rate/gravity-reaction sample stays at rest.
pub fn mechanize(nav: &NavSolution, imu: &ImuSample, dt: f64) -> Result<NavSolution, InsError> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(InsError::InvalidDt(dt));
    }
    if !imu.is_finite() {
        return Err(InsError::NonFiniteImu);
    }

    let pos = nav.position;
    let vel = nav.velocity;
    let omega_ie = earth_rate_ned(pos.latitude);
    let omega_en = transport_rate(&pos, &vel);

    // Attitude: q+ = Q_n(-(w_ie + w_en) dt) * q * Q_b(w_ib dt).
    let q_body = UnitQuaternion::from_scaled_axis(imu.gyro * dt);
    let q_nav = UnitQuaternion::from_scaled_axis(-(omega_ie + omega_en) * dt);
    let mut attitude = q_nav * nav.attitude * q_body;
    attitude.renormalize();

    // Specific force through the averaged rotation (trapezoid).
    let c_old = nav.attitude.to_rotation_matrix();
    let c_new = attitude.to_rotation_matrix();
    let f_ned = 0.5 * (c_old.matrix() + c_new.matrix()) * imu.accel;

    let coriolis = (2.0 * omega_ie + omega_en).cross(&vel);
    let velocity = vel + dt * (f_ned + gravity_ned(&pos) - coriolis);

    // Position from the velocity trapezoid.
    let (r_m, r_n) = radii_of_curvature(pos.latitude);
    let v_mid = 0.5 * (vel + velocity);
    let position = GeodeticPosition {
        latitude: pos.latitude + v_mid.x * dt / (r_m + pos.height),
        longitude: pos.longitude + v_mid.y * dt / ((r_n + pos.height) * pos.latitude.cos()),
        height: pos.height - v_mid.z * dt,
    };

    Ok(NavSolution {
        attitude,
        velocity,
        position,
        timestamp: nav.timestamp + dt,
    })
}

/// Discrete error-state transition matrix F = I + A dt for one
/// mechanization step, where A is the continuous-time NED phi-angle
/// error model evaluated at the current solution. Bias blocks are
/// exactly identity (random-constant bias model).
pub fn build_transition(
    nav: &NavSolution,
    imu: &ImuSample,
    dt: f64,
) -> SMatrix<f64, STATE_DIM, STATE_DIM> {
    debug_assert!(dt > 0.0 && dt <= 0.1);

    let pos = nav.position;
    let vel = nav.velocity;
    let lat = pos.latitude;
    let h = pos.height;
    let (r_m, r_n) = radii_of_curvature(lat);
    let rm_h = r_m + h;
    let rn_h = r_n + h;
    let (sin_l, cos_l) = lat.sin_cos();
    let tan_l = sin_l / cos_l;

    let omega_ie = earth_rate_ned(lat);
    let omega_en = transport_rate(&pos, &vel);
    let omega_in = omega_ie + omega_en;
    let c_bn = nav.attitude.to_rotation_matrix().into_inner();
    let f_ned = c_bn * imu.accel;

    // d(omega_en)/d(velocity).
    let m_wv = Matrix3::new(
        0.0,
        1.0 / rn_h,
        0.0,
        -1.0 / rm_h,
        0.0,
        0.0,
        0.0,
        -tan_l / rn_h,
        0.0,
    );
    // d(omega_ie + omega_en)/d(dLat, dLon, dH); dR/dLat terms dropped.
    let sec2_l = 1.0 / (cos_l * cos_l);
    let m_wp = Matrix3::new(
        -EARTH_RATE * sin_l,
        0.0,
        -vel.y / (rn_h * rn_h),
        0.0,
        0.0,
        vel.x / (rm_h * rm_h),
        -EARTH_RATE * cos_l - vel.y * sec2_l / rn_h,
        0.0,
        vel.y * tan_l / (rn_h * rn_h),
    );
    // d(2*omega_ie + omega_en)/d(position): earth-rate part doubles.
    let m_wp2 = Matrix3::new(
        -2.0 * EARTH_RATE * sin_l,
        0.0,
        -vel.y / (rn_h * rn_h),
        0.0,
        0.0,
        vel.x / (rm_h * rm_h),
        -2.0 * EARTH_RATE * cos_l - vel.y * sec2_l / rn_h,
        0.0,
        vel.y * tan_l / (rn_h * rn_h),
    );

    // Gravity gradient w.r.t. (dLat, dLon, dH): only the down row.
    let g = gravity_magnitude(lat, h);
    let dg_dlat = {
        const GE: f64 = 9.780_325_335_9;
        const K: f64 = 1.931_852_652_41e-3;
        let e2 = crate::geodesy::WGS84_E2;
        let u = 1.0 - e2 * sin_l * sin_l;
        let surf = GE
            * sin_l
            * cos_l
            * (2.0 * K / u.sqrt() + (1.0 + K * sin_l * sin_l) * e2 / (u * u.sqrt()));
        let ratio = crate::geodesy::WGS84_A / (crate::geodesy::WGS84_A + h);
        surf * ratio * ratio
    };
    let dg_dh = -2.0 * g / (crate::geodesy::WGS84_A + h);

    let mut a = SMatrix::<f64, STATE_DIM, STATE_DIM>::zeros();

    // Attitude-error dynamics: dphi' = -[w_in x] phi + d(w_in) - C b_g.
    a.fixed_view_mut::<3, 3>(ATT, ATT)
        .copy_from(&(-skew(&omega_in)));
    a.fixed_view_mut::<3, 3>(ATT, VEL).copy_from(&m_wv);
    a.fixed_view_mut::<3, 3>(ATT, POS).copy_from(&m_wp);
    a.fixed_view_mut::<3, 3>(ATT, BG).copy_from(&(-c_bn));

    // Velocity-error dynamics:
    // dv' = [f x] phi - (2w_ie + w_en) x dv + [v x](d(2w_ie + w_en)) + dg + C b_a.
    a.fixed_view_mut::<3, 3>(VEL, ATT).copy_from(&skew(&f_ned));
    a.fixed_view_mut::<3, 3>(VEL, VEL)
        .copy_from(&(-skew(&(2.0 * omega_ie + omega_en)) + skew(&vel) * m_wv));
    let mut a_vp = skew(&vel) * m_wp2;
    a_vp[(2, 0)] += dg_dlat;
    a_vp[(2, 2)] += dg_dh;
    a.fixed_view_mut::<3, 3>(VEL, POS).copy_from(&a_vp);
    a.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&c_bn);

    // Position-error dynamics.
    a[(POS, VEL)] = 1.0 / rm_h;
    a[(POS, POS + 2)] = -vel.x / (rm_h * rm_h);
    a[(POS + 1, VEL + 1)] = 1.0 / (rn_h * cos_l);
    a[(POS + 1, POS)] = vel.y * tan_l / (rn_h * cos_l);
    a[(POS + 1, POS + 2)] = -vel.y / (rn_h * rn_h * cos_l);
    a[(POS + 2, VEL + 2)] = -1.0;

    // Bias rows are zero (random constants), so F's bias blocks stay I.
    SMatrix::<f64, STATE_DIM, STATE_DIM>::identity() + a * dt
}

/// Discrete process noise for one step: gyro/accel white-noise PSDs
/// drive the attitude- and velocity-error states; the random-constant
/// biases receive none.
pub fn process_noise(gyro_psd: f64, accel_psd: f64, dt: f64) -> SMatrix<f64, STATE_DIM, STATE_DIM> {
    let mut q = SMatrix::<f64, STATE_DIM, STATE_DIM>::zeros();
    for i in 0..3 {
        q[(ATT + i, ATT + i)] = gyro_psd * dt;
        q[(VEL + i, VEL + i)] = accel_psd * dt;
    }
    q
}

/// Apply estimated errors to the navigation solution (closed loop).
///
/// Velocity and position errors are subtracted; the attitude is
/// de-rotated by the small-angle estimate; the bias estimates are
/// returned for accumulation into the IMU correction path. After this
/// the filter's error state should be zeroed.
pub fn apply_feedback(nav: &NavSolution, err: &ErrorState15) -> (NavSolution, ImuBiases) {
    let phi = err.attitude_err();
    let mut attitude = UnitQuaternion::from_scaled_axis(phi) * nav.attitude;
    attitude.renormalize();
    let dp = err.position_err();
    let corrected = NavSolution {
        attitude,
        velocity: nav.velocity - err.velocity_err(),
        position: GeodeticPosition {
            latitude: nav.position.latitude - dp.x,
            longitude: nav.position.longitude - dp.y,
            height: nav.position.height - dp.z,
        },
        timestamp: nav.timestamp,
    };
    let biases = ImuBiases {
        gyro: err.gyro_bias(),
        accel: err.accel_bias(),
    };
    (corrected, biases)
}

/// IMU sample that keeps `nav` exactly stationary: gyro senses the
/// Earth-rate projection, the accelerometer the gravity reaction.
pub fn stationary_sample(nav: &NavSolution, timestamp: f64) -> ImuSample {
    let c_nb = nav.attitude.inverse().to_rotation_matrix();
    ImuSample {
        timestamp,
        gyro: c_nb * earth_rate_ned(nav.position.latitude),
        accel: c_nb * (-gravity_ned(&nav.position)),
    }
}
