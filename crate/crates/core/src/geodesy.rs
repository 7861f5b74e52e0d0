//! Coordinate frames, Earth curvature radii, and the road-frame
//! covariance rotation shared by the other modules.
//!
//! Positions are geodetic (latitude, longitude in radians, ellipsoidal
//! height in meters); local work happens in a north-east-down (NED)
//! frame anchored at a fixed origin. Small geodetic offsets map to NED
//! meters through the meridian and prime-vertical radii of curvature,
//! which is also the scaling that appears in the stop-line and V2V
//! measurement matrices.

use nalgebra::{Matrix2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS-84 semi-major axis, meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 first eccentricity squared.
pub const WGS84_E2: f64 = 6.694_379_990_14e-3;
/// Earth rotation rate, rad/s.
pub const EARTH_RATE: f64 = 7.292_115_9e-5;

#[derive(Debug, Error)]
pub enum GeodesyError {
    #[error("latitude {0} out of [-pi/2, pi/2]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} out of [-pi, pi]")]
    LongitudeOutOfRange(f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("covariance not symmetric: |a12 - a21| = {0:e}")]
    NotSymmetric(f64),
}

/// Geodetic position: latitude and longitude in radians, height in
/// meters above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPosition {
    pub latitude: f64,
    pub longitude: f64,
    pub height: f64,
}

impl GeodeticPosition {
    pub fn new(latitude: f64, longitude: f64, height: f64) -> Result<Self, GeodesyError> {
        if !(latitude.is_finite() && longitude.is_finite() && height.is_finite()) {
            return Err(GeodesyError::NonFinite);
        }
        if latitude.abs() > std::f64::consts::FRAC_PI_2 {
            return Err(GeodesyError::LatitudeOutOfRange(latitude));
        }
        if longitude.abs() > std::f64::consts::PI {
            return Err(GeodesyError::LongitudeOutOfRange(longitude));
        }
        Ok(Self {
            latitude,
            longitude,
            height,
        })
    }

    /// Construct from degrees (convenience for configs and tests).
    pub fn from_degrees(lat_deg: f64, lon_deg: f64, height: f64) -> Result<Self, GeodesyError> {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), height)
    }
}

/// Offset in the local north-east-down frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NedVector {
    pub north: f64,
    pub east: f64,
    pub down: f64,
}

impl NedVector {
    pub fn new(north: f64, east: f64, down: f64) -> Self {
        Self { north, east, down }
    }

    pub fn as_vector3(&self) -> Vector3<f64> {
        Vector3::new(self.north, self.east, self.down)
    }
}

/// Orientation of a road in the horizontal plane: the angle between the
/// road direction and due north, normalized to [-pi, pi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadFrame {
    theta: f64,
}

impl RoadFrame {
    pub fn new(theta: f64) -> Self {
        Self {
            theta: normalize_angle(theta),
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Rotation taking road-frame coordinates (x along the road, y to
    /// its left-hand-rule lateral) into NED horizontal coordinates.
    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix2::new(c, -s, s, c)
    }
}

/// Normalize an angle to [-pi, pi).
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta.rem_euclid(two_pi);
    if t >= std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Meridian (R_M) and prime-vertical (R_N) radii of curvature on the
/// WGS-84 ellipsoid at the given latitude.
pub fn radii_of_curvature(lat: f64) -> (f64, f64) {
    debug_assert!(lat.abs() <= std::f64::consts::FRAC_PI_2 + 1e-12);
    let s2 = lat.sin().powi(2);
    let u = 1.0 - WGS84_E2 * s2;
    let r_n = WGS84_A / u.sqrt();
    let r_m = WGS84_A * (1.0 - WGS84_E2) / (u * u.sqrt());
    (r_m, r_n)
}

/// Linearized conversion of a small geodetic offset (d_lat, d_lon, d_h)
/// at `at` into NED meters:
/// north = (R_M + h) * d_lat, east = (R_N + h) * cos(lat) * d_lon,
/// down = -d_h.
pub fn geodetic_delta_to_ned(delta: (f64, f64, f64), at: &GeodeticPosition) -> NedVector {
    let (r_m, r_n) = radii_of_curvature(at.latitude);
    NedVector {
        north: (r_m + at.height) * delta.0,
        east: (r_n + at.height) * at.latitude.cos() * delta.1,
        down: -delta.2,
    }
}

/// North/east scale factors of the linearized geodetic->NED map at `at`.
/// These are the entries the stop-line and V2V measurement matrices put
/// on the latitude- and longitude-error columns.
pub fn position_scaling(at: &GeodeticPosition) -> (f64, f64) {
    let (r_m, r_n) = radii_of_curvature(at.latitude);
    (r_m + at.height, (r_n + at.height) * at.latitude.cos())
}

/// Horizontal NED projection of `pos` about `origin` under the
/// linearized map anchored at `origin`.
pub fn ned_of(pos: &GeodeticPosition, origin: &GeodeticPosition) -> NedVector {
    geodetic_delta_to_ned(
        (
            pos.latitude - origin.latitude,
            pos.longitude - origin.longitude,
            pos.height - origin.height,
        ),
        origin,
    )
}

/// Inverse of [`ned_of`]: geodetic position at the given NED offset
/// from `origin` (exact inverse of the linearized map).
pub fn geodetic_of(ned: &NedVector, origin: &GeodeticPosition) -> GeodeticPosition {
    let (sn, se) = position_scaling(origin);
    GeodeticPosition {
        latitude: origin.latitude + ned.north / sn,
        longitude: origin.longitude + ned.east / se,
        height: origin.height - ned.down,
    }
}

/// Rotate a 2x2 covariance expressed in the road frame into NED:
/// Sigma_ned = T * Sigma * T^T with T the road rotation. Rejects input
/// that is not symmetric within 1e-9.
pub fn rotate_road_covariance(
    frame: &RoadFrame,
    sigma: &Matrix2<f64>,
) -> Result<Matrix2<f64>, GeodesyError> {
    let skew = (sigma[(0, 1)] - sigma[(1, 0)]).abs();
    if skew > 1e-9 {
        return Err(GeodesyError::NotSymmetric(skew));
    }
    let t = frame.rotation();
    let out = t * sigma * t.transpose();
    // Re-symmetrize; rotation preserves symmetry up to rounding.
    Ok(Matrix2::new(
        out[(0, 0)],
        0.5 * (out[(0, 1)] + out[(1, 0)]),
        0.5 * (out[(0, 1)] + out[(1, 0)]),
        out[(1, 1)],
    ))
}
