//! Stop-line map geometry, the first-stopped-vehicle position solve,
//! and construction of the stop-line observation.
//!
//! Lines are stored in normalized general form a*n + b*e + c = 0
//! (a^2 + b^2 = 1), which subsumes vertical lines; slope-intercept
//! ingestion is a converting constructor. The absolute values of the
//! two point-to-line distances create a four-fold sign ambiguity, which
//! per-entry map metadata resolves: traffic approaches a stop line from
//! one side, and the lane lies on one side of its left lane line.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::{ObsMatrix, Observation, ObservationKind};
use crate::geodesy::{
    ned_of, position_scaling, rotate_road_covariance, GeodesyError, GeodeticPosition, RoadFrame,
};
use crate::ins::{NavSolution, POS};

/// Speed below which a vehicle counts as stopped, m/s.
pub const DEFAULT_V_STOP: f64 = 0.3;
/// How far behind the stop line a first-stopped vehicle may sit, m.
pub const DEFAULT_D_GATE: f64 = 6.0;

#[derive(Debug, Error)]
pub enum StopLineError {
    #[error("line coefficients degenerate (a = b = 0)")]
    DegenerateLine,
    #[error("stop and lane lines nearly parallel (condition {0:.2e})")]
    DegenerateGeometry(f64),
    #[error("side vector has zero norm")]
    ZeroSideVector,
    #[error("prior field {0} must be positive")]
    NonPositivePrior(&'static str),
    #[error("prior field {0} must be non-negative")]
    NegativePrior(&'static str),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
}

/// Normalized general-form line a*n + b*e + c = 0 in the local NED
/// horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineGeometry {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LineGeometry {
    pub fn from_general(a: f64, b: f64, c: f64) -> Result<Self, StopLineError> {
        let norm = a.hypot(b);
        if !(norm > 1e-12) {
            return Err(StopLineError::DegenerateLine);
        }
        Ok(Self {
            a: a / norm,
            b: b / norm,
            c: c / norm,
        })
    }

    /// From slope-intercept form e = k*n + b0 (east as a function of
    /// north).
    pub fn from_slope_intercept(k: f64, b0: f64) -> Result<Self, StopLineError> {
        Self::from_general(k, -1.0, b0)
    }

    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(self.a, self.b)
    }

    /// Signed value a*n + b*e + c; its magnitude is the distance.
    pub fn signed_eval(&self, p: &Vector2<f64>) -> f64 {
        self.a * p.x + self.b * p.y + self.c
    }
}

/// Distance priors for a first-stopped vehicle: head-to-stop-line and
/// centerline-to-left-lane-line distances plus the body-origin offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopLinePrior {
    /// Mean head-to-stop-line distance, m.
    pub m_xb: f64,
    pub sigma_xb: f64,
    /// Mean vehicle-centerline-to-left-lane-line distance, m.
    pub m_yb: f64,
    pub sigma_yb: f64,
    /// Body origin to vehicle head, m.
    pub l0: f64,
}

impl StopLinePrior {
    pub fn validate(&self) -> Result<(), StopLineError> {
        if !(self.sigma_xb > 0.0) {
            return Err(StopLineError::NonPositivePrior("sigma_xb"));
        }
        if !(self.sigma_yb > 0.0) {
            return Err(StopLineError::NonPositivePrior("sigma_yb"));
        }
        if self.m_xb < 0.0 {
            return Err(StopLineError::NegativePrior("m_xb"));
        }
        if self.m_yb < 0.0 {
            return Err(StopLineError::NegativePrior("m_yb"));
        }
        Ok(())
    }
}

impl Default for StopLinePrior {
    fn default() -> Self {
        // m_yb defaults to half a 3.5 m lane.
        Self {
            m_xb: 1.0,
            sigma_xb: 0.5,
            m_yb: 1.75,
            sigma_yb: 0.3,
            l0: 1.5,
        }
    }
}

/// One stop-line map entry: the stop line, the left lane line, the road
/// heading, and the side metadata that picks the physical solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopLineMapEntry {
    pub stop_line: LineGeometry,
    pub left_lane_line: LineGeometry,
    pub road: RoadFrame,
    /// Unit vector from the stop line back toward approaching traffic.
    pub approach_side: Vector2<f64>,
    /// Unit vector from the left lane line into the lane.
    pub lane_side: Vector2<f64>,
    pub priors: StopLinePrior,
}

impl StopLineMapEntry {
    pub fn new(
        stop_line: LineGeometry,
        left_lane_line: LineGeometry,
        road: RoadFrame,
        approach_side: Vector2<f64>,
        lane_side: Vector2<f64>,
        priors: StopLinePrior,
    ) -> Result<Self, StopLineError> {
        let an = approach_side.norm();
        let ln = lane_side.norm();
        if !(an > 1e-12) || !(ln > 1e-12) {
            return Err(StopLineError::ZeroSideVector);
        }
        let cross = stop_line.a * left_lane_line.b - stop_line.b * left_lane_line.a;
        if cross.abs() <= 1e-6 {
            return Err(StopLineError::DegenerateGeometry(
                1.0 / cross.abs().max(f64::MIN_POSITIVE),
            ));
        }
        priors.validate()?;
        Ok(Self {
            stop_line,
            left_lane_line,
            road,
            approach_side: approach_side / an,
            lane_side: lane_side / ln,
            priors,
        })
    }

    /// Signed distance of `p` behind the stop line, positive on the
    /// approach side.
    pub fn distance_behind_stop_line(&self, p: &Vector2<f64>) -> f64 {
        let sign = side_sign(&self.stop_line, &self.approach_side);
        sign * self.stop_line.signed_eval(p)
    }
}

fn side_sign(line: &LineGeometry, side: &Vector2<f64>) -> f64 {
    if line.normal().dot(side) >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Unsigned point-to-line distance |a*n + b*e + c|.
pub fn distance_to_line(line: &LineGeometry, p: &Vector2<f64>) -> f64 {
    line.signed_eval(p).abs()
}

/// Solve the stopped-vehicle position from the two distance equations.
///
/// Of the four sign combinations, the entry's approach and lane side
/// vectors select the physical one; the result is the unique point at
/// distance `d_e` from the stop line (on the approach side) and `d_l`
/// from the left lane line (inside the lane).
pub fn solve_position(
    entry: &StopLineMapEntry,
    d_e: f64,
    d_l: f64,
) -> Result<Vector2<f64>, StopLineError> {
    debug_assert!(d_e >= 0.0 && d_l >= 0.0);
    let s_e = side_sign(&entry.stop_line, &entry.approach_side);
    let s_l = side_sign(&entry.left_lane_line, &entry.lane_side);
    let m = Matrix2::new(
        entry.stop_line.a,
        entry.stop_line.b,
        entry.left_lane_line.a,
        entry.left_lane_line.b,
    );
    let sv = m.singular_values();
    let cond = sv.max() / sv.min().max(f64::MIN_POSITIVE);
    if cond > 1e6 {
        return Err(StopLineError::DegenerateGeometry(cond));
    }
    let rhs = Vector2::new(
        s_e * d_e - entry.stop_line.c,
        s_l * d_l - entry.left_lane_line.c,
    );
    let solution = m
        .lu()
        .solve(&rhs)
        .ok_or(StopLineError::DegenerateGeometry(cond))?;
    Ok(solution)
}

/// Build the 2-row stop-line observation for a first-stopped vehicle.
///
/// The innovation compares the INS position (projected to NED about
/// `origin`) against the map-solved position; the measurement matrix
/// carries the geodetic-to-NED scale factors on the latitude and
/// longitude error columns; the noise is the road-frame prior
/// covariance rotated into NED.
pub fn build_stopline_observation(
    nav: &NavSolution,
    entry: &StopLineMapEntry,
    prior: &StopLinePrior,
    origin: &GeodeticPosition,
) -> Result<Observation, StopLineError> {
    let p_sl = solve_position(entry, prior.m_xb + prior.l0, prior.m_yb)?;
    let p_ins = ned_of(&nav.position, origin);

    let z = DVector::from_column_slice(&[p_ins.north - p_sl.x, p_ins.east - p_sl.y]);
    let (sn, se) = position_scaling(origin);
    let mut h = ObsMatrix::zeros(2);
    h[(0, POS)] = sn;
    h[(1, POS + 1)] = se;

    let sigma_road = Matrix2::new(
        prior.sigma_xb * prior.sigma_xb,
        0.0,
        0.0,
        prior.sigma_yb * prior.sigma_yb,
    );
    let r2 = rotate_road_covariance(&entry.road, &sigma_road)?;
    let mut r = DMatrix::zeros(2, 2);
    r.copy_from(&r2);

    Ok(Observation::new(z, h, r, ObservationKind::SpSl).expect("dimensions fixed"))
}

/// First-stopped test: slow enough, within the gate behind the stop
/// line, and nothing in the same lane between the vehicle and the line.
pub fn detect_first_stopped(
    speed: f64,
    est_position: &Vector2<f64>,
    entry: &StopLineMapEntry,
    occupancy: &[Vector2<f64>],
    v_stop: f64,
    d_gate: f64,
) -> bool {
    if speed >= v_stop {
        return false;
    }
    let d_self = entry.distance_behind_stop_line(est_position);
    if !(0.0..=d_gate).contains(&d_self) {
        return false;
    }
    !occupancy.iter().any(|q| {
        let d_q = entry.distance_behind_stop_line(q);
        (0.0..d_self).contains(&d_q)
    })
}

/// Serialized form of one stop-line map entry.
///
/// Line coefficients are general-form a*n + b*e + c = 0 and are
/// normalized on load; side vectors are normalized too. Everything
/// else is validated against the type invariants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapEntryRecord {
    pub stop_line: LineCoeffs,
    pub lane_line: LineCoeffs,
    pub theta_deg: f64,
    pub approach_side: [f64; 2],
    pub lane_side: [f64; 2],
    pub priors: StopLinePrior,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LineCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl MapEntryRecord {
    pub fn build(&self) -> Result<StopLineMapEntry, StopLineError> {
        StopLineMapEntry::new(
            LineGeometry::from_general(self.stop_line.a, self.stop_line.b, self.stop_line.c)?,
            LineGeometry::from_general(self.lane_line.a, self.lane_line.b, self.lane_line.c)?,
            RoadFrame::new(self.theta_deg.to_radians()),
            Vector2::new(self.approach_side[0], self.approach_side[1]),
            Vector2::new(self.lane_side[0], self.lane_side[1]),
            self.priors,
        )
    }
}

/// Parse a stop-line map document (a JSON array of entries) and
/// validate every entry.
pub fn map_from_json(json: &str) -> Result<Vec<StopLineMapEntry>, MapLoadError> {
    let records: Vec<MapEntryRecord> = serde_json::from_str(json).map_err(MapLoadError::Parse)?;
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            rec.build()
                .map_err(|source| MapLoadError::Entry { index: i, source })
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum MapLoadError {
    #[error("map JSON parse error: {0}")]
    Parse(#[source] serde_json::Error),
    #[error("map entry {index}: {source}")]
    Entry {
        index: usize,
        #[source]
        source: StopLineError,
    },
}
