//! V2V payloads, the linearized inter-vehicle range observation with
//! neighbor-uncertainty inflation, and the Case 1/2/3 measurement
//! scheduler.
//!
//! A beacon carries a neighbor's horizontal position estimate and its
//! 2x2 covariance; a range measurement carries the inter-vehicle
//! distance. The range row observes the projection of the own position
//! error onto the line of sight, and the neighbor's estimation
//! uncertainty is folded into the measurement noise as the scalar
//! r_j = u P^(j) u^T. Cross-correlation between vehicles' estimates is
//! deliberately ignored (a known consistency risk, monitored by the
//! NEES acceptance test).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use thiserror::Error;

use crate::ekf::{self, FilterState, ObsMatrix, Observation, ObservationKind};
use crate::geodesy::{ned_of, position_scaling, GeodeticPosition};
use crate::ins::{NavSolution, POS};

/// Minimum inter-vehicle distance before the range Jacobian becomes
/// singular, m.
pub const DEFAULT_D_MIN: f64 = 0.5;
/// Default pairing staleness bound: one beacon period at 5 Hz plus
/// margin, s.
pub const DEFAULT_STALENESS: f64 = 0.25;
/// Beacon wire format version.
pub const WIRE_VERSION: u8 = 0x01;

pub type VehicleId = u32;

#[derive(Debug, Error)]
pub enum V2vError {
    #[error("positions within {d_min} m of each other; range Jacobian singular")]
    CoincidentPositions { d_min: f64 },
    #[error("stale pairing: beacon/range/nav timestamps spread {spread:.3} s exceeds {bound} s")]
    StaleData { spread: f64, bound: f64 },
    #[error("no observation to assemble")]
    EmptyAssembly,
    #[error(transparent)]
    Filter(#[from] ekf::FilterError),
    #[error("wire record truncated or malformed: {0}")]
    Wire(&'static str),
}

/// Broadcast self-positioning snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeaconPacket {
    pub sender: VehicleId,
    pub timestamp: f64,
    /// Horizontal position estimate, NED meters about the shared origin.
    pub position: Vector2<f64>,
    /// 2x2 covariance of that estimate, NED meters^2.
    pub pos_cov: Matrix2<f64>,
    pub first_stopped: bool,
}

/// One inter-vehicle distance measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeMeasurement {
    pub from: VehicleId,
    pub to: VehicleId,
    pub distance: f64,
    pub timestamp: f64,
    /// Ranging noise standard deviation, m.
    pub sigma: f64,
}

/// Latest beacon/range per neighbor, with staleness-based eviction.
#[derive(Debug, Clone, Default)]
pub struct NeighborTable {
    entries: BTreeMap<VehicleId, NeighborEntry>,
}

#[derive(Debug, Clone)]
pub struct NeighborEntry {
    pub beacon: Option<BeaconPacket>,
    pub range: Option<RangeMeasurement>,
}

impl NeighborTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_beacon(&mut self, beacon: BeaconPacket) {
        self.entries
            .entry(beacon.sender)
            .or_insert(NeighborEntry {
                beacon: None,
                range: None,
            })
            .beacon = Some(beacon);
    }

    pub fn insert_range(&mut self, neighbor: VehicleId, range: RangeMeasurement) {
        self.entries
            .entry(neighbor)
            .or_insert(NeighborEntry {
                beacon: None,
                range: None,
            })
            .range = Some(range);
    }

    /// Drop entries whose newest payload is older than `bound` seconds.
    pub fn evict_stale(&mut self, now: f64, bound: f64) {
        self.entries.retain(|_, e| {
            let newest = e
                .beacon
                .map(|b| b.timestamp)
                .into_iter()
                .chain(e.range.map(|r| r.timestamp))
                .fold(f64::NEG_INFINITY, f64::max);
            now - newest <= bound
        });
    }

    /// Neighbors with a fresh beacon/range pair, ordered by id so the
    /// stacked observation layout is deterministic.
    pub fn ready(&self, now: f64, bound: f64) -> Vec<(BeaconPacket, RangeMeasurement)> {
        self.entries
            .values()
            .filter_map(|e| match (e.beacon, e.range) {
                (Some(b), Some(r)) => {
                    let spread = (b.timestamp - r.timestamp)
                        .abs()
                        .max((now - b.timestamp).abs())
                        .max((now - r.timestamp).abs());
                    (spread <= bound).then_some((b, r))
                }
                _ => None,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Which observation sets are available at an update instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateCase {
    /// Only local GNSS readings.
    Case1,
    /// Only beacon packets and inter-node distances.
    Case2,
    /// Both.
    Case3,
}

/// Pick the update case; `None` means prediction only.
pub fn select_case(has_gnss: bool, neighbor_obs_ready: usize) -> Option<UpdateCase> {
    match (has_gnss, neighbor_obs_ready) {
        (true, 0) => Some(UpdateCase::Case1),
        (false, 0) => None,
        (false, _) => Some(UpdateCase::Case2),
        (true, _) => Some(UpdateCase::Case3),
    }
}

/// Build the 1-row linearized range observation against neighbor `j`.
///
/// z = ||p_ins_i - p_hat_j|| - measured; the Jacobian row is the unit
/// line-of-sight vector mapped through the geodetic position scaling;
/// R = u P^(j) u^T + sigma_v2v^2.
pub fn range_observation(
    nav_i: &NavSolution,
    origin: &GeodeticPosition,
    beacon_j: &BeaconPacket,
    range: &RangeMeasurement,
    d_min: f64,
    staleness_bound: f64,
) -> Result<Observation, V2vError> {
    let spread = (beacon_j.timestamp - range.timestamp)
        .abs()
        .max((nav_i.timestamp - range.timestamp).abs())
        .max((nav_i.timestamp - beacon_j.timestamp).abs());
    if spread > staleness_bound {
        return Err(V2vError::StaleData {
            spread,
            bound: staleness_bound,
        });
    }

    let p_ins = ned_of(&nav_i.position, origin);
    let p_i = Vector2::new(p_ins.north, p_ins.east);
    let diff = p_i - beacon_j.position;
    let dist = diff.norm();
    if dist <= d_min {
        return Err(V2vError::CoincidentPositions { d_min });
    }
    let u = diff / dist;

    let z = DVector::from_element(1, dist - range.distance);
    let (sn, se) = position_scaling(origin);
    let mut h = ObsMatrix::zeros(1);
    h[(0, POS)] = sn * u.x;
    h[(0, POS + 1)] = se * u.y;

    let r_j = (u.transpose() * beacon_j.pos_cov * u)[(0, 0)];
    let r = DMatrix::from_element(1, 1, r_j + range.sigma * range.sigma);

    Ok(Observation::new(z, h, r, ObservationKind::V2v).expect("dimensions fixed"))
}

/// Assemble the update observation for the selected case, self rows
/// first. Returns the spec'd no-op signal as an error when there is
/// nothing to fuse.
pub fn assemble_update(
    case: UpdateCase,
    self_obs: Option<Observation>,
    neighbor_obs: Vec<Observation>,
) -> Result<Observation, V2vError> {
    let mut parts = Vec::with_capacity(1 + neighbor_obs.len());
    match case {
        UpdateCase::Case1 => {
            parts.push(self_obs.ok_or(V2vError::EmptyAssembly)?);
        }
        UpdateCase::Case2 => {
            if neighbor_obs.is_empty() {
                return Err(V2vError::EmptyAssembly);
            }
            parts.extend(neighbor_obs);
        }
        UpdateCase::Case3 => {
            parts.push(self_obs.ok_or(V2vError::EmptyAssembly)?);
            if neighbor_obs.is_empty() {
                return Err(V2vError::EmptyAssembly);
            }
            parts.extend(neighbor_obs);
        }
    }
    if parts.len() == 1 {
        return Ok(parts.pop().expect("one part"));
    }
    Ok(ekf::stack(&parts)?)
}

/// Snapshot the filter's horizontal-position belief into a beacon.
///
/// The geodetic-error block of P is mapped to NED meters with the same
/// scale factors the measurement matrices use.
pub fn emit_beacon(
    fs: &FilterState,
    nav: &NavSolution,
    origin: &GeodeticPosition,
    first_stopped: bool,
    sender: VehicleId,
) -> BeaconPacket {
    let p_ned = ned_of(&nav.position, origin);
    let (sn, se) = position_scaling(origin);
    let scale = Matrix2::new(sn, 0.0, 0.0, se);
    let p_block = Matrix2::new(
        fs.p[(POS, POS)],
        fs.p[(POS, POS + 1)],
        fs.p[(POS + 1, POS)],
        fs.p[(POS + 1, POS + 1)],
    );
    BeaconPacket {
        sender,
        timestamp: nav.timestamp,
        position: Vector2::new(p_ned.north, p_ned.east),
        pos_cov: scale * p_block * scale.transpose(),
        first_stopped,
    }
}

const WIRE_BODY_LEN: usize = 1 + 4 + 8 * 6 + 1;

/// Encode a beacon as a length-prefixed little-endian record:
/// `[len u32][version u8][sender u32][timestamp f64][pos f64 x2]
/// [cov upper-tri f64 x3][flags u8]`.
pub fn encode_beacon(beacon: &BeaconPacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + WIRE_BODY_LEN);
    out.extend_from_slice(&(WIRE_BODY_LEN as u32).to_le_bytes());
    out.push(WIRE_VERSION);
    out.extend_from_slice(&beacon.sender.to_le_bytes());
    out.extend_from_slice(&beacon.timestamp.to_le_bytes());
    out.extend_from_slice(&beacon.position.x.to_le_bytes());
    out.extend_from_slice(&beacon.position.y.to_le_bytes());
    out.extend_from_slice(&beacon.pos_cov[(0, 0)].to_le_bytes());
    out.extend_from_slice(&beacon.pos_cov[(0, 1)].to_le_bytes());
    out.extend_from_slice(&beacon.pos_cov[(1, 1)].to_le_bytes());
    out.push(u8::from(beacon.first_stopped));
    out
}

/// Decode a record produced by [`encode_beacon`].
pub fn decode_beacon(bytes: &[u8]) -> Result<BeaconPacket, V2vError> {
    if bytes.len() < 4 {
        return Err(V2vError::Wire("missing length prefix"));
    }
    let len = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    if len != WIRE_BODY_LEN || bytes.len() != 4 + len {
        return Err(V2vError::Wire("bad record length"));
    }
    let body = &bytes[4..];
    if body[0] != WIRE_VERSION {
        return Err(V2vError::Wire("unsupported version"));
    }
    let f64_at = |off: usize| f64::from_le_bytes(body[off..off + 8].try_into().expect("8 bytes"));
    let sender = u32::from_le_bytes(body[1..5].try_into().expect("4 bytes"));
    let timestamp = f64_at(5);
    let position = Vector2::new(f64_at(13), f64_at(21));
    let (c00, c01, c11) = (f64_at(29), f64_at(37), f64_at(45));
    let flags = body[53];
    Ok(BeaconPacket {
        sender,
        timestamp,
        position,
        pos_cov: Matrix2::new(c00, c01, c01, c11),
        first_stopped: flags & 1 != 0,
    })
}
