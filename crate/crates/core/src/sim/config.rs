//! Scenario configuration: JSON schema, defaults, and validation.
//!
//! Validation reports the JSON path of the offending field so the CLI
//! can print actionable diagnostics. Parse-level errors (malformed
//! JSON, wrong types) carry serde_json's line/column.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::GeodeticPosition;
use crate::stopline::{MapEntryRecord, StopLineMapEntry};
use crate::v2v::VehicleId;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config field `{path}`: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub origin: OriginConfig,
    /// Stop-line map entries (same schema as a standalone map file).
    pub map: Vec<MapEntryRecord>,
    pub vehicles: Vec<VehicleConfig>,
    pub light: LightConfig,
    #[serde(default)]
    pub rates: RateConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "default_comm_range")]
    pub comm_range_m: f64,
    pub duration_s: f64,
    pub seed: u64,
    /// Offset of the beacon schedule relative to the GNSS epochs, s.
    /// Zero makes beacons share GNSS ticks (Case 3 when neighbors are
    /// in range); half a beacon period forces Case 2 updates.
    #[serde(default)]
    pub beacon_offset_s: f64,
    #[serde(default)]
    pub driving: DrivingConfig,
    #[serde(default)]
    pub detection: DetectionConfig,
    /// Scripted V2V link outages, on top of the comm-range gate.
    #[serde(default)]
    pub link_outages: Vec<LinkOutage>,
    /// Scripted GNSS outages (no fixes inside the window).
    #[serde(default)]
    pub gnss_outages: Vec<GnssOutage>,
    /// Fuse a V2V update on every range event instead of decimating to
    /// beacon arrivals.
    #[serde(default)]
    pub fuse_all_ranges: bool,
    /// Tail probability of the V2V innovation gate; 0 disables gating.
    #[serde(default = "default_gate_alpha")]
    pub v2v_gate_alpha: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OriginConfig {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub height_m: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleConfig {
    pub id: VehicleId,
    /// Start position in the local NED horizontal plane, meters.
    pub start_ned: [f64; 2],
    /// Direction of travel, degrees clockwise from north.
    pub heading_deg: f64,
    pub cruise_mps: f64,
    /// Index of the stop-line map entry governing this vehicle's
    /// approach; absent for vehicles that never meet a stop line.
    #[serde(default)]
    pub entry: Option<usize>,
    /// Traffic-light group this vehicle obeys (0 or 1).
    #[serde(default)]
    pub road_group: u8,
    #[serde(default = "default_vehicle_length")]
    pub length_m: f64,
}

/// Two-group signal: group 0 alternates red/green with the given
/// durations, group 1 shows the opposite color.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LightConfig {
    pub red_s: f64,
    pub green_s: f64,
    /// Group-0 phase at t = 0.
    #[serde(default = "default_initial_phase")]
    pub initial: LightPhase,
    /// Time already spent in the initial phase at t = 0.
    #[serde(default)]
    pub offset_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightPhase {
    Red,
    Green,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateConfig {
    pub imu_hz: u32,
    pub gnss_hz: u32,
    pub beacon_hz: u32,
    pub range_hz: u32,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            imu_hz: 100,
            gnss_hz: 5,
            beacon_hz: 5,
            range_hz: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// GNSS white position noise per NED axis, m.
    pub gnss_pos_sigma_m: f64,
    /// GNSS white velocity noise per axis, m/s.
    pub gnss_vel_sigma_mps: f64,
    /// Stationary sigma of the slowly varying GNSS position bias per
    /// horizontal axis (first-order Gauss-Markov), m.
    pub gnss_bias_sigma_m: f64,
    pub gnss_bias_tau_s: f64,
    /// Fraction of the bias VARIANCE common to all vehicles
    /// (atmosphere/ephemeris and shared sky view); the rest is drawn
    /// per vehicle (multipath). Inter-vehicle ranging cannot observe
    /// the common part; an absolute reference can.
    pub gnss_bias_common_fraction: f64,
    /// Gyro angle-random-walk density, rad/sqrt(s).
    pub gyro_arw: f64,
    /// Accelerometer velocity-random-walk density, m/s/sqrt(s).
    pub accel_vrw: f64,
    /// Random-constant gyro bias draw sigma, rad/s.
    pub gyro_bias_sigma: f64,
    /// Random-constant accel bias draw sigma, m/s^2.
    pub accel_bias_sigma: f64,
    /// Inter-vehicle ranging noise sigma, m.
    pub sigma_v2v_m: f64,
    /// Initial estimate error draws (also the filter's initial sigmas).
    pub init_pos_sigma_m: f64,
    pub init_vel_sigma_mps: f64,
    pub init_att_sigma_rad: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gnss_pos_sigma_m: 0.5,
            gnss_vel_sigma_mps: 0.1,
            gnss_bias_sigma_m: 3.0,
            gnss_bias_tau_s: 60.0,
            gnss_bias_common_fraction: 0.5,
            // Automotive-grade MEMS: 0.3 deg/sqrt(h), 0.05 m/s/sqrt(h).
            gyro_arw: 0.3f64 * std::f64::consts::PI / 180.0 / 60.0,
            accel_vrw: 0.05 / 60.0,
            gyro_bias_sigma: 0.01f64 * std::f64::consts::PI / 180.0,
            accel_bias_sigma: 0.02,
            sigma_v2v_m: 0.1,
            init_pos_sigma_m: 1.0,
            init_vel_sigma_mps: 0.1,
            init_att_sigma_rad: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DrivingConfig {
    pub queue_gap_m: f64,
    /// Deceleration the braking plan aims for, m/s^2.
    pub comfort_decel: f64,
    /// Hard limit; a stop needing more is a config error.
    pub max_decel: f64,
    pub depart_accel: f64,
    /// Extra start delay per queue position, s.
    pub depart_headway_s: f64,
    /// Reaction delay of the queue head after the green onset, s.
    pub reaction_s: f64,
}

impl Default for DrivingConfig {
    fn default() -> Self {
        Self {
            queue_gap_m: 2.0,
            comfort_decel: 2.0,
            max_decel: 3.0,
            depart_accel: 2.0,
            depart_headway_s: 1.5,
            reaction_s: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub v_stop_mps: f64,
    pub d_gate_m: f64,
    /// Beacon/range pairing staleness bound, s.
    pub staleness_s: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            v_stop_mps: crate::stopline::DEFAULT_V_STOP,
            d_gate_m: crate::stopline::DEFAULT_D_GATE,
            staleness_s: crate::v2v::DEFAULT_STALENESS,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinkOutage {
    pub a: VehicleId,
    pub b: VehicleId,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GnssOutage {
    pub vehicle: VehicleId,
    pub start_s: f64,
    pub end_s: f64,
}

fn default_comm_range() -> f64 {
    150.0
}

fn default_vehicle_length() -> f64 {
    4.5
}

fn default_initial_phase() -> LightPhase {
    LightPhase::Red
}

fn default_gate_alpha() -> f64 {
    crate::ekf::DEFAULT_GATE_ALPHA
}

impl ScenarioConfig {
    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        let config: ScenarioConfig =
            serde_json::from_str(json).map_err(|e| ConfigError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn origin_position(&self) -> Result<GeodeticPosition, ConfigError> {
        GeodeticPosition::from_degrees(
            self.origin.lat_deg,
            self.origin.lon_deg,
            self.origin.height_m,
        )
        .map_err(|e| ConfigError::invalid("origin", e.to_string()))
    }

    /// Build and validate the stop-line map entries.
    pub fn map_entries(&self) -> Result<Vec<StopLineMapEntry>, ConfigError> {
        self.map
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                rec.build()
                    .map_err(|e| ConfigError::invalid(format!("map[{i}]"), e.to_string()))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.origin_position()?;
        let entries = self.map_entries()?;

        if self.vehicles.is_empty() {
            return Err(ConfigError::invalid(
                "vehicles",
                "at least one vehicle required",
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, v) in self.vehicles.iter().enumerate() {
            let path = |f: &str| format!("vehicles[{i}].{f}");
            if !seen.insert(v.id) {
                return Err(ConfigError::invalid(path("id"), "duplicate vehicle id"));
            }
            if !(v.cruise_mps > 0.0) {
                return Err(ConfigError::invalid(path("cruise_mps"), "must be > 0"));
            }
            if !(v.length_m > 0.0) {
                return Err(ConfigError::invalid(path("length_m"), "must be > 0"));
            }
            if v.road_group > 1 {
                return Err(ConfigError::invalid(path("road_group"), "must be 0 or 1"));
            }
            if let Some(e) = v.entry {
                if e >= entries.len() {
                    return Err(ConfigError::invalid(
                        path("entry"),
                        format!("index {e} out of range ({} map entries)", entries.len()),
                    ));
                }
            }
        }

        for (name, hz) in [
            ("rates.imu_hz", self.rates.imu_hz),
            ("rates.gnss_hz", self.rates.gnss_hz),
            ("rates.beacon_hz", self.rates.beacon_hz),
            ("rates.range_hz", self.rates.range_hz),
        ] {
            if hz == 0 {
                return Err(ConfigError::invalid(name, "rate must be > 0 Hz"));
            }
        }
        if self.rates.imu_hz < self.rates.gnss_hz {
            return Err(ConfigError::invalid("rates.imu_hz", "must be >= gnss_hz"));
        }

        if !(self.comm_range_m > 0.0) {
            return Err(ConfigError::invalid("comm_range_m", "must be > 0"));
        }
        if !(self.duration_s > 0.0) {
            return Err(ConfigError::invalid("duration_s", "must be > 0"));
        }
        if !(self.light.red_s > 0.0 && self.light.green_s > 0.0) {
            return Err(ConfigError::invalid("light", "phase durations must be > 0"));
        }
        if self.light.offset_s < 0.0 {
            return Err(ConfigError::invalid("light.offset_s", "must be >= 0"));
        }

        let n = &self.noise;
        for (name, v) in [
            ("noise.gnss_pos_sigma_m", n.gnss_pos_sigma_m),
            ("noise.gnss_vel_sigma_mps", n.gnss_vel_sigma_mps),
            ("noise.gnss_bias_sigma_m", n.gnss_bias_sigma_m),
            ("noise.gyro_arw", n.gyro_arw),
            ("noise.accel_vrw", n.accel_vrw),
            ("noise.gyro_bias_sigma", n.gyro_bias_sigma),
            ("noise.accel_bias_sigma", n.accel_bias_sigma),
            ("noise.sigma_v2v_m", n.sigma_v2v_m),
            ("noise.init_pos_sigma_m", n.init_pos_sigma_m),
            ("noise.init_vel_sigma_mps", n.init_vel_sigma_mps),
            ("noise.init_att_sigma_rad", n.init_att_sigma_rad),
        ] {
            if v < 0.0 {
                return Err(ConfigError::invalid(name, "must be >= 0"));
            }
        }
        if !(n.gnss_bias_tau_s > 0.0) {
            return Err(ConfigError::invalid("noise.gnss_bias_tau_s", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&n.gnss_bias_common_fraction) {
            return Err(ConfigError::invalid(
                "noise.gnss_bias_common_fraction",
                "must be in [0, 1]",
            ));
        }

        let d = &self.driving;
        if !(d.comfort_decel > 0.0 && d.max_decel >= d.comfort_decel) {
            return Err(ConfigError::invalid(
                "driving",
                "need 0 < comfort_decel <= max_decel",
            ));
        }
        if !(d.depart_accel > 0.0) {
            return Err(ConfigError::invalid("driving.depart_accel", "must be > 0"));
        }
        if d.queue_gap_m < 0.0 {
            return Err(ConfigError::invalid("driving.queue_gap_m", "must be >= 0"));
        }

        for (i, o) in self.link_outages.iter().enumerate() {
            if o.end_s <= o.start_s {
                return Err(ConfigError::invalid(
                    format!("link_outages[{i}]"),
                    "end_s must exceed start_s",
                ));
            }
        }
        for (i, o) in self.gnss_outages.iter().enumerate() {
            if o.end_s <= o.start_s {
                return Err(ConfigError::invalid(
                    format!("gnss_outages[{i}]"),
                    "end_s must exceed start_s",
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.v2v_gate_alpha) {
            return Err(ConfigError::invalid("v2v_gate_alpha", "must be in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal_json() -> String {
        r#"{
            "origin": {"lat_deg": 40.0, "lon_deg": 116.3, "height_m": 50.0},
            "map": [{
                "stop_line": {"a": 1.0, "b": 0.0, "c": 10.0},
                "lane_line": {"a": 0.0, "b": 1.0, "c": 0.0},
                "theta_deg": 0.0,
                "approach_side": [-1.0, 0.0],
                "lane_side": [0.0, 1.0],
                "priors": {"m_xb": 1.0, "sigma_xb": 0.5, "m_yb": 1.75, "sigma_yb": 0.3, "l0": 1.5}
            }],
            "vehicles": [
                {"id": 1, "start_ned": [-160.0, 1.75], "heading_deg": 0.0, "cruise_mps": 8.0, "entry": 0, "road_group": 0}
            ],
            "light": {"red_s": 50.0, "green_s": 40.0},
            "duration_s": 90.0,
            "seed": 42
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ScenarioConfig::from_json(&minimal_json()).unwrap();
        assert_eq!(c.rates.imu_hz, 100);
        assert_eq!(c.comm_range_m, 150.0);
        assert_eq!(c.vehicles[0].length_m, 4.5);
        assert!(!c.fuse_all_ranges);
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = ScenarioConfig::from_json("{ \"origin\": }").unwrap_err();
        match err {
            ConfigError::Parse { line, column, .. } => {
                assert_eq!(line, 1);
                assert!(column > 0);
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let json = minimal_json().replace("\"cruise_mps\": 8.0", "\"cruise_mps\": -1.0");
        let err = ScenarioConfig::from_json(&json).unwrap_err();
        match err {
            ConfigError::Invalid { path, .. } => assert_eq!(path, "vehicles[0].cruise_mps"),
            other => panic!("expected invalid-field error, got {other}"),
        }
    }

    #[test]
    fn out_of_range_entry_index_rejected() {
        let json = minimal_json().replace("\"entry\": 0", "\"entry\": 3");
        assert!(ScenarioConfig::from_json(&json).is_err());
    }

    #[test]
    fn zero_rate_rejected() {
        let mut c = ScenarioConfig::from_json(&minimal_json()).unwrap();
        c.rates.gnss_hz = 0;
        assert!(c.validate().is_err());
    }
}
