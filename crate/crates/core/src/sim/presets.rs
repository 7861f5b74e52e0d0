//! Built-in scenario configurations.
//!
//! Both model one signalized intersection: a two-lane main road running
//! south-north (light group 0) crossed by a four-lane road running
//! west-east (group 1). They are the programmatic source of the JSON
//! files shipped under `scenarios/`.

use crate::sim::config::{LightConfig, LightPhase, OriginConfig, ScenarioConfig, VehicleConfig};
use crate::stopline::{LineCoeffs, MapEntryRecord, StopLinePrior};

fn intersection_map() -> Vec<MapEntryRecord> {
    vec![
        // Northbound approach on the main road: stop line at n = -10,
        // lane centerline (left lane line) at e = 0, lane to the east.
        MapEntryRecord {
            stop_line: LineCoeffs {
                a: 1.0,
                b: 0.0,
                c: 10.0,
            },
            lane_line: LineCoeffs {
                a: 0.0,
                b: 1.0,
                c: 0.0,
            },
            theta_deg: 0.0,
            approach_side: [-1.0, 0.0],
            lane_side: [0.0, 1.0],
            priors: StopLinePrior::default(),
        },
        // Eastbound approach on the crossing road: stop line at
        // e = -12, left lane line at n = 0, lane to the south.
        MapEntryRecord {
            stop_line: LineCoeffs {
                a: 0.0,
                b: 1.0,
                c: 12.0,
            },
            lane_line: LineCoeffs {
                a: 1.0,
                b: 0.0,
                c: 0.0,
            },
            theta_deg: 90.0,
            approach_side: [0.0, -1.0],
            lane_side: [-1.0, 0.0],
            priors: StopLinePrior::default(),
        },
    ]
}

fn base(vehicles: Vec<VehicleConfig>, duration_s: f64) -> ScenarioConfig {
    ScenarioConfig {
        origin: OriginConfig {
            lat_deg: 40.0,
            lon_deg: 116.3,
            height_m: 50.0,
        },
        map: intersection_map(),
        vehicles,
        light: LightConfig {
            red_s: 50.0,
            green_s: 40.0,
            initial: LightPhase::Red,
            offset_s: 0.0,
        },
        rates: Default::default(),
        noise: Default::default(),
        comm_range_m: 150.0,
        duration_s,
        seed: 42,
        beacon_offset_s: 0.0,
        driving: Default::default(),
        detection: Default::default(),
        link_outages: vec![],
        gnss_outages: vec![],
        fuse_all_ranges: false,
        // The simulator synthesizes no NLOS outliers; with the
        // deliberately unmodeled GNSS bias, a chi-square gate would
        // reject the anchor corrections themselves.
        v2v_gate_alpha: 0.0,
    }
}

/// Two vehicles queue at the main-road red light while a third drives
/// through on the crossing road (its light is green): the queue head
/// becomes the anchor, the follower and the passer-by benefit over V2V.
pub fn scenario1() -> ScenarioConfig {
    base(
        vec![
            VehicleConfig {
                id: 0,
                start_ned: [-1.75, -150.0],
                heading_deg: 90.0,
                cruise_mps: 6.5,
                entry: Some(1),
                road_group: 1,
                length_m: 4.5,
            },
            VehicleConfig {
                id: 1,
                start_ned: [-160.0, 1.75],
                heading_deg: 0.0,
                cruise_mps: 8.0,
                entry: Some(0),
                road_group: 0,
                length_m: 4.5,
            },
            VehicleConfig {
                id: 2,
                start_ned: [-200.0, 1.75],
                heading_deg: 0.0,
                cruise_mps: 8.0,
                entry: Some(0),
                road_group: 0,
                length_m: 4.5,
            },
        ],
        115.0,
    )
}

/// Role handoff: two vehicles queue on the main road and depart at the
/// green onset, after which a third vehicle stops at the now-red
/// crossing road and becomes the new anchor.
pub fn scenario2() -> ScenarioConfig {
    base(
        vec![
            VehicleConfig {
                id: 0,
                start_ned: [-150.0, 1.75],
                heading_deg: 0.0,
                cruise_mps: 8.0,
                entry: Some(0),
                road_group: 0,
                length_m: 4.5,
            },
            VehicleConfig {
                id: 1,
                start_ned: [-190.0, 1.75],
                heading_deg: 0.0,
                cruise_mps: 8.0,
                entry: Some(0),
                road_group: 0,
                length_m: 4.5,
            },
            VehicleConfig {
                id: 2,
                start_ned: [-1.75, -452.0],
                heading_deg: 90.0,
                cruise_mps: 8.0,
                entry: Some(1),
                road_group: 1,
                length_m: 4.5,
            },
        ],
        110.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        scenario1().validate().unwrap();
        scenario2().validate().unwrap();
    }

    #[test]
    fn presets_survive_json_round_trip() {
        for config in [scenario1(), scenario2()] {
            let json = serde_json::to_string_pretty(&config).unwrap();
            let back = ScenarioConfig::from_json(&json).unwrap();
            assert_eq!(back.vehicles.len(), config.vehicles.len());
            assert_eq!(back.seed, config.seed);
        }
    }
}
