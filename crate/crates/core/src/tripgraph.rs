//! Per-trip directed edge-attributed graphs.
//!
//! A matched trip becomes a set of directed edges keyed by
//! `(segment_id, direction_of_travel)`. Each edge carries the averaged speed
//! and heading of its points, the segment length, hard-event totals and how
//! many separate times the trip entered it.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matcher::MatchedTrip;
use crate::model::{
    circular_mean, haversine_distance, DriverId, EdgeAttributeRow, EdgeAttributedMatrix, EdgeKey,
    RoadNetwork, SegmentId, TrajectoryPoint, TripId,
};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("trip {driver_id}/{trip_id}: no matched points")]
    Empty {
        driver_id: DriverId,
        trip_id: TripId,
    },
    #[error("trip {driver_id}/{trip_id}: segment {segment_id} not in network")]
    UnknownSegment {
        driver_id: DriverId,
        trip_id: TripId,
        segment_id: SegmentId,
    },
    #[error("matrix export failed: {0}")]
    Csv(#[from] csv::Error),
}

/// Fills `hard_accel` / `hard_brake` from the speed series.
///
/// Each consecutive pair contributes one event to the later point when the
/// longitudinal acceleration reaches `accel_threshold` in magnitude. Pairs
/// without a positive time step are skipped.
pub fn detect_events(points: &[TrajectoryPoint], accel_threshold: f64) -> Vec<TrajectoryPoint> {
    let mut out: Vec<TrajectoryPoint> = points
        .iter()
        .map(|p| TrajectoryPoint {
            hard_accel: 0,
            hard_brake: 0,
            ..*p
        })
        .collect();
    for i in 1..out.len() {
        let dt = (out[i].timestamp - out[i - 1].timestamp) as f64;
        if dt <= 0.0 {
            continue;
        }
        let a = (out[i].speed - out[i - 1].speed) / dt;
        if a >= accel_threshold {
            out[i].hard_accel += 1;
        } else if a <= -accel_threshold {
            out[i].hard_brake += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripGraph {
    pub trip_id: TripId,
    pub driver_id: DriverId,
    /// Directed edges in the order the trip entered them; an edge appears
    /// once per maximal run of consecutive points on it.
    pub runs: Vec<EdgeKey>,
    /// Mean resultant length of all matched points' course over ground.
    pub heading_resultant: f64,
    /// One row per directed edge, sorted by key.
    pub matrix: EdgeAttributedMatrix,
}

impl TripGraph {
    pub fn key(&self) -> (DriverId, TripId) {
        (self.driver_id, self.trip_id)
    }

    pub fn trip_length(&self) -> f64 {
        self.matrix.trip_length
    }

    pub fn edges(&self) -> impl Iterator<Item = EdgeKey> + '_ {
        self.matrix.rows.iter().map(|r| r.key())
    }

    pub fn n_matched_points(&self) -> usize {
        self.matrix.rows.iter().map(|r| r.n_points as usize).sum()
    }
}

#[derive(Default)]
struct EdgeAccumulator {
    speed_sum: f64,
    headings: Vec<f64>,
    brakes: u32,
    accels: u32,
    traversals: u32,
}

pub fn build_trip_graph(
    matched: &MatchedTrip,
    network: &RoadNetwork,
) -> Result<TripGraph, GraphError> {
    let (driver_id, trip_id) = (matched.driver_id, matched.trip_id);
    let first = matched
        .matched
        .first()
        .ok_or(GraphError::Empty { driver_id, trip_id })?;
    let last = matched.matched.last().expect("non-empty");

    let mut edges: BTreeMap<EdgeKey, EdgeAccumulator> = BTreeMap::new();
    let mut runs: Vec<EdgeKey> = Vec::new();
    let mut trip_length = 0.0;
    for mp in &matched.matched {
        let key = EdgeKey {
            segment_id: mp.segment_id,
            direction: mp.direction_of_travel,
        };
        let acc = edges.entry(key).or_default();
        if runs.last() != Some(&key) {
            runs.push(key);
            acc.traversals += 1;
            let seg = network
                .segment(key.segment_id)
                .ok_or(GraphError::UnknownSegment {
                    driver_id,
                    trip_id,
                    segment_id: key.segment_id,
                })?;
            trip_length += seg.length;
        }
        acc.speed_sum += mp.point.speed;
        acc.headings.push(mp.point.direction);
        acc.brakes += mp.point.hard_brake;
        acc.accels += mp.point.hard_accel;
    }

    let rows = edges
        .into_iter()
        .map(|(key, acc)| {
            let n = acc.headings.len();
            EdgeAttributeRow {
                segment_id: key.segment_id,
                direction: key.direction,
                avg_speed: acc.speed_sum / n as f64,
                avg_direction: circular_mean(&acc.headings).expect("edge has points").mean,
                length: network
                    .segment(key.segment_id)
                    .expect("checked above")
                    .length,
                n_hard_brakes: acc.brakes,
                n_hard_accels: acc.accels,
                n_traversals: acc.traversals,
                n_points: n as u32,
            }
        })
        .collect();

    let headings: Vec<f64> = matched.matched.iter().map(|m| m.point.direction).collect();
    let heading_resultant = circular_mean(&headings).expect("non-empty").resultant;

    Ok(TripGraph {
        trip_id,
        driver_id,
        runs,
        heading_resultant,
        matrix: EdgeAttributedMatrix {
            trip_id,
            driver_id,
            rows,
            trip_length,
            net_displacement: haversine_distance(first.projected(), last.projected()),
        },
    })
}

/// Trips whose traveled length does not strictly exceed `alpha`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DroppedTrips(pub Vec<(DriverId, TripId)>);

/// Splits graphs into those with `trip_length > alpha` and the keys of the rest.
pub fn filter_by_min_length(graphs: Vec<TripGraph>, alpha: f64) -> (Vec<TripGraph>, DroppedTrips) {
    let (kept, dropped): (Vec<_>, Vec<_>) =
        graphs.into_iter().partition(|g| g.trip_length() > alpha);
    (
        kept,
        DroppedTrips(dropped.iter().map(TripGraph::key).collect()),
    )
}

/// Writes a trip's matrix as CSV, one row per directed edge.
pub fn write_matrix_csv<W: Write>(
    matrix: &EdgeAttributedMatrix,
    writer: W,
) -> Result<(), GraphError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "segment_id",
        "direction",
        "avg_speed_mps",
        "avg_dir_deg",
        "length_m",
        "n_brakes",
        "n_accels",
        "n_traversals",
        "n_points",
    ])?;
    for r in &matrix.rows {
        w.write_record([
            r.segment_id.to_string(),
            r.direction.sign().to_string(),
            r.avg_speed.to_string(),
            r.avg_direction.to_string(),
            r.length.to_string(),
            r.n_hard_brakes.to_string(),
            r.n_hard_accels.to_string(),
            r.n_traversals.to_string(),
            r.n_points.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
