//! Geometric map matching: every GPS sample snaps to its nearest road segment.

mod index;

pub use index::{build_spatial_index, GridIndex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::model::network::SegmentGeometry;
use crate::model::{
    angular_difference, haversine_distance, AnalysisConfig, DriverId, LatLon, RoadNetwork,
    SegmentId, TrajectoryPoint, TravelDirection, Trip, TripId, EARTH_RADIUS_M,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("trip {driver_id}/{trip_id}: poor_match (matched fraction {matched_fraction:.3})")]
    PoorMatch {
        driver_id: DriverId,
        trip_id: TripId,
        matched_fraction: f64,
    },
    #[error("trip {driver_id}/{trip_id}: no point within snapping distance")]
    EmptyMatch {
        driver_id: DriverId,
        trip_id: TripId,
    },
}

impl MatchError {
    pub fn reason(&self) -> &'static str {
        match self {
            MatchError::PoorMatch { .. } => "poor_match",
            MatchError::EmptyMatch { .. } => "empty_match",
        }
    }
}

/// The closest point of a segment to a query location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snap {
    pub segment_id: SegmentId,
    pub projected: LatLon,
    /// Meters.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub point: TrajectoryPoint,
    pub segment_id: SegmentId,
    pub projected_lat: f64,
    pub projected_lon: f64,
    pub snap_distance: f64,
    pub direction_of_travel: TravelDirection,
}

impl MatchedPoint {
    pub fn projected(&self) -> LatLon {
        LatLon::new(self.projected_lat, self.projected_lon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedTrip {
    pub trip_id: TripId,
    pub driver_id: DriverId,
    /// Snapped points in input time order; unmatched samples are absent.
    pub matched: Vec<MatchedPoint>,
    pub matched_fraction: f64,
}

/// Closest point on a segment, treating it as a straight chord in an
/// equirectangular frame centered on `p`.
fn snap_to_segment(p: LatLon, g: &SegmentGeometry) -> (LatLon, f64) {
    let kx = EARTH_RADIUS_M * p.lat.to_radians().cos() * std::f64::consts::PI / 180.0;
    let ky = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    let (ax, ay) = ((g.from.lon - p.lon) * kx, (g.from.lat - p.lat) * ky);
    let (dx, dy) = ((g.to.lon - g.from.lon) * kx, (g.to.lat - g.from.lat) * ky);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (-(ax * dx + ay * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let projected = LatLon::new(
        g.from.lat + t * (g.to.lat - g.from.lat),
        g.from.lon + t * (g.to.lon - g.from.lon),
    );
    (projected, haversine_distance(p, projected))
}

fn best_of(
    network: &RoadNetwork,
    p: LatLon,
    max_snap: f64,
    positions: impl Iterator<Item = usize>,
) -> Option<Snap> {
    let geometry = network.geometry();
    let segments = network.segments();
    let mut best: Option<Snap> = None;
    for pos in positions {
        let (projected, distance) = snap_to_segment(p, &geometry[pos]);
        if distance > max_snap {
            continue;
        }
        let segment_id = segments[pos].segment_id;
        let better = match &best {
            None => true,
            Some(b) => {
                distance < b.distance || (distance == b.distance && segment_id < b.segment_id)
            }
        };
        if better {
            best = Some(Snap {
                segment_id,
                projected,
                distance,
            });
        }
    }
    best
}

/// Nearest segment within `max_snap` meters, found through the grid index.
/// Exactly equidistant candidates resolve to the lower segment id.
pub fn nearest_segment(point: LatLon, network: &RoadNetwork, max_snap: f64) -> Option<Snap> {
    let candidates = network.index().candidates(point, max_snap);
    best_of(network, point, max_snap, candidates.into_iter())
}

/// Reference implementation of [`nearest_segment`] scanning every segment.
pub fn nearest_segment_exhaustive(
    point: LatLon,
    network: &RoadNetwork,
    max_snap: f64,
) -> Option<Snap> {
    best_of(network, point, max_snap, 0..network.segments().len())
}

/// `Forward` when the course over ground points within 90 degrees of the
/// segment's `from -> to` bearing; exactly perpendicular counts as forward.
pub fn travel_direction(cog: f64, segment_bearing: f64) -> TravelDirection {
    if angular_difference(cog, segment_bearing) <= 90.0 {
        TravelDirection::Forward
    } else {
        TravelDirection::Backward
    }
}

/// Snaps every point it can and drops the rest, without any quality gate.
pub fn snap_trip(trip: &Trip, network: &RoadNetwork, max_snap: f64) -> MatchedTrip {
    let matched: Vec<MatchedPoint> = trip
        .points
        .iter()
        .filter_map(|pt| {
            let snap = nearest_segment(pt.position(), network, max_snap)?;
            let seg_bearing = network
                .segment_bearing(snap.segment_id)
                .expect("snapped segment belongs to the network");
            Some(MatchedPoint {
                point: *pt,
                segment_id: snap.segment_id,
                projected_lat: snap.projected.lat,
                projected_lon: snap.projected.lon,
                snap_distance: snap.distance,
                direction_of_travel: travel_direction(pt.direction, seg_bearing),
            })
        })
        .collect();
    let matched_fraction = if trip.points.is_empty() {
        0.0
    } else {
        matched.len() as f64 / trip.points.len() as f64
    };
    MatchedTrip {
        trip_id: trip.trip_id,
        driver_id: trip.driver_id,
        matched,
        matched_fraction,
    }
}

/// Snaps a trip and rejects it when too few of its points found a road.
pub fn match_trip(
    trip: &Trip,
    network: &RoadNetwork,
    config: &AnalysisConfig,
) -> Result<MatchedTrip, MatchError> {
    let m = snap_trip(trip, network, config.max_snap_distance);
    if m.matched.is_empty() {
        return Err(MatchError::EmptyMatch {
            driver_id: trip.driver_id,
            trip_id: trip.trip_id,
        });
    }
    if m.matched_fraction < config.min_matched_fraction {
        return Err(MatchError::PoorMatch {
            driver_id: trip.driver_id,
            trip_id: trip.trip_id,
            matched_fraction: m.matched_fraction,
        });
    }
    Ok(m)
}

pub fn match_trips(
    trips: &[Trip],
    network: &RoadNetwork,
    config: &AnalysisConfig,
    exec: Execution,
) -> Vec<Result<MatchedTrip, MatchError>> {
    exec.map(trips, |t| match_trip(t, network, config))
}
