//! Domain types shared across the pipeline.

mod config;
pub mod geo;
pub(crate) mod network;

pub use config::{AnalysisConfig, ConfigError};
pub use geo::{
    angular_difference, bearing, circular_mean, destination, haversine_distance, normalize_degrees,
    CircularMean, GeoError, LatLon, EARTH_RADIUS_M,
};
pub use network::{NetworkError, RoadNetwork, RoadNode, RoadSegment, SegmentId};

use serde::{Deserialize, Serialize};

pub type DriverId = u64;
pub type TripId = u64;

/// One timestamped GPS/telematics sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub point_id: u64,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    /// Meters per second.
    pub speed: f64,
    /// Course over ground, degrees clockwise from north in `[0, 360)`.
    pub direction: f64,
    pub hard_accel: u32,
    pub hard_brake: u32,
}

impl TrajectoryPoint {
    pub fn position(&self) -> LatLon {
        LatLon::new(self.lat, self.lon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub trip_id: TripId,
    pub driver_id: DriverId,
    /// Strictly increasing timestamps, at least two points.
    pub points: Vec<TrajectoryPoint>,
}

impl Trip {
    pub fn key(&self) -> (DriverId, TripId) {
        (self.driver_id, self.trip_id)
    }
}

/// Which way a vehicle moved along a segment relative to its `from -> to` orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TravelDirection {
    Backward,
    Forward,
}

impl TravelDirection {
    pub fn sign(self) -> i8 {
        match self {
            TravelDirection::Forward => 1,
            TravelDirection::Backward => -1,
        }
    }

    pub fn from_sign(sign: i64) -> Option<Self> {
        match sign {
            1 => Some(TravelDirection::Forward),
            -1 => Some(TravelDirection::Backward),
            _ => None,
        }
    }
}

/// Directed edge of a trip graph: a road segment traversed in one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeKey {
    pub segment_id: SegmentId,
    pub direction: TravelDirection,
}

/// Driving attributes aggregated over one directed edge of a trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeAttributeRow {
    pub segment_id: SegmentId,
    pub direction: TravelDirection,
    pub avg_speed: f64,
    /// Circular mean of the course over ground of the edge's points.
    pub avg_direction: f64,
    /// Length of the road segment itself; multiplicity lives in `n_traversals`.
    pub length: f64,
    pub n_hard_brakes: u32,
    pub n_hard_accels: u32,
    pub n_traversals: u32,
    pub n_points: u32,
}

impl EdgeAttributeRow {
    pub fn key(&self) -> EdgeKey {
        EdgeKey {
            segment_id: self.segment_id,
            direction: self.direction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeAttributedMatrix {
    pub trip_id: TripId,
    pub driver_id: DriverId,
    pub rows: Vec<EdgeAttributeRow>,
    /// Road distance over all traversal runs, repeats included.
    pub trip_length: f64,
    /// Great-circle distance between the first and last matched positions.
    pub net_displacement: f64,
}
