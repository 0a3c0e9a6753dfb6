//! CSV readers and writers for road networks and trajectories.
//!
//! Network files are strict: any bad row fails the parse with its line
//! number. Trajectory files are salvaged: bad rows are counted in an
//! [`IngestReport`] and skipped.
//!
//! | file | header |
//! |------|--------|
//! | nodes | `node_id,lat,lon` |
//! | segments | `segment_id,from_node,to_node[,length_m]` |
//! | trajectories | `driver_id,trip_id,point_id,timestamp,lat,lon,speed_mps,cog_deg[,hard_accel,hard_brake]` |

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    haversine_distance, DriverId, NetworkError, RoadNetwork, RoadNode, RoadSegment,
    TrajectoryPoint, Trip, TripId,
};

/// Default inter-sample gap that starts a new trip, seconds.
pub const DEFAULT_GAP_THRESHOLD_S: i64 = 300;

const TRIP_COLUMNS: [&str; 8] = [
    "driver_id",
    "trip_id",
    "point_id",
    "timestamp",
    "lat",
    "lon",
    "speed_mps",
    "cog_deg",
];
const EVENT_COLUMNS: [&str; 2] = ["hard_accel", "hard_brake"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{file}: missing column {column}")]
    MissingColumn {
        file: &'static str,
        column: &'static str,
    },
    #[error("{file} line {line}: {message}")]
    Malformed {
        file: &'static str,
        line: u64,
        message: String,
    },
    #[error("nodes line {line}: duplicate node id {id}")]
    DuplicateNode { id: u64, line: u64 },
    #[error("segments line {line}: duplicate segment id {id}")]
    DuplicateSegment { id: u64, line: u64 },
    #[error("segments line {line}: dangling endpoint {node}")]
    DanglingEndpoint { node: u64, line: u64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MalformedRow,
    LatOutOfRange,
    LonOutOfRange,
    SpeedOutOfRange,
    DirectionOutOfRange,
    DuplicateTimestamp,
    /// The row was valid but its trip kept fewer than two points.
    TripTooShort,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MalformedRow => "malformed_row",
            RejectReason::LatOutOfRange => "lat_out_of_range",
            RejectReason::LonOutOfRange => "lon_out_of_range",
            RejectReason::SpeedOutOfRange => "speed_out_of_range",
            RejectReason::DirectionOutOfRange => "direction_out_of_range",
            RejectReason::DuplicateTimestamp => "duplicate_timestamp",
            RejectReason::TripTooShort => "trip_too_short",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub n_points_read: usize,
    pub n_points_rejected: usize,
    pub n_trips: usize,
    pub n_trips_dropped: usize,
    pub rejection_reasons: BTreeMap<RejectReason, usize>,
    /// Whether the file carried `hard_accel` / `hard_brake` columns.
    pub has_event_columns: bool,
}

impl IngestReport {
    pub fn n_points_accepted(&self) -> usize {
        self.n_points_read - self.n_points_rejected
    }

    fn reject(&mut self, reason: RejectReason, n: usize) {
        self.n_points_rejected += n;
        *self.rejection_reasons.entry(reason).or_default() += n;
    }

    pub fn count(&self, reason: RejectReason) -> usize {
        self.rejection_reasons.get(&reason).copied().unwrap_or(0)
    }
}

fn column(
    headers: &csv::StringRecord,
    file: &'static str,
    name: &'static str,
) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or(IngestError::MissingColumn { file, column: name })
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    let raw = rec
        .get(idx)
        .ok_or_else(|| format!("missing field {name}"))?;
    raw.trim()
        .parse()
        .map_err(|e| format!("field {name} = {raw:?}: {e}"))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Parses and validates a road network, building its spatial index.
pub fn parse_road_network<N: Read, S: Read>(
    nodes_source: N,
    segments_source: S,
) -> Result<RoadNetwork, IngestError> {
    let mut nodes_csv = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(nodes_source);
    let headers = nodes_csv.headers()?.clone();
    let (c_id, c_lat, c_lon) = (
        column(&headers, "nodes", "node_id")?,
        column(&headers, "nodes", "lat")?,
        column(&headers, "nodes", "lon")?,
    );
    let mut nodes = Vec::new();
    let mut node_pos: HashMap<u64, RoadNode> = HashMap::new();
    for rec in nodes_csv.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let parse = || -> Result<RoadNode, String> {
            Ok(RoadNode {
                node_id: field(&rec, c_id, "node_id")?,
                lat: field(&rec, c_lat, "lat")?,
                lon: field(&rec, c_lon, "lon")?,
            })
        };
        let node = parse().map_err(|message| IngestError::Malformed {
            file: "nodes",
            line,
            message,
        })?;
        if !node.position().is_valid() {
            return Err(IngestError::Malformed {
                file: "nodes",
                line,
                message: format!("node {} coordinates out of range", node.node_id),
            });
        }
        if node_pos.insert(node.node_id, node).is_some() {
            return Err(IngestError::DuplicateNode {
                id: node.node_id,
                line,
            });
        }
        nodes.push(node);
    }

    let mut seg_csv = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(segments_source);
    let headers = seg_csv.headers()?.clone();
    let (c_id, c_from, c_to) = (
        column(&headers, "segments", "segment_id")?,
        column(&headers, "segments", "from_node")?,
        column(&headers, "segments", "to_node")?,
    );
    let c_len = headers.iter().position(|h| h.trim() == "length_m");
    let mut segments = Vec::new();
    let mut seen = HashMap::new();
    for rec in seg_csv.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let malformed = |message: String| IngestError::Malformed {
            file: "segments",
            line,
            message,
        };
        let segment_id: u64 = field(&rec, c_id, "segment_id").map_err(malformed)?;
        let from_node: u64 = field(&rec, c_from, "from_node").map_err(malformed)?;
        let to_node: u64 = field(&rec, c_to, "to_node").map_err(malformed)?;
        if seen.insert(segment_id, line).is_some() {
            return Err(IngestError::DuplicateSegment {
                id: segment_id,
                line,
            });
        }
        let endpoint = |id: u64| {
            node_pos
                .get(&id)
                .map(|n| n.position())
                .ok_or(IngestError::DanglingEndpoint { node: id, line })
        };
        let (a, b) = (endpoint(from_node)?, endpoint(to_node)?);
        let length = match c_len.and_then(|c| rec.get(c)).map(str::trim) {
            Some(raw) if !raw.is_empty() => raw
                .parse::<f64>()
                .map_err(|e| malformed(format!("field length_m = {raw:?}: {e}")))?,
            _ => haversine_distance(a, b),
        };
        segments.push(RoadSegment {
            segment_id,
            from_node,
            to_node,
            length,
        });
    }
    Ok(RoadNetwork::new(nodes, segments)?)
}

struct RawPoint {
    driver_id: DriverId,
    trip_id: TripId,
    point: TrajectoryPoint,
}

fn parse_trip_row(
    rec: &csv::StringRecord,
    cols: &[usize; 8],
    events: Option<[usize; 2]>,
) -> Result<RawPoint, RejectReason> {
    let m = |_| RejectReason::MalformedRow;
    let driver_id: DriverId = field(rec, cols[0], "driver_id").map_err(m)?;
    let trip_id: TripId = field(rec, cols[1], "trip_id").map_err(m)?;
    let point_id: u64 = field(rec, cols[2], "point_id").map_err(m)?;
    let timestamp: i64 = field(rec, cols[3], "timestamp").map_err(m)?;
    let lat: f64 = field(rec, cols[4], "lat").map_err(m)?;
    let lon: f64 = field(rec, cols[5], "lon").map_err(m)?;
    let speed: f64 = field(rec, cols[6], "speed_mps").map_err(m)?;
    let direction: f64 = field(rec, cols[7], "cog_deg").map_err(m)?;
    let (hard_accel, hard_brake) = match events {
        Some([a, b]) => (
            field::<u32>(rec, a, "hard_accel").map_err(m)?,
            field::<u32>(rec, b, "hard_brake").map_err(m)?,
        ),
        None => (0, 0),
    };
    if !(-90.0..=90.0).contains(&lat) {
        return Err(RejectReason::LatOutOfRange);
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(RejectReason::LonOutOfRange);
    }
    if !(speed.is_finite() && speed >= 0.0) {
        return Err(RejectReason::SpeedOutOfRange);
    }
    if !(0.0..360.0).contains(&direction) {
        return Err(RejectReason::DirectionOutOfRange);
    }
    Ok(RawPoint {
        driver_id,
        trip_id,
        point: TrajectoryPoint {
            point_id,
            timestamp,
            lat,
            lon,
            speed,
            direction,
            hard_accel,
            hard_brake,
        },
    })
}

/// Parses a trajectory file into trips ordered by `(driver_id, trip_id)`.
///
/// Points are sorted by timestamp within each trip. A row repeating an
/// earlier `(driver, trip, timestamp)` is rejected. Trips left with fewer
/// than two points are dropped and their points counted as rejected.
pub fn parse_trips<R: Read>(source: R) -> Result<(Vec<Trip>, IngestReport), IngestError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let headers = reader.headers()?.clone();
    let mut cols = [0usize; 8];
    for (slot, name) in cols.iter_mut().zip(TRIP_COLUMNS) {
        *slot = column(&headers, "trajectories", name)?;
    }
    let accel = headers.iter().position(|h| h.trim() == EVENT_COLUMNS[0]);
    let brake = headers.iter().position(|h| h.trim() == EVENT_COLUMNS[1]);
    let events = match (accel, brake) {
        (Some(a), Some(b)) => Some([a, b]),
        (None, None) => None,
        (Some(_), None) => {
            return Err(IngestError::MissingColumn {
                file: "trajectories",
                column: "hard_brake",
            })
        }
        (None, Some(_)) => {
            return Err(IngestError::MissingColumn {
                file: "trajectories",
                column: "hard_accel",
            })
        }
    };

    let mut report = IngestReport {
        has_event_columns: events.is_some(),
        ..Default::default()
    };
    let mut grouped: BTreeMap<(DriverId, TripId), Vec<TrajectoryPoint>> = BTreeMap::new();
    for rec in reader.records() {
        report.n_points_read += 1;
        let parsed = match rec {
            Ok(rec) => parse_trip_row(&rec, &cols, events),
            Err(_) => Err(RejectReason::MalformedRow),
        };
        match parsed {
            Ok(raw) => grouped
                .entry((raw.driver_id, raw.trip_id))
                .or_default()
                .push(raw.point),
            Err(reason) => report.reject(reason, 1),
        }
    }

    let mut trips = Vec::with_capacity(grouped.len());
    for ((driver_id, trip_id), mut points) in grouped {
        // stable: among equal timestamps the earliest row in the file survives
        points.sort_by_key(|p| p.timestamp);
        let before = points.len();
        points.dedup_by_key(|p| p.timestamp);
        report.reject(RejectReason::DuplicateTimestamp, before - points.len());
        if points.len() < 2 {
            report.reject(RejectReason::TripTooShort, points.len());
            report.n_trips_dropped += 1;
            continue;
        }
        trips.push(Trip {
            trip_id,
            driver_id,
            points,
        });
    }
    report.n_trips = trips.len();
    Ok((trips, report))
}

/// Splits one driver's time-ordered stream wherever the sampling gap exceeds
/// `gap_threshold` seconds. Pieces shorter than two points are discarded;
/// surviving trips are numbered from 1.
pub fn segment_stream_into_trips(
    driver_id: DriverId,
    points: &[TrajectoryPoint],
    gap_threshold: i64,
) -> Vec<Trip> {
    let mut pieces: Vec<Vec<TrajectoryPoint>> = Vec::new();
    for p in points {
        match pieces.last_mut() {
            Some(cur)
                if p.timestamp - cur.last().expect("non-empty").timestamp <= gap_threshold =>
            {
                cur.push(*p)
            }
            _ => pieces.push(vec![*p]),
        }
    }
    pieces
        .into_iter()
        .filter(|p| p.len() >= 2)
        .enumerate()
        .map(|(i, points)| Trip {
            trip_id: i as TripId + 1,
            driver_id,
            points,
        })
        .collect()
}

pub fn write_trips_csv<W: Write>(
    trips: &[Trip],
    with_events: bool,
    writer: W,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = TRIP_COLUMNS.to_vec();
    if with_events {
        header.extend(EVENT_COLUMNS);
    }
    w.write_record(&header)?;
    for t in trips {
        for p in &t.points {
            let mut rec = vec![
                t.driver_id.to_string(),
                t.trip_id.to_string(),
                p.point_id.to_string(),
                p.timestamp.to_string(),
                p.lat.to_string(),
                p.lon.to_string(),
                p.speed.to_string(),
                p.direction.to_string(),
            ];
            if with_events {
                rec.push(p.hard_accel.to_string());
                rec.push(p.hard_brake.to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_network_csv<N: Write, S: Write>(
    network: &RoadNetwork,
    nodes_sink: N,
    segments_sink: S,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(nodes_sink);
    w.write_record(["node_id", "lat", "lon"])?;
    for n in network.nodes() {
        w.write_record([n.node_id.to_string(), n.lat.to_string(), n.lon.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    let mut w = csv::Writer::from_writer(segments_sink);
    w.write_record(["segment_id", "from_node", "to_node", "length_m"])?;
    for s in network.segments() {
        w.write_record([
            s.segment_id.to_string(),
            s.from_node.to_string(),
            s.to_node.to_string(),
            s.length.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
