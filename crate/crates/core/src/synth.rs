//! Deterministic synthetic cohorts on a Manhattan grid.
//!
//! A dataset is a grid road network plus drivers whose trips follow shortest
//! grid routes. Drivers picked as abnormal get loops, detours and hard-event
//! bursts injected into some of their trips; everything else only carries
//! sampling jitter and rare background events. A single ChaCha8 stream seeded
//! from [`SynthSpec::rng_seed`] drives the whole generation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{write_network_csv, write_trips_csv, IngestError};
use crate::model::{
    bearing, normalize_degrees, DriverId, LatLon, NetworkError, RoadNetwork, RoadNode, RoadSegment,
    SegmentId, TrajectoryPoint, Trip, TripId, EARTH_RADIUS_M,
};
use crate::scoring::Label;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("grid too small: {rows}x{cols} (need at least 2x2)")]
    GridTooSmall { rows: usize, cols: usize },
    #[error("grid {rows}x{cols} cannot host trips of {min} segments")]
    GridTooShortForTrips {
        rows: usize,
        cols: usize,
        min: usize,
    },
    #[error("{name} must be in [0, 1], got {value}")]
    InvalidProbability { name: &'static str, value: f64 },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("origin and destination coincide")]
    SameEndpoints,
    #[error("node {0} is not on the grid")]
    UnknownNode(u64),
    #[error("trip too short to inject {0}")]
    TripTooShort(AnomalyKind),
    #[error("no site on the route can host a {0}")]
    NoInjectionSite(AnomalyKind),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: IngestError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Loop,
    Detour,
    BrakeBurst,
    AccelBurst,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Loop => "loop",
            AnomalyKind::Detour => "detour",
            AnomalyKind::BrakeBurst => "brake_burst",
            AnomalyKind::AccelBurst => "accel_burst",
        }
    }
}

impl std::fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
    /// South-west corner of the grid.
    pub origin: LatLon,
    pub n_drivers: usize,
    pub trips_per_driver: usize,
    pub abnormal_driver_fraction: f64,
    pub loop_prob: f64,
    pub detour_prob: f64,
    pub brake_burst_prob: f64,
    pub accel_burst_prob: f64,
    pub sample_period_s: i64,
    pub base_speed_mps: f64,
    /// Half-width of the uniform per-driver offset on the base speed.
    pub driver_speed_spread_mps: f64,
    pub speed_jitter_mps: f64,
    pub heading_jitter_deg: f64,
    /// Per-point probability of a spurious hard event of each kind.
    pub background_event_prob: f64,
    /// Shortest allowed route, in segments.
    pub min_trip_segments: usize,
    pub start_timestamp: i64,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rows: 10,
            cols: 10,
            spacing_m: 500.0,
            origin: LatLon::new(26.37, -80.10),
            n_drivers: 18,
            trips_per_driver: 20,
            abnormal_driver_fraction: 3.0 / 18.0,
            loop_prob: 0.2,
            detour_prob: 0.2,
            brake_burst_prob: 0.15,
            accel_burst_prob: 0.15,
            sample_period_s: 1,
            base_speed_mps: 12.0,
            driver_speed_spread_mps: 1.0,
            speed_jitter_mps: 1.0,
            heading_jitter_deg: 3.0,
            background_event_prob: 0.001,
            min_trip_segments: 3,
            start_timestamp: 1_651_363_200,
            rng_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.rows < 2 || self.cols < 2 {
            return Err(SynthError::GridTooSmall {
                rows: self.rows,
                cols: self.cols,
            });
        }
        for (name, value) in [
            ("abnormal_driver_fraction", self.abnormal_driver_fraction),
            ("loop_prob", self.loop_prob),
            ("detour_prob", self.detour_prob),
            ("brake_burst_prob", self.brake_burst_prob),
            ("accel_burst_prob", self.accel_burst_prob),
            ("background_event_prob", self.background_event_prob),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SynthError::InvalidProbability { name, value });
            }
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.spacing_m) || !positive(self.base_speed_mps) || self.sample_period_s <= 0
        {
            return Err(SynthError::InvalidSpec(
                "spacing, base speed and sample period must be positive".into(),
            ));
        }
        if self.speed_jitter_mps < 0.0 || self.heading_jitter_deg < 0.0 {
            return Err(SynthError::InvalidSpec(
                "jitter must be non-negative".into(),
            ));
        }
        if self.min_trip_segments == 0 || self.rows + self.cols - 2 < self.min_trip_segments {
            return Err(SynthError::GridTooShortForTrips {
                rows: self.rows,
                cols: self.cols,
                min: self.min_trip_segments,
            });
        }
        Ok(())
    }

    pub fn n_abnormal_drivers(&self) -> usize {
        (self.abnormal_driver_fraction * self.n_drivers as f64).round() as usize
    }
}

/// Grid cell address: `(row, col)`, row 0 at the south edge.
type Cell = (usize, usize);

/// A road network laid out as a `rows x cols` lattice.
///
/// Node ids are `row * cols + col + 1`; east-west segments come first in id
/// order, each oriented west to east, then north-south ones oriented south to
/// north.
#[derive(Debug, Clone)]
pub struct GridNetwork {
    pub network: RoadNetwork,
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
    segment_of: BTreeMap<(u64, u64), SegmentId>,
}

impl GridNetwork {
    pub fn node_id(&self, (r, c): Cell) -> u64 {
        (r * self.cols + c + 1) as u64
    }

    pub fn cell(&self, id: u64) -> Option<Cell> {
        let i = id.checked_sub(1)? as usize;
        (i < self.rows * self.cols).then(|| (i / self.cols, i % self.cols))
    }

    pub fn position(&self, id: u64) -> LatLon {
        self.network.node(id).expect("grid node").position()
    }

    /// Segment joining two adjacent nodes, in either orientation.
    pub fn segment_between(&self, a: u64, b: u64) -> Option<SegmentId> {
        self.segment_of.get(&(a.min(b), a.max(b))).copied()
    }

    fn offset(&self, (r, c): Cell, dr: isize, dc: isize) -> Option<Cell> {
        let r = r.checked_add_signed(dr)?;
        let c = c.checked_add_signed(dc)?;
        (r < self.rows && c < self.cols).then_some((r, c))
    }
}

pub fn generate_network(spec: &SynthSpec) -> Result<GridNetwork, SynthError> {
    if spec.rows < 2 || spec.cols < 2 {
        return Err(SynthError::GridTooSmall {
            rows: spec.rows,
            cols: spec.cols,
        });
    }
    let d_lat = (spec.spacing_m / EARTH_RADIUS_M).to_degrees();
    let half_angle = (spec.spacing_m / (2.0 * EARTH_RADIUS_M)).sin();
    let id = |r: usize, c: usize| (r * spec.cols + c + 1) as u64;

    let mut nodes = Vec::with_capacity(spec.rows * spec.cols);
    for r in 0..spec.rows {
        let lat = spec.origin.lat + r as f64 * d_lat;
        // longitude step giving exactly `spacing_m` of haversine distance along this parallel
        let d_lon = (2.0 * (half_angle / lat.to_radians().cos()).asin()).to_degrees();
        for c in 0..spec.cols {
            nodes.push(RoadNode {
                node_id: id(r, c),
                lat,
                lon: spec.origin.lon + c as f64 * d_lon,
            });
        }
    }

    let mut segments = Vec::new();
    let mut segment_of = BTreeMap::new();
    let mut push = |from: u64, to: u64| {
        let segment_id = segments.len() as SegmentId + 1;
        segments.push(RoadSegment {
            segment_id,
            from_node: from,
            to_node: to,
            length: spec.spacing_m,
        });
        segment_of.insert((from.min(to), from.max(to)), segment_id);
    };
    for r in 0..spec.rows {
        for c in 0..spec.cols - 1 {
            push(id(r, c), id(r, c + 1));
        }
    }
    for c in 0..spec.cols {
        for r in 0..spec.rows - 1 {
            push(id(r, c), id(r + 1, c));
        }
    }
    Ok(GridNetwork {
        network: RoadNetwork::new(nodes, segments)?,
        rows: spec.rows,
        cols: spec.cols,
        spacing_m: spec.spacing_m,
        segment_of,
    })
}

/// Identity and pacing of one generated trip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripContext {
    pub driver_id: DriverId,
    pub trip_id: TripId,
    pub start_timestamp: i64,
    /// The driver's cruising speed before per-sample jitter.
    pub base_speed_mps: f64,
}

/// A generated trip together with the node route it was sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTrip {
    pub trip: Trip,
    pub route: Vec<u64>,
    pub context: TripContext,
    pub anomalies: Vec<AnomalyKind>,
}

impl PlannedTrip {
    pub fn n_segments(&self) -> usize {
        self.route.len().saturating_sub(1)
    }

    pub fn route_length(&self, grid: &GridNetwork) -> f64 {
        self.n_segments() as f64 * grid.spacing_m
    }

    pub fn label(&self) -> Label {
        if self.anomalies.is_empty() {
            Label::Normal
        } else {
            Label::Abnormal
        }
    }

    pub fn kind_label(&self) -> String {
        if self.anomalies.is_empty() {
            "none".to_string()
        } else {
            self.anomalies
                .iter()
                .map(|k| k.as_str())
                .collect::<Vec<_>>()
                .join("+")
        }
    }
}

/// Shortest grid route as an L: all column moves first, or all row moves
/// first when `rows_first`.
pub fn shortest_route(
    grid: &GridNetwork,
    origin: u64,
    destination: u64,
    rows_first: bool,
) -> Result<Vec<u64>, SynthError> {
    let from = grid.cell(origin).ok_or(SynthError::UnknownNode(origin))?;
    let to = grid
        .cell(destination)
        .ok_or(SynthError::UnknownNode(destination))?;
    if from == to {
        return Err(SynthError::SameEndpoints);
    }
    let mut cur = from;
    let mut route = vec![grid.node_id(cur)];
    let step_cols = |cur: &mut Cell, route: &mut Vec<u64>| {
        while cur.1 != to.1 {
            cur.1 = if to.1 > cur.1 { cur.1 + 1 } else { cur.1 - 1 };
            route.push(grid.node_id(*cur));
        }
    };
    let step_rows = |cur: &mut Cell, route: &mut Vec<u64>| {
        while cur.0 != to.0 {
            cur.0 = if to.0 > cur.0 { cur.0 + 1 } else { cur.0 - 1 };
            route.push(grid.node_id(*cur));
        }
    };
    if rows_first {
        step_rows(&mut cur, &mut route);
        step_cols(&mut cur, &mut route);
    } else {
        step_cols(&mut cur, &mut route);
        step_rows(&mut cur, &mut route);
    }
    Ok(route)
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    }
}

/// Samples GPS points along `route`, one per sample period, starting half a
/// step past the first node so no sample sits exactly on an intersection.
fn sample_route(
    grid: &GridNetwork,
    route: &[u64],
    ctx: &TripContext,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<TrajectoryPoint> {
    let positions: Vec<LatLon> = route.iter().map(|&n| grid.position(n)).collect();
    let headings: Vec<f64> = positions
        .windows(2)
        .map(|w| bearing(w[0], w[1]).expect("adjacent grid nodes differ"))
        .collect();
    let n_seg = headings.len();
    let total = n_seg as f64 * spec.spacing_m;
    let dt = spec.sample_period_s as f64;

    let mut points = Vec::new();
    let mut s = 0.5 * ctx.base_speed_mps * dt;
    let mut k = 0u64;
    while s < total {
        let j = ((s / spec.spacing_m) as usize).min(n_seg - 1);
        let frac = (s - j as f64 * spec.spacing_m) / spec.spacing_m;
        let (a, b) = (positions[j], positions[j + 1]);
        let speed = (ctx.base_speed_mps + gaussian(rng, spec.speed_jitter_mps)).max(1.0);
        let direction = normalize_degrees(headings[j] + gaussian(rng, spec.heading_jitter_deg));
        let hard_accel = rng.random_bool(spec.background_event_prob) as u32;
        let hard_brake = rng.random_bool(spec.background_event_prob) as u32;
        points.push(TrajectoryPoint {
            point_id: k + 1,
            timestamp: ctx.start_timestamp + k as i64 * spec.sample_period_s,
            lat: a.lat + frac * (b.lat - a.lat),
            lon: a.lon + frac * (b.lon - a.lon),
            speed,
            direction,
            hard_accel,
            hard_brake,
        });
        s += speed * dt;
        k += 1;
    }
    points
}

pub fn generate_normal_trip(
    grid: &GridNetwork,
    origin: u64,
    destination: u64,
    ctx: TripContext,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<PlannedTrip, SynthError> {
    let rows_first = rng.random_bool(0.5);
    let route = shortest_route(grid, origin, destination, rows_first)?;
    let points = sample_route(grid, &route, &ctx, spec, rng);
    Ok(PlannedTrip {
        trip: Trip {
            trip_id: ctx.trip_id,
            driver_id: ctx.driver_id,
            points,
        },
        route,
        context: ctx,
        anomalies: Vec::new(),
    })
}

const SIDES: [(isize, isize); 2] = [(1, 1), (-1, -1)];

fn step_of(grid: &GridNetwork, a: u64, b: u64) -> (isize, isize) {
    let (ra, ca) = grid.cell(a).expect("route node");
    let (rb, cb) = grid.cell(b).expect("route node");
    (rb as isize - ra as isize, cb as isize - ca as isize)
}

/// Route with a 4-segment rectangular circuit spliced in at a mid-route node.
/// The circuit leaves along the next route edge, so that edge is driven twice.
fn splice_loop(grid: &GridNetwork, route: &[u64], rng: &mut ChaCha8Rng) -> Option<Vec<u64>> {
    let n = route.len() - 1;
    let mut sites = Vec::new();
    for i in 1..=n.saturating_sub(2) {
        let (dr, dc) = step_of(grid, route[i], route[i + 1]);
        for (sr, sc) in SIDES {
            // perpendicular to (dr, dc)
            let side = (dc * sr, dr * sc);
            let a = grid.cell(route[i]).expect("route node");
            let b = grid.cell(route[i + 1]).expect("route node");
            if let (Some(a2), Some(b2)) = (
                grid.offset(a, side.0, side.1),
                grid.offset(b, side.0, side.1),
            ) {
                sites.push((i, grid.node_id(b2), grid.node_id(a2)));
            }
        }
    }
    let &(i, b2, a2) = sites.choose(rng)?;
    let mut out = route[..=i].to_vec();
    out.extend([route[i + 1], b2, a2, route[i]]);
    out.extend_from_slice(&route[i + 1..]);
    Some(out)
}

/// Route with one or two collinear mid-route segments shifted one block
/// sideways, adding two segments.
fn splice_detour(grid: &GridNetwork, route: &[u64], rng: &mut ChaCha8Rng) -> Option<Vec<u64>> {
    let n = route.len() - 1;
    let mut sites = Vec::new();
    for k in 1..=2usize {
        for i in 1..n {
            if i + k > n - 1 {
                break;
            }
            let dir = step_of(grid, route[i], route[i + 1]);
            if (1..k).any(|j| step_of(grid, route[i + j], route[i + j + 1]) != dir) {
                continue;
            }
            for (sr, sc) in SIDES {
                let side = (dir.1 * sr, dir.0 * sc);
                let shifted: Option<Vec<u64>> = (i..=i + k)
                    .map(|j| {
                        let cell = grid.cell(route[j]).expect("route node");
                        grid.offset(cell, side.0, side.1).map(|c| grid.node_id(c))
                    })
                    .collect();
                let Some(shifted) = shifted else { continue };
                // the shifted path must not fold back onto the neighbouring route nodes
                if shifted[0] == route[i - 1] || shifted[k] == route[i + k + 1] {
                    continue;
                }
                sites.push((i, k, shifted));
            }
        }
    }
    let (i, k, shifted) = sites.choose(rng)?.clone();
    let mut out = route[..=i].to_vec();
    out.extend(shifted);
    out.extend_from_slice(&route[i + k..]);
    Some(out)
}

fn mark_burst(points: &mut [TrajectoryPoint], kind: AnomalyKind, rng: &mut ChaCha8Rng) {
    let len = rng.random_range(5..=10usize).min(points.len());
    let start = rng.random_range(0..=points.len() - len);
    let v0 = points[start].speed;
    for (k, p) in points[start..start + len].iter_mut().enumerate() {
        let step = 4.0 * ((k % 3) + 1) as f64;
        match kind {
            AnomalyKind::BrakeBurst => {
                p.hard_brake += 1;
                p.speed = (v0 - step).max(1.0);
            }
            AnomalyKind::AccelBurst => {
                p.hard_accel += 1;
                p.speed = v0 + step;
            }
            AnomalyKind::Loop | AnomalyKind::Detour => unreachable!("route anomalies are spliced"),
        }
    }
}

/// Returns a copy of `planned` with one more anomaly of `kind`.
///
/// Loops and detours rewrite the route and resample every point; bursts
/// overwrite speeds and event flags on 5 to 10 consecutive points.
pub fn inject_anomaly(
    grid: &GridNetwork,
    planned: &PlannedTrip,
    kind: AnomalyKind,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<PlannedTrip, SynthError> {
    let mut out = planned.clone();
    match kind {
        AnomalyKind::Loop | AnomalyKind::Detour => {
            if planned.n_segments() < 3 {
                return Err(SynthError::TripTooShort(kind));
            }
            let route = match kind {
                AnomalyKind::Loop => splice_loop(grid, &planned.route, rng),
                _ => splice_detour(grid, &planned.route, rng),
            }
            .ok_or(SynthError::NoInjectionSite(kind))?;
            out.trip.points = sample_route(grid, &route, &planned.context, spec, rng);
            out.route = route;
        }
        AnomalyKind::BrakeBurst | AnomalyKind::AccelBurst => {
            if planned.trip.points.len() < 5 {
                return Err(SynthError::TripTooShort(kind));
            }
            mark_burst(&mut out.trip.points, kind, rng);
        }
    }
    out.anomalies.push(kind);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub grid: GridNetwork,
    /// Ordered by `(driver_id, trip_id)`.
    pub trips: Vec<PlannedTrip>,
    pub driver_truth: BTreeMap<DriverId, Label>,
}

/// Paths of the files written by [`SynthDataset::write_to`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub nodes: PathBuf,
    pub segments: PathBuf,
    pub trips: PathBuf,
    pub truth: PathBuf,
    pub trip_truth: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            nodes: dir.join("nodes.csv"),
            segments: dir.join("segments.csv"),
            trips: dir.join("trips.csv"),
            truth: dir.join("truth.csv"),
            trip_truth: dir.join("truth_trips.csv"),
        }
    }
}

fn random_endpoints(grid: &GridNetwork, min_segments: usize, rng: &mut ChaCha8Rng) -> (u64, u64) {
    loop {
        let a = (
            rng.random_range(0..grid.rows),
            rng.random_range(0..grid.cols),
        );
        let b = (
            rng.random_range(0..grid.rows),
            rng.random_range(0..grid.cols),
        );
        if a.0.abs_diff(b.0) + a.1.abs_diff(b.1) >= min_segments {
            return (grid.node_id(a), grid.node_id(b));
        }
    }
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let grid = generate_network(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let n_abnormal = spec.n_abnormal_drivers().min(spec.n_drivers);
    let abnormal: Vec<usize> = index::sample(&mut rng, spec.n_drivers, n_abnormal).into_vec();
    let driver_truth: BTreeMap<DriverId, Label> = (0..spec.n_drivers)
        .map(|i| {
            let label = if abnormal.contains(&i) {
                Label::Abnormal
            } else {
                Label::Normal
            };
            (i as DriverId + 1, label)
        })
        .collect();

    let mut trips = Vec::with_capacity(spec.n_drivers * spec.trips_per_driver);
    for (&driver_id, &label) in &driver_truth {
        let base_speed =
            spec.base_speed_mps + spec.driver_speed_spread_mps * (2.0 * rng.random::<f64>() - 1.0);
        for t in 0..spec.trips_per_driver {
            let (origin, destination) = random_endpoints(&grid, spec.min_trip_segments, &mut rng);
            let ctx = TripContext {
                driver_id,
                trip_id: t as TripId + 1,
                start_timestamp: spec.start_timestamp
                    + (driver_id as i64) * 30 * 86_400
                    + t as i64 * 3_600,
                base_speed_mps: base_speed,
            };
            let mut planned =
                generate_normal_trip(&grid, origin, destination, ctx, spec, &mut rng)?;
            if label.is_abnormal() {
                let wanted = [
                    (AnomalyKind::Detour, spec.detour_prob),
                    (AnomalyKind::Loop, spec.loop_prob),
                    (AnomalyKind::BrakeBurst, spec.brake_burst_prob),
                    (AnomalyKind::AccelBurst, spec.accel_burst_prob),
                ]
                .map(|(k, p)| (k, rng.random_bool(p)));
                for (kind, on) in wanted {
                    if !on {
                        continue;
                    }
                    // short routes hugging the border may have nowhere to put a detour
                    match inject_anomaly(&grid, &planned, kind, spec, &mut rng) {
                        Ok(p) => planned = p,
                        Err(SynthError::NoInjectionSite(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
            trips.push(planned);
        }
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        grid,
        trips,
        driver_truth,
    })
}

impl SynthDataset {
    pub fn trip_list(&self) -> Vec<Trip> {
        self.trips.iter().map(|p| p.trip.clone()).collect()
    }

    pub fn write_to(&self, dir: &Path) -> Result<DatasetPaths, SynthError> {
        std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let paths = DatasetPaths::in_dir(dir);
        let create = |path: &Path| {
            File::create(path)
                .map(BufWriter::new)
                .map_err(|source| SynthError::Io {
                    path: path.to_path_buf(),
                    source,
                })
        };
        let written = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SynthError::Write { path, source }
        };

        write_network_csv(
            &self.grid.network,
            create(&paths.nodes)?,
            create(&paths.segments)?,
        )
        .map_err(written(&paths.nodes))?;
        write_trips_csv(&self.trip_list(), true, create(&paths.trips)?)
            .map_err(written(&paths.trips))?;

        let csv_err = |path: &Path| {
            let path = path.to_path_buf();
            move |e: csv::Error| SynthError::Write {
                path,
                source: IngestError::Csv(e),
            }
        };
        let mut w = csv::Writer::from_writer(create(&paths.truth)?);
        w.write_record(["driver_id", "label"])
            .map_err(csv_err(&paths.truth))?;
        for (id, label) in &self.driver_truth {
            w.write_record([id.to_string(), label.to_string()])
                .map_err(csv_err(&paths.truth))?;
        }
        w.flush().map_err(|source| SynthError::Io {
            path: paths.truth.clone(),
            source,
        })?;

        let mut w = csv::Writer::from_writer(create(&paths.trip_truth)?);
        w.write_record(["driver_id", "trip_id", "label", "kind"])
            .map_err(csv_err(&paths.trip_truth))?;
        for p in &self.trips {
            w.write_record([
                p.trip.driver_id.to_string(),
                p.trip.trip_id.to_string(),
                p.label().to_string(),
                p.kind_label(),
            ])
            .map_err(csv_err(&paths.trip_truth))?;
        }
        w.flush().map_err(|source| SynthError::Io {
            path: paths.trip_truth.clone(),
            source,
        })?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::haversine_distance;

    fn spec() -> SynthSpec {
        SynthSpec {
            rng_seed: 3,
            ..Default::default()
        }
    }

    fn ctx() -> TripContext {
        TripContext {
            driver_id: 1,
            trip_id: 1,
            start_timestamp: 0,
            base_speed_mps: 12.0,
        }
    }

    #[test]
    fn grid_counts() {
        for (r, c, n_seg) in [(3, 3, 12), (2, 2, 4), (10, 10, 180)] {
            let g = generate_network(&SynthSpec {
                rows: r,
                cols: c,
                ..spec()
            })
            .unwrap();
            assert_eq!(g.network.nodes().len(), r * c);
            assert_eq!(g.network.segments().len(), n_seg);
        }
        assert!(matches!(
            generate_network(&SynthSpec { rows: 1, ..spec() }),
            Err(SynthError::GridTooSmall { .. })
        ));
    }

    #[test]
    fn segment_lengths_match_spacing() {
        let g = generate_network(&spec()).unwrap();
        for s in g.network.segments() {
            let a = g.position(s.from_node);
            let b = g.position(s.to_node);
            assert!((haversine_distance(a, b) - 500.0).abs() < 0.5);
            assert_eq!(s.length, 500.0);
        }
    }

    #[test]
    fn adjacent_trip_has_about_42_points() {
        let s = spec();
        let g = generate_network(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = generate_normal_trip(&g, 1, 2, ctx(), &s, &mut rng).unwrap();
        let n = p.trip.points.len();
        assert!((38..=46).contains(&n), "{n}");
        assert!(p
            .trip
            .points
            .windows(2)
            .all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn trips_are_deterministic() {
        let s = spec();
        let g = generate_network(&s).unwrap();
        let gen = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            generate_normal_trip(&g, 1, 57, ctx(), &s, &mut rng).unwrap()
        };
        assert_eq!(gen(5), gen(5));
        assert_ne!(gen(5).trip.points, gen(6).trip.points);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            generate_normal_trip(&g, 4, 4, ctx(), &s, &mut rng),
            Err(SynthError::SameEndpoints)
        ));
    }

    fn ten_segment_trip(g: &GridNetwork, s: &SynthSpec, rng: &mut ChaCha8Rng) -> PlannedTrip {
        // (1,1) -> (6,6)
        generate_normal_trip(g, g.node_id((1, 1)), g.node_id((6, 6)), ctx(), s, rng).unwrap()
    }

    fn route_is_connected(g: &GridNetwork, route: &[u64]) -> bool {
        route
            .windows(2)
            .all(|w| g.segment_between(w[0], w[1]).is_some())
    }

    #[test]
    fn loop_adds_four_segments_and_repeats_an_edge() {
        let s = spec();
        let g = generate_network(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = ten_segment_trip(&g, &s, &mut rng);
        assert_eq!(base.n_segments(), 10);
        let looped = inject_anomaly(&g, &base, AnomalyKind::Loop, &s, &mut rng).unwrap();
        assert_eq!(looped.n_segments(), 14);
        assert!((looped.route_length(&g) - base.route_length(&g) - 2000.0).abs() < 1e-9);
        assert!(route_is_connected(&g, &looped.route));
        let directed: Vec<(u64, u64)> = looped.route.windows(2).map(|w| (w[0], w[1])).collect();
        let repeated = directed
            .iter()
            .any(|e| directed.iter().filter(|x| *x == e).count() >= 2);
        assert!(repeated);
        assert_eq!(looped.route.first(), base.route.first());
        assert_eq!(looped.route.last(), base.route.last());
    }

    #[test]
    fn detour_is_longer_between_same_endpoints() {
        let s = spec();
        let g = generate_network(&s).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = ten_segment_trip(&g, &s, &mut rng);
            let d = inject_anomaly(&g, &base, AnomalyKind::Detour, &s, &mut rng).unwrap();
            assert!(d.route_length(&g) >= base.route_length(&g) + s.spacing_m);
            assert!(route_is_connected(&g, &d.route));
            assert_eq!(d.route.first(), base.route.first());
            assert_eq!(d.route.last(), base.route.last());
            // no immediate U-turns
            assert!(d.route.windows(3).all(|w| w[0] != w[2]));
        }
    }

    #[test]
    fn bursts_mark_events() {
        let s = spec();
        let g = generate_network(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = ten_segment_trip(&g, &s, &mut rng);
        let count = |p: &PlannedTrip, f: fn(&TrajectoryPoint) -> u32| -> u32 {
            p.trip.points.iter().map(f).sum()
        };
        let b = inject_anomaly(&g, &base, AnomalyKind::BrakeBurst, &s, &mut rng).unwrap();
        assert!(count(&b, |p| p.hard_brake) >= count(&base, |p| p.hard_brake) + 5);
        let a = inject_anomaly(&g, &base, AnomalyKind::AccelBurst, &s, &mut rng).unwrap();
        assert!(count(&a, |p| p.hard_accel) >= 5);
        assert_eq!(a.kind_label(), "accel_burst");
    }

    #[test]
    fn short_trip_refuses_route_anomalies() {
        let s = spec();
        let g = generate_network(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = generate_normal_trip(&g, 1, 3, ctx(), &s, &mut rng).unwrap();
        let err = inject_anomaly(&g, &base, AnomalyKind::Loop, &s, &mut rng).unwrap_err();
        assert_eq!(err.to_string(), "trip too short to inject loop");
    }

    #[test]
    fn default_cohort_shape() {
        let d = generate_dataset(&spec()).unwrap();
        assert_eq!(d.driver_truth.len(), 18);
        assert_eq!(d.trips.len(), 360);
        assert_eq!(
            d.driver_truth.values().filter(|l| l.is_abnormal()).count(),
            3
        );
        for p in &d.trips {
            if d.driver_truth[&p.trip.driver_id] == Label::Normal {
                assert!(p.anomalies.is_empty());
            }
        }
        let injected = d.trips.iter().filter(|p| !p.anomalies.is_empty()).count();
        assert!((15..=45).contains(&injected), "{injected}");
    }

    #[test]
    fn zero_abnormal_fraction() {
        let d = generate_dataset(&SynthSpec {
            abnormal_driver_fraction: 0.0,
            n_drivers: 4,
            trips_per_driver: 2,
            ..spec()
        })
        .unwrap();
        assert!(d.driver_truth.values().all(|l| *l == Label::Normal));
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec {
            loop_prob: 1.5,
            ..spec()
        }
        .validate()
        .is_err());
        assert!(matches!(
            SynthSpec {
                rows: 2,
                cols: 2,
                ..spec()
            }
            .validate(),
            Err(SynthError::GridTooShortForTrips { .. })
        ));
    }
}
