//! Fixed-length trip descriptors built from edge-attributed matrices.
//!
//! Ten dimensions grouped by the behavior they describe:
//!
//! | # | name | group |
//! |---|------|-------|
//! | 1 | `displacement_ratio` | direction |
//! | 2 | `repetition_ratio` | direction |
//! | 3 | `revisited_edge_fraction` | direction |
//! | 4 | `turn_density` | direction |
//! | 5 | `direction_circular_variance` | direction |
//! | 6 | `brakes_per_km` | braking |
//! | 7 | `max_edge_brakes` | braking |
//! | 8 | `accels_per_km` | acceleration |
//! | 9 | `max_edge_accels` | acceleration |
//! | 10 | `mean_speed` | speed |

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::model::{angular_difference, DriverId, EdgeKey, TripId};
use crate::tripgraph::TripGraph;

pub const N_FEATURES: usize = 10;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "displacement_ratio",
    "repetition_ratio",
    "revisited_edge_fraction",
    "turn_density",
    "direction_circular_variance",
    "brakes_per_km",
    "max_edge_brakes",
    "accels_per_km",
    "max_edge_accels",
    "mean_speed",
];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("trip {driver_id}/{trip_id}: degenerate trip (zero length or no edges)")]
    DegenerateTrip {
        driver_id: DriverId,
        trip_id: TripId,
    },
    #[error("duplicate trip key {driver_id}/{trip_id}")]
    DuplicateTripKey {
        driver_id: DriverId,
        trip_id: TripId,
    },
    #[error("feature table line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub displacement_ratio: f64,
    pub repetition_ratio: f64,
    pub revisited_edge_fraction: f64,
    pub turn_density: f64,
    pub direction_circular_variance: f64,
    pub brakes_per_km: f64,
    pub max_edge_brakes: f64,
    pub accels_per_km: f64,
    pub max_edge_accels: f64,
    pub mean_speed: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [
            self.displacement_ratio,
            self.repetition_ratio,
            self.revisited_edge_fraction,
            self.turn_density,
            self.direction_circular_variance,
            self.brakes_per_km,
            self.max_edge_brakes,
            self.accels_per_km,
            self.max_edge_accels,
            self.mean_speed,
        ]
    }

    pub fn from_array(v: [f64; N_FEATURES]) -> Self {
        Self {
            displacement_ratio: v[0],
            repetition_ratio: v[1],
            revisited_edge_fraction: v[2],
            turn_density: v[3],
            direction_circular_variance: v[4],
            brakes_per_km: v[5],
            max_edge_brakes: v[6],
            accels_per_km: v[7],
            max_edge_accels: v[8],
            mean_speed: v[9],
        }
    }
}

/// Behavior category of a feature dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    Direction,
    Braking,
    Acceleration,
    Speed,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 4] = [
        FeatureGroup::Direction,
        FeatureGroup::Braking,
        FeatureGroup::Acceleration,
        FeatureGroup::Speed,
    ];

    /// Zero-based feature indices belonging to the group.
    pub fn dims(self) -> &'static [usize] {
        match self {
            FeatureGroup::Direction => &[0, 1, 2, 3, 4],
            FeatureGroup::Braking => &[5, 6],
            FeatureGroup::Acceleration => &[7, 8],
            FeatureGroup::Speed => &[9],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::Direction => "direction",
            FeatureGroup::Braking => "braking",
            FeatureGroup::Acceleration => "acceleration",
            FeatureGroup::Speed => "speed",
        }
    }

    /// Position in [`FeatureGroup::ALL`], starting at 1.
    pub fn ordinal(self) -> u64 {
        match self {
            FeatureGroup::Direction => 1,
            FeatureGroup::Braking => 2,
            FeatureGroup::Acceleration => 3,
            FeatureGroup::Speed => 4,
        }
    }
}

pub fn extract_features(graph: &TripGraph) -> Result<FeatureVector, FeatureError> {
    let m = &graph.matrix;
    let degenerate = FeatureError::DegenerateTrip {
        driver_id: graph.driver_id,
        trip_id: graph.trip_id,
    };
    if m.rows.is_empty() || m.trip_length.is_nan() || m.trip_length <= 0.0 {
        return Err(degenerate);
    }
    let km = m.trip_length / 1000.0;
    let n_rows = m.rows.len() as f64;

    let traversals: u32 = m.rows.iter().map(|r| r.n_traversals).sum();
    let revisited = m.rows.iter().filter(|r| r.n_traversals >= 2).count();

    let heading_of: HashMap<EdgeKey, f64> =
        m.rows.iter().map(|r| (r.key(), r.avg_direction)).collect();
    let total_turn: f64 = graph
        .runs
        .windows(2)
        .map(|w| angular_difference(heading_of[&w[0]], heading_of[&w[1]]))
        .sum();

    let brakes: u32 = m.rows.iter().map(|r| r.n_hard_brakes).sum();
    let accels: u32 = m.rows.iter().map(|r| r.n_hard_accels).sum();
    let n_points: u32 = m.rows.iter().map(|r| r.n_points).sum();
    let weighted_speed: f64 = m.rows.iter().map(|r| r.avg_speed * r.n_points as f64).sum();

    Ok(FeatureVector {
        // segment-granular lengths can undercount partial traversals
        displacement_ratio: (m.net_displacement / m.trip_length).clamp(0.0, 1.0),
        repetition_ratio: traversals as f64 / n_rows,
        revisited_edge_fraction: revisited as f64 / n_rows,
        turn_density: total_turn / km,
        direction_circular_variance: (1.0 - graph.heading_resultant).clamp(0.0, 1.0),
        brakes_per_km: brakes as f64 / km,
        max_edge_brakes: m.rows.iter().map(|r| r.n_hard_brakes).max().unwrap_or(0) as f64,
        accels_per_km: accels as f64 / km,
        max_edge_accels: m.rows.iter().map(|r| r.n_hard_accels).max().unwrap_or(0) as f64,
        mean_speed: if n_points > 0 {
            weighted_speed / n_points as f64
        } else {
            0.0
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub driver_id: DriverId,
    pub trip_id: TripId,
    pub features: FeatureVector,
}

/// Feature vectors ordered by `(driver_id, trip_id)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn from_rows(mut rows: Vec<FeatureRow>) -> Result<Self, FeatureError> {
        rows.sort_by_key(|r| (r.driver_id, r.trip_id));
        if let Some(w) = rows
            .windows(2)
            .find(|w| (w[0].driver_id, w[0].trip_id) == (w[1].driver_id, w[1].trip_id))
        {
            return Err(FeatureError::DuplicateTripKey {
                driver_id: w[0].driver_id,
                trip_id: w[0].trip_id,
            });
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn matrix(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.features.to_array().to_vec())
            .collect()
    }

    /// Only the columns of `group`, row by row.
    pub fn group_matrix(&self, group: FeatureGroup) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let all = r.features.to_array();
                group.dims().iter().map(|&d| all[d]).collect()
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FeatureError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["driver_id", "trip_id"];
        header.extend(FEATURE_NAMES);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.driver_id.to_string(), r.trip_id.to_string()];
            rec.extend(r.features.to_array().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, FeatureError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let expected: Vec<&str> = ["driver_id", "trip_id"]
            .into_iter()
            .chain(FEATURE_NAMES)
            .collect();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(FeatureError::Malformed {
                line: 1,
                message: format!("expected header {}", expected.join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |message: String| FeatureError::Malformed { line, message };
            let int = |i: usize| {
                rec[i]
                    .trim()
                    .parse::<u64>()
                    .map_err(|e| bad(format!("{}: {e}", expected[i])))
            };
            let (driver_id, trip_id) = (int(0)?, int(1)?);
            let mut v = [0.0; N_FEATURES];
            for (d, slot) in v.iter_mut().enumerate() {
                let x: f64 = rec[d + 2]
                    .trim()
                    .parse()
                    .map_err(|e| bad(format!("{}: {e}", FEATURE_NAMES[d])))?;
                if !x.is_finite() {
                    return Err(bad(format!("{} is not finite", FEATURE_NAMES[d])));
                }
                *slot = x;
            }
            rows.push(FeatureRow {
                driver_id,
                trip_id,
                features: FeatureVector::from_array(v),
            });
        }
        Self::from_rows(rows)
    }
}

/// Extracts one feature vector per graph, keyed and sorted by trip.
pub fn extract_feature_table(
    graphs: &[TripGraph],
    exec: Execution,
) -> Result<FeatureTable, FeatureError> {
    let rows = exec
        .map(graphs, |g| {
            extract_features(g).map(|features| FeatureRow {
                driver_id: g.driver_id,
                trip_id: g.trip_id,
                features,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    FeatureTable::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::MatchedTrip;
    use crate::model::{EdgeAttributeRow, EdgeAttributedMatrix, TravelDirection};
    use crate::tripgraph::build_trip_graph;
    use crate::tripgraph::tests::{line_network, mp};

    const DEG_PER_M: f64 = 1.0 / 111_194.926_644_558_74;

    fn graph_from(
        points: Vec<crate::matcher::MatchedPoint>,
        seg_len: f64,
        n_seg: u64,
    ) -> TripGraph {
        let net = line_network(n_seg, seg_len);
        build_trip_graph(
            &MatchedTrip {
                trip_id: 1,
                driver_id: 1,
                matched: points,
                matched_fraction: 1.0,
            },
            &net,
        )
        .unwrap()
    }

    #[test]
    fn straight_single_edge_trip() {
        let pts = (0..10)
            .map(|i| mp(i, 1, (5.0 + 10.0 * i as f64) * DEG_PER_M, 10.0, 90.0, true))
            .collect();
        let f = extract_features(&graph_from(pts, 100.0, 1)).unwrap();
        assert!(
            (f.displacement_ratio - 0.9).abs() < 1e-9,
            "{}",
            f.displacement_ratio
        );
        assert_eq!(f.repetition_ratio, 1.0);
        assert_eq!(f.revisited_edge_fraction, 0.0);
        assert_eq!(f.turn_density, 0.0);
        assert_eq!(
            (
                f.brakes_per_km,
                f.max_edge_brakes,
                f.accels_per_km,
                f.max_edge_accels
            ),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert!(f.direction_circular_variance < 1e-12);
        assert!((f.mean_speed - 10.0).abs() < 1e-12);
    }

    #[test]
    fn out_and_back_has_low_displacement_and_a_u_turn() {
        let mut pts: Vec<_> = (0..10)
            .map(|i| mp(i, 1, (5.0 + 10.0 * i as f64) * DEG_PER_M, 10.0, 90.0, true))
            .collect();
        pts.extend((0..10).map(|i| {
            mp(
                10 + i,
                1,
                (95.0 - 10.0 * i as f64) * DEG_PER_M,
                10.0,
                270.0,
                false,
            )
        }));
        let g = graph_from(pts, 100.0, 1);
        let f = extract_features(&g).unwrap();
        assert!(f.displacement_ratio < 0.05);
        // one 180 degree transition over 0.2 km
        assert!((f.turn_density - 900.0).abs() < 1e-6, "{}", f.turn_density);
        assert_eq!(f.repetition_ratio, 1.0);
        assert!(f.direction_circular_variance > 0.99);
    }

    fn row(segment_id: u64, length: f64, brakes: u32, traversals: u32) -> EdgeAttributeRow {
        EdgeAttributeRow {
            segment_id,
            direction: TravelDirection::Forward,
            avg_speed: 10.0,
            avg_direction: 0.0,
            length,
            n_hard_brakes: brakes,
            n_hard_accels: 0,
            n_traversals: traversals,
            n_points: 4,
        }
    }

    fn synthetic_graph(rows: Vec<EdgeAttributeRow>, trip_length: f64, net: f64) -> TripGraph {
        let runs = rows
            .iter()
            .flat_map(|r| std::iter::repeat_n(r.key(), r.n_traversals as usize))
            .collect();
        TripGraph {
            trip_id: 7,
            driver_id: 3,
            runs,
            heading_resultant: 1.0,
            matrix: EdgeAttributedMatrix {
                trip_id: 7,
                driver_id: 3,
                rows,
                trip_length,
                net_displacement: net,
            },
        }
    }

    #[test]
    fn brake_rates() {
        let g = synthetic_graph(
            vec![row(1, 1000.0, 3, 1), row(2, 1000.0, 1, 1)],
            2000.0,
            1900.0,
        );
        let f = extract_features(&g).unwrap();
        assert_eq!(f.brakes_per_km, 2.0);
        assert_eq!(f.max_edge_brakes, 3.0);
    }

    #[test]
    fn scale_sanity() {
        let base = synthetic_graph(
            vec![
                row(1, 500.0, 2, 2),
                row(2, 500.0, 1, 1),
                row(3, 500.0, 0, 1),
            ],
            2000.0,
            900.0,
        );
        let mut doubled = base.clone();
        for r in &mut doubled.matrix.rows {
            r.length *= 2.0;
        }
        doubled.matrix.trip_length *= 2.0;
        doubled.matrix.net_displacement *= 2.0;
        let (a, b) = (
            extract_features(&base).unwrap(),
            extract_features(&doubled).unwrap(),
        );
        assert!((a.displacement_ratio - b.displacement_ratio).abs() < 1e-9);
        assert!((a.repetition_ratio - b.repetition_ratio).abs() < 1e-9);
        assert!((a.revisited_edge_fraction - b.revisited_edge_fraction).abs() < 1e-9);
        assert_eq!(a.brakes_per_km, 2.0 * b.brakes_per_km);
        assert_eq!(a.accels_per_km, 2.0 * b.accels_per_km);
        assert!((a.repetition_ratio - 4.0 / 3.0).abs() < 1e-12);
        assert!((a.revisited_edge_fraction - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_trip_rejected() {
        let g = synthetic_graph(vec![row(1, 100.0, 0, 1)], 0.0, 0.0);
        assert!(matches!(
            extract_features(&g),
            Err(FeatureError::DegenerateTrip { .. })
        ));
    }

    #[test]
    fn table_ordering_and_duplicates() {
        let mut graphs = Vec::new();
        for (d, t) in [(2, 1), (1, 2), (1, 1)] {
            let mut g = synthetic_graph(vec![row(1, 1000.0, 0, 1)], 1000.0, 900.0);
            g.driver_id = d;
            g.trip_id = t;
            graphs.push(g);
        }
        let table = extract_feature_table(&graphs, Execution::Sequential).unwrap();
        let keys: Vec<_> = table
            .rows
            .iter()
            .map(|r| (r.driver_id, r.trip_id))
            .collect();
        assert_eq!(keys, vec![(1, 1), (1, 2), (2, 1)]);
        assert!(extract_feature_table(&[], Execution::Sequential)
            .unwrap()
            .is_empty());

        graphs.push(graphs[0].clone());
        let err = extract_feature_table(&graphs, Execution::Sequential).unwrap_err();
        assert!(err.to_string().contains("duplicate trip key"));
    }

    #[test]
    fn csv_round_trip() {
        let g = synthetic_graph(
            vec![row(1, 1000.0, 3, 2), row(2, 333.3, 1, 1)],
            2333.3,
            1234.5,
        );
        let table = extract_feature_table(&[g], Execution::Sequential).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("driver_id,trip_id,displacement_ratio,repetition_ratio,"));
        assert_eq!(FeatureTable::read_csv(buf.as_slice()).unwrap(), table);
        assert!(FeatureTable::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn groups_partition_dims() {
        let mut all: Vec<usize> = FeatureGroup::ALL
            .iter()
            .flat_map(|g| g.dims().to_vec())
            .collect();
        all.sort();
        assert_eq!(all, (0..N_FEATURES).collect::<Vec<_>>());
    }
}
