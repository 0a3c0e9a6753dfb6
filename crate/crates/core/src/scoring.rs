//! Trip and driver anomaly scoring.
//!
//! One forest is fitted over every trip's feature vector. A trip is abnormal
//! when its score reaches `trip_score_threshold`. Drivers are ranked by the
//! mean score of their trips and the top `ceil(top_fraction * n_drivers)` are
//! classified abnormal, with ties resolved toward the lower driver id.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::features::{FeatureGroup, FeatureTable};
use crate::iforest::{
    fit, threshold_from_contamination, top_count, ContaminationThreshold, IForestError,
    IForestModel, IForestParams,
};
use crate::model::{AnalysisConfig, DriverId, TripId};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("insufficient trips: need at least 2, got {0}")]
    InsufficientTrips(usize),
    #[error(transparent)]
    Forest(#[from] IForestError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }

    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" => Ok(Label::Normal),
            "abnormal" | "1" => Ok(Label::Abnormal),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// `score >= threshold` is abnormal.
pub fn label_for(score: f64, threshold: f64) -> Label {
    if score >= threshold {
        Label::Abnormal
    } else {
        Label::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub direction: f64,
    pub braking: f64,
    pub acceleration: f64,
    pub speed: f64,
}

impl CategoryScores {
    fn from_groups(values: [f64; 4]) -> Self {
        Self {
            direction: values[0],
            braking: values[1],
            acceleration: values[2],
            speed: values[3],
        }
    }

    fn to_array(self) -> [f64; 4] {
        [self.direction, self.braking, self.acceleration, self.speed]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripScore {
    pub driver_id: DriverId,
    pub trip_id: TripId,
    pub score: f64,
    pub label: Label,
    pub category_scores: Option<CategoryScores>,
    /// At or above the contamination-derived score threshold.
    pub contamination_flagged: bool,
}

#[derive(Debug, Clone)]
pub struct TripScoring {
    pub trips: Vec<TripScore>,
    pub model: IForestModel,
    pub contamination: ContaminationThreshold,
    pub category_models: Vec<(FeatureGroup, IForestModel)>,
}

fn forest_params(config: &AnalysisConfig, seed: u64) -> IForestParams {
    IForestParams {
        n_trees: config.n_trees,
        subsample_size: config.subsample_size,
        rng_seed: seed,
    }
}

/// Seed for the per-category forest of `group`; the group ordinal sits in
/// the high word so it cannot collide with per-tree indices.
pub fn category_seed(seed: u64, group: FeatureGroup) -> u64 {
    seed ^ (group.ordinal() << 32)
}

/// Fits the trip forest (plus per-category forests when enabled) and scores every trip.
pub fn score_trips(
    table: &FeatureTable,
    config: &AnalysisConfig,
    exec: Execution,
) -> Result<TripScoring, ScoringError> {
    if table.len() < 2 {
        return Err(ScoringError::InsufficientTrips(table.len()));
    }
    let rows = table.matrix();
    let model = fit(&rows, &forest_params(config, config.rng_seed), exec)?;

    let category_models = if config.per_category {
        FeatureGroup::ALL
            .iter()
            .map(|&g| {
                let params = forest_params(config, category_seed(config.rng_seed, g));
                fit(&table.group_matrix(g), &params, exec).map(|m| (g, m))
            })
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };

    let trips = score_with_models(table, &model, &category_models, config, exec)?;
    let scores: Vec<f64> = trips.iter().map(|t| t.score).collect();
    let contamination = threshold_from_contamination(&scores, config.contamination);
    Ok(TripScoring {
        trips,
        model,
        contamination,
        category_models,
    })
}

/// Scores a feature table against already fitted forests.
pub fn score_with_models(
    table: &FeatureTable,
    model: &IForestModel,
    category_models: &[(FeatureGroup, IForestModel)],
    config: &AnalysisConfig,
    exec: Execution,
) -> Result<Vec<TripScore>, ScoringError> {
    let scores = model.score_all(&table.matrix(), exec)?;
    let mut per_group: Vec<Vec<f64>> = Vec::new();
    for (g, m) in category_models {
        per_group.push(m.score_all(&table.group_matrix(*g), exec)?);
    }
    let has_categories = per_group.len() == FeatureGroup::ALL.len();
    let contamination = threshold_from_contamination(&scores, config.contamination);
    Ok(table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| TripScore {
            driver_id: r.driver_id,
            trip_id: r.trip_id,
            score: scores[i],
            label: label_for(scores[i], config.trip_score_threshold),
            category_scores: has_categories.then(|| {
                CategoryScores::from_groups([
                    per_group[0][i],
                    per_group[1][i],
                    per_group[2][i],
                    per_group[3][i],
                ])
            }),
            contamination_flagged: scores[i] >= contamination.threshold,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverReport {
    pub driver_id: DriverId,
    pub mean_score: f64,
    pub n_trips: usize,
    pub n_abnormal_trips: usize,
    pub classification: Label,
    /// 1-based, by descending mean score.
    pub rank: usize,
    pub category_means: Option<CategoryScores>,
}

/// Ranks drivers by mean trip score and marks the top fraction abnormal.
/// The returned reports are in rank order.
pub fn aggregate_drivers(trips: &[TripScore], top_fraction: f64) -> Vec<DriverReport> {
    let mut by_driver: BTreeMap<DriverId, Vec<&TripScore>> = BTreeMap::new();
    for t in trips {
        by_driver.entry(t.driver_id).or_default().push(t);
    }
    let mut reports: Vec<DriverReport> = by_driver
        .into_iter()
        .map(|(driver_id, ts)| {
            let n = ts.len() as f64;
            let category_means = if ts.iter().all(|t| t.category_scores.is_some()) {
                let mut sums = [0.0; 4];
                for t in &ts {
                    for (s, v) in sums.iter_mut().zip(t.category_scores.unwrap().to_array()) {
                        *s += v;
                    }
                }
                Some(CategoryScores::from_groups(sums.map(|s| s / n)))
            } else {
                None
            };
            DriverReport {
                driver_id,
                mean_score: ts.iter().map(|t| t.score).sum::<f64>() / n,
                n_trips: ts.len(),
                n_abnormal_trips: ts.iter().filter(|t| t.label.is_abnormal()).count(),
                classification: Label::Normal,
                rank: 0,
                category_means,
            }
        })
        .collect();
    reports.sort_by(|a, b| {
        b.mean_score
            .total_cmp(&a.mean_score)
            .then(a.driver_id.cmp(&b.driver_id))
    });
    let k = top_count(top_fraction, reports.len());
    for (i, r) in reports.iter_mut().enumerate() {
        r.rank = i + 1;
        if i < k {
            r.classification = Label::Abnormal;
        }
    }
    reports
}

const CATEGORY_COLUMNS: [&str; 4] = ["dir_score", "brake_score", "accel_score", "speed_score"];

pub fn write_trip_scores_csv<W: Write>(trips: &[TripScore], writer: W) -> Result<(), ScoringError> {
    let with_categories = !trips.is_empty() && trips.iter().all(|t| t.category_scores.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["driver_id", "trip_id", "score", "label"];
    if with_categories {
        header.extend(CATEGORY_COLUMNS);
    }
    w.write_record(&header)?;
    for t in trips {
        let mut rec = vec![
            t.driver_id.to_string(),
            t.trip_id.to_string(),
            t.score.to_string(),
            t.label.to_string(),
        ];
        if let (true, Some(c)) = (with_categories, t.category_scores) {
            rec.extend(c.to_array().iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_driver_report_csv<W: Write>(
    drivers: &[DriverReport],
    writer: W,
) -> Result<(), ScoringError> {
    let with_categories = !drivers.is_empty() && drivers.iter().all(|d| d.category_means.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "driver_id",
        "mean_score",
        "n_trips",
        "n_abnormal_trips",
        "rank",
        "classification",
    ];
    if with_categories {
        header.extend(CATEGORY_COLUMNS);
    }
    w.write_record(&header)?;
    for d in drivers {
        let mut rec = vec![
            d.driver_id.to_string(),
            d.mean_score.to_string(),
            d.n_trips.to_string(),
            d.n_abnormal_trips.to_string(),
            d.rank.to_string(),
            d.classification.to_string(),
        ];
        if let (true, Some(c)) = (with_categories, d.category_means) {
            rec.extend(c.to_array().iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureRow, FeatureVector, N_FEATURES};

    fn trip(driver_id: DriverId, trip_id: TripId, score: f64) -> TripScore {
        TripScore {
            driver_id,
            trip_id,
            score,
            label: label_for(score, 0.6),
            category_scores: None,
            contamination_flagged: false,
        }
    }

    #[test]
    fn boundary_score_is_abnormal() {
        assert_eq!(label_for(0.6, 0.6), Label::Abnormal);
        assert_eq!(label_for(0.599_999, 0.6), Label::Normal);
    }

    #[test]
    fn top_k_uses_ceiling() {
        let trips: Vec<TripScore> = (1..=18).map(|d| trip(d, 1, d as f64 / 100.0)).collect();
        let abnormal = |f| {
            aggregate_drivers(&trips, f)
                .iter()
                .filter(|r| r.classification.is_abnormal())
                .count()
        };
        assert_eq!(abnormal(0.2), 4);
        assert_eq!(abnormal(0.1), 2);
        let reports = aggregate_drivers(&trips, 0.2);
        assert_eq!(reports[0].driver_id, 18);
        assert_eq!(reports[0].rank, 1);
    }

    #[test]
    fn ties_at_boundary_favor_lower_driver_id() {
        let mut trips: Vec<TripScore> = (1..=8).map(|d| trip(d, 1, 0.3)).collect();
        trips.push(trip(9, 1, 0.5));
        trips.push(trip(10, 1, 0.5));
        // 10 drivers at 10% -> one slot, drivers 9 and 10 tie
        let reports = aggregate_drivers(&trips, 0.1);
        let flagged: Vec<_> = reports
            .iter()
            .filter(|r| r.classification.is_abnormal())
            .map(|r| r.driver_id)
            .collect();
        assert_eq!(flagged, vec![9]);
    }

    #[test]
    fn driver_means_and_counts() {
        let trips = vec![trip(1, 1, 0.7), trip(1, 2, 0.3), trip(2, 1, 0.4)];
        let reports = aggregate_drivers(&trips, 0.5);
        let d1 = reports.iter().find(|r| r.driver_id == 1).unwrap();
        assert!((d1.mean_score - 0.5).abs() < 1e-12);
        assert_eq!((d1.n_trips, d1.n_abnormal_trips), (2, 1));
        assert_eq!(d1.classification, Label::Abnormal);
    }

    fn table(n: usize) -> FeatureTable {
        let rows = (0..n)
            .map(|i| {
                let mut v = [0.0; N_FEATURES];
                for (d, x) in v.iter_mut().enumerate() {
                    *x = ((i * 7 + d * 3) % 11) as f64;
                }
                FeatureRow {
                    driver_id: (i % 3) as u64 + 1,
                    trip_id: i as u64,
                    features: FeatureVector::from_array(v),
                }
            })
            .collect();
        FeatureTable::from_rows(rows).unwrap()
    }

    #[test]
    fn category_scores_follow_flag() {
        let mut cfg = AnalysisConfig::new(0.0);
        cfg.n_trees = 10;
        let off = score_trips(&table(30), &cfg, Execution::Sequential).unwrap();
        assert!(off.trips.iter().all(|t| t.category_scores.is_none()));
        assert!(off.category_models.is_empty());

        cfg.per_category = true;
        let on = score_trips(&table(30), &cfg, Execution::Sequential).unwrap();
        assert_eq!(on.category_models.len(), 4);
        assert!(on.trips.iter().all(|t| t.category_scores.is_some()));
        // the main forest is unaffected by the flag
        let a: Vec<f64> = off.trips.iter().map(|t| t.score).collect();
        let b: Vec<f64> = on.trips.iter().map(|t| t.score).collect();
        assert_eq!(a, b);

        let drivers = aggregate_drivers(&on.trips, 0.2);
        let mut buf = Vec::new();
        write_driver_report_csv(&drivers, &mut buf).unwrap();
        let header = String::from_utf8(buf)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        assert_eq!(
            header,
            "driver_id,mean_score,n_trips,n_abnormal_trips,rank,classification,dir_score,brake_score,accel_score,speed_score"
        );
    }

    #[test]
    fn contamination_flags_match_threshold() {
        let mut cfg = AnalysisConfig::new(0.0);
        cfg.n_trees = 20;
        let s = score_trips(&table(30), &cfg, Execution::Sequential).unwrap();
        let flagged = s.trips.iter().filter(|t| t.contamination_flagged).count();
        assert_eq!(flagged, s.contamination.n_flagged);
        assert!(flagged >= 6);
    }

    #[test]
    fn too_few_trips() {
        let cfg = AnalysisConfig::new(0.0);
        assert!(matches!(
            score_trips(&table(1), &cfg, Execution::Sequential),
            Err(ScoringError::InsufficientTrips(1))
        ));
    }

    #[test]
    fn trip_csv_layout() {
        let mut buf = Vec::new();
        write_trip_scores_csv(&[trip(3, 4, 0.65)], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "driver_id,trip_id,score,label\n3,4,0.65,abnormal\n"
        );
    }
}
