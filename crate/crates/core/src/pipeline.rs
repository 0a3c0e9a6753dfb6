//! End-to-end batch run: match, build graphs, filter by α, extract features,
//! score and rank drivers.
//!
//! Trips that fail a stage are dropped with a reason and counted; the run only
//! errors when a stage leaves nothing to work with.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::features::{extract_features, FeatureError, FeatureRow, FeatureTable};
use crate::matcher::match_trips;
use crate::model::{AnalysisConfig, ConfigError, DriverId, RoadNetwork, Trip, TripId};
use crate::scoring::{aggregate_drivers, score_trips, DriverReport, ScoringError, TripScoring};
use crate::tripgraph::{build_trip_graph, detect_events, filter_by_min_length, TripGraph};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{stage}: {message}")]
    Empty { stage: Stage, message: String },
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("score: {0}")]
    Scoring(#[from] ScoringError),
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Config(_) => None,
            PipelineError::Empty { stage, .. } => Some(*stage),
            PipelineError::Features(_) => Some(Stage::Features),
            PipelineError::Scoring(_) => Some(Stage::Score),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Events,
    Match,
    Graph,
    AlphaFilter,
    Features,
    Score,
    Aggregate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Events => "events",
            Stage::Match => "match",
            Stage::Graph => "graph",
            Stage::AlphaFilter => "alpha_filter",
            Stage::Features => "features",
            Stage::Score => "score",
            Stage::Aggregate => "aggregate",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedTrip {
    pub driver_id: DriverId,
    pub trip_id: TripId,
    pub stage: Stage,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub n_trips_in: usize,
    pub n_points_in: usize,
    pub n_trips_matched: usize,
    pub n_points_matched: usize,
    pub n_trips_graphed: usize,
    pub n_trips_after_alpha: usize,
    pub n_trips_scored: usize,
    pub n_drivers: usize,
    pub n_abnormal_trips: usize,
    pub n_abnormal_drivers: usize,
    pub n_contamination_flagged: usize,
    pub drop_reasons: BTreeMap<String, usize>,
}

/// Wall-clock seconds per stage, in execution order.
pub type StageTimings = Vec<(Stage, f64)>;

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub graphs: Vec<TripGraph>,
    pub features: FeatureTable,
    pub scoring: TripScoring,
    pub drivers: Vec<DriverReport>,
    pub dropped: Vec<DroppedTrip>,
    pub counts: StageCounts,
    pub timings: StageTimings,
}

struct Clock {
    last: Instant,
    timings: StageTimings,
}

impl Clock {
    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        self.timings
            .push((stage, now.duration_since(self.last).as_secs_f64()));
        self.last = now;
    }
}

/// Runs every stage after ingestion.
///
/// When `derive_events` is set the hard-event flags are recomputed from the
/// speed series first, overwriting whatever the trips carried.
pub fn run_pipeline(
    network: &RoadNetwork,
    trips: &[Trip],
    derive_events: bool,
    config: &AnalysisConfig,
    exec: Execution,
) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let mut clock = Clock {
        last: Instant::now(),
        timings: Vec::new(),
    };
    let mut counts = StageCounts {
        n_trips_in: trips.len(),
        n_points_in: trips.iter().map(|t| t.points.len()).sum(),
        ..Default::default()
    };
    let mut dropped = Vec::new();
    let mut drop = |driver_id, trip_id, stage, reason: String, counts: &mut StageCounts| {
        *counts.drop_reasons.entry(reason.clone()).or_default() += 1;
        dropped.push(DroppedTrip {
            driver_id,
            trip_id,
            stage,
            reason,
        });
    };

    let owned;
    let trips = if derive_events {
        owned = exec.map(trips, |t| Trip {
            points: detect_events(&t.points, config.hard_event_accel_threshold),
            ..t.clone()
        });
        clock.lap(Stage::Events);
        &owned[..]
    } else {
        trips
    };

    let mut matched = Vec::new();
    for (trip, result) in trips.iter().zip(match_trips(trips, network, config, exec)) {
        match result {
            Ok(m) => matched.push(m),
            Err(e) => drop(
                trip.driver_id,
                trip.trip_id,
                Stage::Match,
                e.reason().into(),
                &mut counts,
            ),
        }
    }
    counts.n_trips_matched = matched.len();
    counts.n_points_matched = matched.iter().map(|m| m.matched.len()).sum();
    clock.lap(Stage::Match);
    if matched.is_empty() {
        return Err(PipelineError::Empty {
            stage: Stage::Match,
            message: "no trip matched the road network".into(),
        });
    }

    let mut graphs = Vec::with_capacity(matched.len());
    for (m, result) in matched
        .iter()
        .zip(exec.map(&matched, |m| build_trip_graph(m, network)))
    {
        match result {
            Ok(g) => graphs.push(g),
            Err(e) => drop(
                m.driver_id,
                m.trip_id,
                Stage::Graph,
                e.to_string(),
                &mut counts,
            ),
        }
    }
    counts.n_trips_graphed = graphs.len();
    clock.lap(Stage::Graph);

    let (graphs, below) = filter_by_min_length(graphs, config.alpha);
    for (driver_id, trip_id) in below.0 {
        drop(
            driver_id,
            trip_id,
            Stage::AlphaFilter,
            "below_alpha".into(),
            &mut counts,
        );
    }
    counts.n_trips_after_alpha = graphs.len();
    clock.lap(Stage::AlphaFilter);
    if graphs.is_empty() {
        return Err(PipelineError::Empty {
            stage: Stage::AlphaFilter,
            message: "no trips pass alpha filter".into(),
        });
    }

    let mut rows = Vec::with_capacity(graphs.len());
    for (g, result) in graphs.iter().zip(exec.map(&graphs, extract_features)) {
        match result {
            Ok(features) => rows.push(FeatureRow {
                driver_id: g.driver_id,
                trip_id: g.trip_id,
                features,
            }),
            Err(FeatureError::DegenerateTrip { .. }) => drop(
                g.driver_id,
                g.trip_id,
                Stage::Features,
                "degenerate_trip".into(),
                &mut counts,
            ),
            Err(e) => return Err(e.into()),
        }
    }
    let features = FeatureTable::from_rows(rows)?;
    clock.lap(Stage::Features);

    let scoring = score_trips(&features, config, exec)?;
    counts.n_trips_scored = scoring.trips.len();
    counts.n_abnormal_trips = scoring
        .trips
        .iter()
        .filter(|t| t.label.is_abnormal())
        .count();
    counts.n_contamination_flagged = scoring.contamination.n_flagged;
    clock.lap(Stage::Score);

    let drivers = aggregate_drivers(&scoring.trips, config.top_fraction);
    counts.n_drivers = drivers.len();
    counts.n_abnormal_drivers = drivers
        .iter()
        .filter(|d| d.classification.is_abnormal())
        .count();
    clock.lap(Stage::Aggregate);

    dropped.sort_by_key(|d| (d.driver_id, d.trip_id));
    Ok(PipelineOutput {
        graphs,
        features,
        scoring,
        drivers,
        dropped,
        counts,
        timings: clock.timings,
    })
}

/// Machine-readable digest of a run, mirroring the trip and driver reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config: AnalysisConfig,
    pub counts: StageCounts,
    pub contamination_threshold: f64,
    pub trips: Vec<crate::scoring::TripScore>,
    pub drivers: Vec<DriverReport>,
    pub dropped: Vec<DroppedTrip>,
}

impl PipelineSummary {
    pub fn new(output: &PipelineOutput, config: &AnalysisConfig) -> Self {
        Self {
            config: config.clone(),
            counts: output.counts.clone(),
            contamination_threshold: output.scoring.contamination.threshold,
            trips: output.scoring.trips.clone(),
            drivers: output.drivers.clone(),
            dropped: output.dropped.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthSpec};

    fn small() -> crate::synth::SynthDataset {
        generate_dataset(&SynthSpec {
            n_drivers: 6,
            trips_per_driver: 5,
            abnormal_driver_fraction: 2.0 / 6.0,
            rng_seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn runs_end_to_end() {
        let d = small();
        let cfg = AnalysisConfig::new(1000.0);
        let out = run_pipeline(
            &d.grid.network,
            &d.trip_list(),
            false,
            &cfg,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(out.drivers.len(), 6);
        assert_eq!(out.counts.n_trips_in, 30);
        assert_eq!(
            out.counts.n_trips_scored + out.dropped.len(),
            out.counts.n_trips_in
        );
        assert_eq!(out.counts.n_abnormal_drivers, 2);
        let stages: Vec<Stage> = out.timings.iter().map(|t| t.0).collect();
        assert_eq!(stages.first(), Some(&Stage::Match));
    }

    #[test]
    fn huge_alpha_empties_the_run() {
        let d = small();
        let cfg = AnalysisConfig::new(1e9);
        let err = run_pipeline(
            &d.grid.network,
            &d.trip_list(),
            false,
            &cfg,
            Execution::Sequential,
        )
        .unwrap_err();
        assert_eq!(err.stage(), Some(Stage::AlphaFilter));
        assert_eq!(err.to_string(), "alpha_filter: no trips pass alpha filter");
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let d = small();
        let cfg = AnalysisConfig::new(1000.0);
        let trips = d.trip_list();
        let a = run_pipeline(&d.grid.network, &trips, true, &cfg, Execution::Sequential).unwrap();
        let b = run_pipeline(&d.grid.network, &trips, true, &cfg, Execution::Parallel).unwrap();
        assert_eq!(a.scoring.trips, b.scoring.trips);
        assert_eq!(a.drivers, b.drivers);
    }
}
