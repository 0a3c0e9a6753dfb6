use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use abd_core::eval::{confusion, metrics, read_driver_labels, ConfusionCounts, EvalError, Metrics};
use abd_core::features::FeatureTable;
use abd_core::iforest::IForestModel;
use abd_core::ingest::{parse_road_network, parse_trips, IngestReport};
use abd_core::matcher::{match_trips, MatchError};
use abd_core::model::{AnalysisConfig, RoadNetwork, Trip};
use abd_core::scoring::{
    aggregate_drivers, score_trips, score_with_models, write_driver_report_csv,
    write_trip_scores_csv, ScoringError,
};
use abd_core::synth::{generate_dataset, DatasetPaths, SynthError, SynthSpec};
use abd_core::{run_pipeline, Execution, PipelineError, PipelineSummary};
use anyhow::{anyhow, Context};
use serde::Serialize;

use crate::exit;
use crate::manifest::Run;
use crate::settings::ConfigFile;
use crate::{AnalysisArgs, EvaluateArgs, GenerateArgs, MatchArgs, PipelineArgs, ScoreArgs};

pub struct Failure {
    code: u8,
    stage: Option<String>,
    error: anyhow::Error,
}

type Outcome = Result<(), Failure>;

trait OrFail<T> {
    fn or_fail(self, code: u8, stage: Option<&str>) -> Result<T, Failure>;
    fn usage(self) -> Result<T, Failure>
    where
        Self: Sized,
    {
        self.or_fail(exit::USAGE, None)
    }
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn or_fail(self, code: u8, stage: Option<&str>) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            stage: stage.map(str::to_string),
            error: e.into(),
        })
    }
}

/// Runs `body`, then records the outcome in the manifest and returns the exit code.
fn execute(command: &str, body: impl FnOnce(&mut Run) -> Outcome) -> u8 {
    let mut run = Run::new(command);
    let code = match body(&mut run) {
        Ok(()) => 0,
        Err(f) => {
            let message = format!("{:#}", f.error);
            match &f.stage {
                Some(stage) if !message.starts_with(&format!("{stage}:")) => {
                    eprintln!("error: {stage}: {message}")
                }
                _ => eprintln!("error: {message}"),
            }
            run.fail(f.code, f.stage, message);
            f.code
        }
    };
    run.finish();
    code
}

const ANALYSIS_KEYS: [&str; 13] = [
    "alpha",
    "contamination",
    "trees",
    "subsample",
    "seed",
    "trip-threshold",
    "top-fraction",
    "per-category",
    "max-snap",
    "min-matched-fraction",
    "accel-threshold",
    "cell-size",
    "sequential",
];

fn known_keys(extra: &[&'static str]) -> Vec<&'static str> {
    ANALYSIS_KEYS.iter().chain(extra).copied().collect()
}

/// Builds the analysis config from defaults, then the file, then flags.
/// `alpha` falls back to `default_alpha` only for commands that never filter.
fn analysis_config(
    a: &AnalysisArgs,
    file: &ConfigFile,
    default_alpha: Option<f64>,
) -> anyhow::Result<(AnalysisConfig, Execution)> {
    let alpha = file
        .pick(a.alpha, "alpha")?
        .or(default_alpha)
        .ok_or_else(|| anyhow!("--alpha is required (minimum trip length in meters)"))?;
    let mut c = AnalysisConfig::new(alpha);
    c.contamination = file.pick_or(a.contamination, "contamination", c.contamination)?;
    c.n_trees = file.pick_or(a.trees, "trees", c.n_trees)?;
    c.subsample_size = file.pick_or(a.subsample, "subsample", c.subsample_size)?;
    c.rng_seed = file.pick_or(a.seed, "seed", c.rng_seed)?;
    c.trip_score_threshold =
        file.pick_or(a.trip_threshold, "trip-threshold", c.trip_score_threshold)?;
    c.top_fraction = file.pick_or(a.top_fraction, "top-fraction", c.top_fraction)?;
    c.per_category = file.switch(a.per_category, "per-category")?;
    c.max_snap_distance = file.pick_or(a.max_snap, "max-snap", c.max_snap_distance)?;
    c.min_matched_fraction = file.pick_or(
        a.min_matched_fraction,
        "min-matched-fraction",
        c.min_matched_fraction,
    )?;
    c.hard_event_accel_threshold = file.pick_or(
        a.accel_threshold,
        "accel-threshold",
        c.hard_event_accel_threshold,
    )?;
    c.cell_size = file.pick_or(a.cell_size, "cell-size", c.cell_size)?;
    c.validate()?;
    let exec = if file.switch(a.sequential, "sequential")? {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    Ok((c, exec))
}

fn record_config(run: &mut Run, config: &impl Serialize, seed: u64, exec: Option<Execution>) {
    run.manifest.config = serde_json::to_value(config).unwrap_or_default();
    run.manifest.seed = Some(seed);
    run.manifest.execution = exec.map(|e| format!("{e:?}").to_lowercase());
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("opening {}", path.display()))
}

struct Inputs {
    network: RoadNetwork,
    trips: Vec<Trip>,
    report: IngestReport,
}

/// Digests and parses the network directory and trajectory file.
fn ingest(
    run: &mut Run,
    network_dir: &Path,
    trips: &Path,
    cell_size: f64,
) -> Result<Inputs, Failure> {
    let nodes = network_dir.join("nodes.csv");
    let segments = network_dir.join("segments.csv");
    for p in [&nodes, &segments, &trips.to_path_buf()] {
        run.input(p).usage()?;
    }
    let stage = Some("ingest");
    let mut network = parse_road_network(open(&nodes).usage()?, open(&segments).usage()?)
        .or_fail(exit::USAGE, stage)?;
    if cell_size != network.index().cell_size() {
        network.rebuild_index(cell_size);
    }
    let (trips, report) = parse_trips(open(trips).usage()?).or_fail(exit::USAGE, stage)?;
    run.count("network_nodes", network.nodes().len());
    run.count("network_segments", network.segments().len());
    run.count("ingest", &report);
    log::info!(
        "ingested {} trips ({} of {} points accepted)",
        trips.len(),
        report.n_points_accepted(),
        report.n_points_read
    );
    run.lap("ingest");
    if trips.is_empty() {
        return Err(anyhow!("no usable trips in input")).or_fail(exit::EMPTY, stage);
    }
    Ok(Inputs {
        network,
        trips,
        report,
    })
}

pub fn generate(a: GenerateArgs) -> u8 {
    execute("generate", |run| {
        let file = ConfigFile::load(a.config.as_deref()).usage()?;
        file.check_keys(&[
            "out",
            "seed",
            "rows",
            "cols",
            "spacing",
            "drivers",
            "trips-per-driver",
            "abnormal-fraction",
            "loop-prob",
            "detour-prob",
            "brake-prob",
            "accel-prob",
        ])
        .usage()?;
        let out = file.path(a.out, "out").usage()?;
        run.set_out_dir(&out).usage()?;

        let d = SynthSpec::default();
        let spec = (|| -> anyhow::Result<SynthSpec> {
            Ok(SynthSpec {
                rng_seed: file.pick_or(a.seed, "seed", d.rng_seed)?,
                rows: file.pick_or(a.rows, "rows", d.rows)?,
                cols: file.pick_or(a.cols, "cols", d.cols)?,
                spacing_m: file.pick_or(a.spacing, "spacing", d.spacing_m)?,
                n_drivers: file.pick_or(a.drivers, "drivers", d.n_drivers)?,
                trips_per_driver: file.pick_or(
                    a.trips_per_driver,
                    "trips-per-driver",
                    d.trips_per_driver,
                )?,
                abnormal_driver_fraction: file.pick_or(
                    a.abnormal_fraction,
                    "abnormal-fraction",
                    d.abnormal_driver_fraction,
                )?,
                loop_prob: file.pick_or(a.loop_prob, "loop-prob", d.loop_prob)?,
                detour_prob: file.pick_or(a.detour_prob, "detour-prob", d.detour_prob)?,
                brake_burst_prob: file.pick_or(a.brake_prob, "brake-prob", d.brake_burst_prob)?,
                accel_burst_prob: file.pick_or(a.accel_prob, "accel-prob", d.accel_burst_prob)?,
                ..d.clone()
            })
        })()
        .usage()?;
        record_config(run, &spec, spec.rng_seed, None);
        spec.validate().usage()?;
        run.lap("config");

        let synth_fail = |stage: &str, e: SynthError| Failure {
            code: synth_code(&e),
            stage: Some(stage.to_string()),
            error: e.into(),
        };
        let data = generate_dataset(&spec).map_err(|e| synth_fail("generate", e))?;
        run.lap("generate");
        let paths = DatasetPaths::in_dir(&out);
        let written = data.write_to(&out);
        for p in [
            &paths.nodes,
            &paths.segments,
            &paths.trips,
            &paths.truth,
            &paths.trip_truth,
        ] {
            run.track(p);
        }
        written.map_err(|e| synth_fail("write", e))?;
        run.lap("write");

        run.count("n_drivers", data.driver_truth.len());
        run.count(
            "n_abnormal_drivers",
            data.driver_truth
                .values()
                .filter(|l| l.is_abnormal())
                .count(),
        );
        run.count("n_trips", data.trips.len());
        run.count(
            "n_injected_trips",
            data.trips
                .iter()
                .filter(|t| !t.anomalies.is_empty())
                .count(),
        );
        run.count(
            "n_points",
            data.trips
                .iter()
                .map(|t| t.trip.points.len())
                .sum::<usize>(),
        );
        log::info!(
            "wrote {} trips for {} drivers to {}",
            data.trips.len(),
            data.driver_truth.len(),
            out.display()
        );
        Ok(())
    })
}

fn synth_code(e: &SynthError) -> u8 {
    match e {
        SynthError::Io { .. } | SynthError::Write { .. } => exit::UNEXPECTED,
        _ => exit::USAGE,
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    ingest: &'a IngestReport,
    #[serde(flatten)]
    summary: PipelineSummary,
}

pub fn pipeline(a: PipelineArgs) -> u8 {
    execute("pipeline", |run| {
        let file = ConfigFile::load(a.analysis.config.as_deref()).usage()?;
        file.check_keys(&known_keys(&["network", "trips", "out"]))
            .usage()?;
        let out = file.path(a.out, "out").usage()?;
        run.set_out_dir(&out).usage()?;
        let (config, exec) = analysis_config(&a.analysis, &file, None).usage()?;
        record_config(run, &config, config.rng_seed, Some(exec));
        let network_dir = file.path(a.network, "network").usage()?;
        let trips_path = file.path(a.trips, "trips").usage()?;
        run.lap("config");

        let inputs = ingest(run, &network_dir, &trips_path, config.cell_size)?;
        let derive_events = !inputs.report.has_event_columns;
        if derive_events {
            log::info!("no event columns; deriving hard events from speed");
        }
        run.reset_lap();
        let output = run_pipeline(&inputs.network, &inputs.trips, derive_events, &config, exec)
            .map_err(|e| {
                let stage = e.stage().map(|s| s.as_str().to_string());
                let code = match &e {
                    PipelineError::Config(_) => exit::USAGE,
                    PipelineError::Empty { .. } => exit::EMPTY,
                    PipelineError::Scoring(ScoringError::InsufficientTrips(_)) => exit::EMPTY,
                    _ => exit::UNEXPECTED,
                };
                Failure {
                    code,
                    stage,
                    error: e.into(),
                }
            })?;
        for (stage, seconds) in &output.timings {
            run.add_stage_seconds(stage.as_str(), *seconds);
        }
        run.count("pipeline", &output.counts);
        run.reset_lap();

        let write = Some("write");
        run.write_output("trip_scores.csv", |w| {
            Ok(write_trip_scores_csv(&output.scoring.trips, w)?)
        })
        .or_fail(exit::UNEXPECTED, write)?;
        run.write_output("driver_report.csv", |w| {
            Ok(write_driver_report_csv(&output.drivers, w)?)
        })
        .or_fail(exit::UNEXPECTED, write)?;
        run.write_output("features.csv", |w| Ok(output.features.write_csv(w)?))
            .or_fail(exit::UNEXPECTED, write)?;
        let model = output
            .scoring
            .model
            .to_json()
            .or_fail(exit::UNEXPECTED, write)?;
        run.write_output("model.json", |w| Ok(writeln!(w, "{model}")?))
            .or_fail(exit::UNEXPECTED, write)?;
        let summary = SummaryFile {
            ingest: &inputs.report,
            summary: PipelineSummary::new(&output, &config),
        };
        run.write_json("summary.json", &summary)
            .or_fail(exit::UNEXPECTED, write)?;
        run.lap("write");

        log::info!(
            "scored {} trips ({} abnormal); {} of {} drivers abnormal",
            output.counts.n_trips_scored,
            output.counts.n_abnormal_trips,
            output.counts.n_abnormal_drivers,
            output.counts.n_drivers
        );
        Ok(())
    })
}

#[derive(Serialize)]
struct MatchedRow {
    driver_id: u64,
    trip_id: u64,
    point_id: u64,
    timestamp: i64,
    segment_id: u64,
    direction: i8,
    projected_lat: f64,
    projected_lon: f64,
    snap_distance_m: f64,
}

pub fn match_only(a: MatchArgs) -> u8 {
    execute("match", |run| {
        let file = ConfigFile::load(a.analysis.config.as_deref()).usage()?;
        file.check_keys(&known_keys(&["network", "trips", "out"]))
            .usage()?;
        let out = file.path(a.out, "out").usage()?;
        run.set_out_dir(&out).usage()?;
        let (config, exec) = analysis_config(&a.analysis, &file, Some(0.0)).usage()?;
        record_config(run, &config, config.rng_seed, Some(exec));
        let network_dir = file.path(a.network, "network").usage()?;
        let trips_path = file.path(a.trips, "trips").usage()?;
        run.lap("config");

        let inputs = ingest(run, &network_dir, &trips_path, config.cell_size)?;
        let results = match_trips(&inputs.trips, &inputs.network, &config, exec);
        run.lap("match");

        let mut rejected: Vec<(&Trip, MatchError)> = Vec::new();
        let mut matched = Vec::new();
        for (trip, r) in inputs.trips.iter().zip(results) {
            match r {
                Ok(m) => matched.push(m),
                Err(e) => rejected.push((trip, e)),
            }
        }
        run.count("n_trips_matched", matched.len());
        run.count("n_trips_rejected", rejected.len());
        run.count(
            "n_points_matched",
            matched.iter().map(|m| m.matched.len()).sum::<usize>(),
        );
        let write = Some("write");
        run.write_output("matched_points.csv", |w| {
            let mut csv = csv::Writer::from_writer(w);
            for m in &matched {
                for p in &m.matched {
                    csv.serialize(MatchedRow {
                        driver_id: m.driver_id,
                        trip_id: m.trip_id,
                        point_id: p.point.point_id,
                        timestamp: p.point.timestamp,
                        segment_id: p.segment_id,
                        direction: p.direction_of_travel.sign(),
                        projected_lat: p.projected_lat,
                        projected_lon: p.projected_lon,
                        snap_distance_m: p.snap_distance,
                    })?;
                }
            }
            csv.flush()?;
            Ok(())
        })
        .or_fail(exit::UNEXPECTED, write)?;
        run.write_output("rejected_trips.csv", |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(["driver_id", "trip_id", "reason"])?;
            for (t, e) in &rejected {
                csv.write_record([
                    t.driver_id.to_string(),
                    t.trip_id.to_string(),
                    e.reason().to_string(),
                ])?;
            }
            csv.flush()?;
            Ok(())
        })
        .or_fail(exit::UNEXPECTED, write)?;
        run.lap("write");
        if matched.is_empty() {
            return Err(anyhow!("no trip matched the road network"))
                .or_fail(exit::EMPTY, Some("match"));
        }
        Ok(())
    })
}

pub fn score(a: ScoreArgs) -> u8 {
    execute("score", |run| {
        let file = ConfigFile::load(a.analysis.config.as_deref()).usage()?;
        file.check_keys(&known_keys(&["features", "model", "out"]))
            .usage()?;
        let out = file.path(a.out, "out").usage()?;
        run.set_out_dir(&out).usage()?;
        let (config, exec) = analysis_config(&a.analysis, &file, Some(0.0)).usage()?;
        record_config(run, &config, config.rng_seed, Some(exec));
        let features_path = file.path(a.features, "features").usage()?;
        let model_path: Option<PathBuf> = file.pick(a.model, "model").usage()?;
        run.lap("config");

        run.input(&features_path).usage()?;
        let table = FeatureTable::read_csv(open(&features_path).usage()?)
            .or_fail(exit::USAGE, Some("features"))?;
        run.count("n_trips", table.len());
        run.lap("features");

        let stage = Some("score");
        let scoring_code = |e: &ScoringError| match e {
            ScoringError::InsufficientTrips(_) => exit::EMPTY,
            ScoringError::Forest(_) => exit::USAGE,
            ScoringError::Csv(_) => exit::UNEXPECTED,
        };
        let (trips, fitted) = match &model_path {
            Some(path) => {
                run.input(path).usage()?;
                let text = std::fs::read_to_string(path).usage()?;
                let model = IForestModel::from_json(&text).or_fail(exit::USAGE, stage)?;
                if config.per_category {
                    log::warn!("--per-category is ignored when scoring with a saved model");
                }
                let trips =
                    score_with_models(&table, &model, &[], &config, exec).map_err(|e| Failure {
                        code: scoring_code(&e),
                        stage: stage.map(str::to_string),
                        error: e.into(),
                    })?;
                (trips, None)
            }
            None => {
                let s = score_trips(&table, &config, exec).map_err(|e| Failure {
                    code: scoring_code(&e),
                    stage: stage.map(str::to_string),
                    error: e.into(),
                })?;
                (s.trips, Some(s.model))
            }
        };
        let drivers = aggregate_drivers(&trips, config.top_fraction);
        run.count("n_drivers", drivers.len());
        run.count(
            "n_abnormal_trips",
            trips.iter().filter(|t| t.label.is_abnormal()).count(),
        );
        run.lap("score");

        let write = Some("write");
        run.write_output("trip_scores.csv", |w| Ok(write_trip_scores_csv(&trips, w)?))
            .or_fail(exit::UNEXPECTED, write)?;
        run.write_output("driver_report.csv", |w| {
            Ok(write_driver_report_csv(&drivers, w)?)
        })
        .or_fail(exit::UNEXPECTED, write)?;
        if let Some(model) = fitted {
            let json = model.to_json().or_fail(exit::UNEXPECTED, write)?;
            run.write_output("model.json", |w| Ok(writeln!(w, "{json}")?))
                .or_fail(exit::UNEXPECTED, write)?;
        }
        run.lap("write");
        Ok(())
    })
}

#[derive(Serialize)]
struct MetricsFile {
    counts: ConfusionCounts,
    metrics: Metrics,
    n_drivers: usize,
}

pub fn evaluate(a: EvaluateArgs) -> u8 {
    execute("evaluate", |run| {
        let out = a
            .out
            .clone()
            .or_else(|| a.pred.parent().map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("."));
        let out = if out.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            out
        };
        run.set_out_dir(&out).usage()?;
        run.input(&a.pred).usage()?;
        run.input(&a.truth).usage()?;
        let stage = Some("evaluate");
        let pred = read_driver_labels(open(&a.pred).usage()?).or_fail(exit::USAGE, stage)?;
        let truth = read_driver_labels(open(&a.truth).usage()?).or_fail(exit::USAGE, stage)?;
        let counts = confusion(&pred, &truth).map_err(|e| Failure {
            code: match e {
                EvalError::KeyMismatch { .. } | EvalError::Empty => exit::MISMATCH,
                _ => exit::USAGE,
            },
            stage: stage.map(str::to_string),
            error: e.into(),
        })?;
        let m = metrics(&counts);
        run.count("confusion", counts);
        run.lap("evaluate");
        println!(
            "ACC {:.2}  P {:.2}  R {:.2}  F1 {:.2}  (tp {} tn {} fp {} fn {})",
            m.acc, m.precision, m.recall, m.f1, counts.tp, counts.tn, counts.fp, counts.fn_
        );
        run.write_json(
            "metrics.json",
            &MetricsFile {
                counts,
                metrics: m,
                n_drivers: counts.total(),
            },
        )
        .or_fail(exit::UNEXPECTED, Some("write"))?;
        Ok(())
    })
}
