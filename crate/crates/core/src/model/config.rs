use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{field} must be {requirement}, got {value}")]
    OutOfRange {
        field: &'static str,
        requirement: &'static str,
        value: f64,
    },
}

/// Every tunable of a pipeline run.
///
/// `alpha` has no meaningful default and must be chosen per dataset; trips
/// whose traveled length is not strictly greater than it are discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Minimum trip length in meters.
    pub alpha: f64,
    pub trip_score_threshold: f64,
    pub contamination: f64,
    pub top_fraction: f64,
    pub n_trees: usize,
    pub subsample_size: usize,
    pub rng_seed: u64,
    /// Meters.
    pub max_snap_distance: f64,
    pub min_matched_fraction: f64,
    /// m/s², used only when the input carries no event flags.
    pub hard_event_accel_threshold: f64,
    /// Grid cell edge in meters for the segment index.
    pub cell_size: f64,
    /// Fit one extra forest per feature group.
    pub per_category: bool,
}

impl AnalysisConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            trip_score_threshold: 0.6,
            contamination: 0.2,
            top_fraction: 0.2,
            n_trees: 100,
            subsample_size: 256,
            rng_seed: 0,
            max_snap_distance: 50.0,
            min_matched_fraction: 0.8,
            hard_event_accel_threshold: 3.0,
            cell_size: 200.0,
            per_category: false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check(
            field: &'static str,
            value: f64,
            requirement: &'static str,
            ok: bool,
        ) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange {
                    field,
                    requirement,
                    value,
                })
            }
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        check("alpha", self.alpha, ">= 0", self.alpha >= 0.0)?;
        check(
            "trip_score_threshold",
            self.trip_score_threshold,
            "in (0, 1)",
            unit(self.trip_score_threshold),
        )?;
        check(
            "contamination",
            self.contamination,
            "in (0, 1)",
            unit(self.contamination),
        )?;
        check(
            "top_fraction",
            self.top_fraction,
            "in (0, 1)",
            unit(self.top_fraction),
        )?;
        check(
            "min_matched_fraction",
            self.min_matched_fraction,
            "in (0, 1)",
            unit(self.min_matched_fraction),
        )?;
        check("n_trees", self.n_trees as f64, ">= 1", self.n_trees >= 1)?;
        check(
            "subsample_size",
            self.subsample_size as f64,
            ">= 2",
            self.subsample_size >= 2,
        )?;
        check(
            "max_snap_distance",
            self.max_snap_distance,
            "> 0",
            self.max_snap_distance > 0.0,
        )?;
        check(
            "hard_event_accel_threshold",
            self.hard_event_accel_threshold,
            "> 0",
            self.hard_event_accel_threshold > 0.0,
        )?;
        check("cell_size", self.cell_size, "> 0", self.cell_size > 0.0)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = AnalysisConfig::new(1000.0);
        assert_eq!(cfg.trip_score_threshold, 0.6);
        assert_eq!(cfg.contamination, 0.2);
        assert_eq!(cfg.top_fraction, 0.2);
        assert_eq!((cfg.n_trees, cfg.subsample_size), (100, 256));
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_out_of_range() {
        let mut cfg = AnalysisConfig::new(-1.0);
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.0;
        cfg.top_fraction = 1.0;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("top_fraction"));
        cfg.top_fraction = 0.1;
        cfg.subsample_size = 1;
        assert!(cfg.validate().is_err());
    }
}
