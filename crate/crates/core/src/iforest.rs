//! Isolation Forest.
//!
//! Each tree is grown on its own uniform subsample drawn without replacement.
//! Internal nodes split on a dimension chosen uniformly among those with a
//! non-empty value range, at a threshold drawn uniformly inside that range.
//! Growth stops at one point, at depth `ceil(log2 psi)`, or when every
//! dimension is constant. A point's anomaly score is `2^(-E[h] / c(psi))`,
//! with `h` its external-node depth plus `c(size)` of that node.
//!
//! Tree `i` draws from a ChaCha8 stream seeded with `seed ^ i`, so trees can
//! be grown in any order or in parallel with identical results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::Execution;

pub const EULER_GAMMA: f64 = 0.577_215_664_9;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IForestError {
    #[error("need at least 2 training vectors, got {0}")]
    InsufficientData(usize),
    #[error("vector {row} has {got} dimensions, expected {expected}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("vector {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Average path length of an unsuccessful binary search tree lookup over `n` items.
pub fn average_path_length(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n = n as f64;
    2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
}

/// Anomaly score for a mean path length, normalized by `c_psi`.
pub fn score_from_mean_path_length(mean_path: f64, c_psi: f64) -> f64 {
    (-mean_path / c_psi).exp2()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IForestParams {
    pub n_trees: usize,
    /// Requested subsample size; clamped to the dataset size at fit time.
    pub subsample_size: usize,
    pub rng_seed: u64,
}

impl Default for IForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            subsample_size: 256,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Internal {
        dim: usize,
        split: f64,
        left: usize,
        right: usize,
    },
    External {
        size: usize,
        depth: usize,
    },
}

/// One isolation tree stored as an arena; `nodes[0]` is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ITree {
    pub nodes: Vec<Node>,
}

impl ITree {
    /// Depth of the external node `x` lands in, plus `c(size)` of that node.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Internal {
                    dim,
                    split,
                    left,
                    right,
                } => i = if x[dim] < split { left } else { right },
                Node::External { size, depth } => return depth as f64 + average_path_length(size),
            }
        }
    }

    pub fn max_external_depth(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::External { depth, .. } => Some(*depth),
                Node::Internal { .. } => None,
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IForestModel {
    pub version: u32,
    pub params: IForestParams,
    pub n_features: usize,
    /// Effective subsample size each tree was trained on.
    pub psi: usize,
    pub max_depth: usize,
    pub c_psi: f64,
    /// Set when the training data had no variance in any dimension.
    pub no_variance: bool,
    pub trees: Vec<ITree>,
}

/// Borrowed training rows.
struct Dataset<'a> {
    rows: &'a [Vec<f64>],
}

impl Dataset<'_> {
    fn value(&self, row: usize, dim: usize) -> f64 {
        self.rows[row][dim]
    }
}

fn validate_rows(rows: &[Vec<f64>], n_features: usize) -> Result<(), IForestError> {
    for (row, x) in rows.iter().enumerate() {
        if x.len() != n_features {
            return Err(IForestError::DimensionMismatch {
                row,
                expected: n_features,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(IForestError::NonFinite { row });
        }
    }
    Ok(())
}

/// Midpoint of `[lo, hi]` if some float lies strictly between them.
fn interior_mid(lo: f64, hi: f64) -> Option<f64> {
    let mid = lo + (hi - lo) / 2.0;
    (lo < mid && mid < hi).then_some(mid)
}

struct TreeBuilder<'a> {
    data: &'a Dataset<'a>,
    n_features: usize,
    max_depth: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    candidates: Vec<(usize, f64, f64)>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, points: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::External {
            size: points.len(),
            depth,
        });
        if points.len() <= 1 || depth >= self.max_depth {
            return id;
        }
        self.candidates.clear();
        for dim in 0..self.n_features {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &p in points.iter() {
                let v = self.data.value(p, dim);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if interior_mid(lo, hi).is_some() {
                self.candidates.push((dim, lo, hi));
            }
        }
        if self.candidates.is_empty() {
            return id;
        }
        let (dim, lo, hi) = self.candidates[self.rng.random_range(0..self.candidates.len())];
        let mut split = self.rng.random_range(lo..hi);
        if split <= lo {
            split = interior_mid(lo, hi).expect("candidate has an interior");
        }

        let mut boundary = 0;
        for i in 0..points.len() {
            if self.data.value(points[i], dim) < split {
                points.swap(i, boundary);
                boundary += 1;
            }
        }
        let (left_pts, right_pts) = points.split_at_mut(boundary);
        let left = self.grow(left_pts, depth + 1);
        let right = self.grow(right_pts, depth + 1);
        self.nodes[id] = Node::Internal {
            dim,
            split,
            left,
            right,
        };
        id
    }
}

fn has_variance(rows: &[Vec<f64>], n_features: usize) -> bool {
    (0..n_features).any(|d| {
        let first = rows[0][d];
        rows.iter().any(|r| r[d] != first)
    })
}

/// Fits a forest on `rows`; every row must have the same length.
pub fn fit(
    rows: &[Vec<f64>],
    params: &IForestParams,
    exec: Execution,
) -> Result<IForestModel, IForestError> {
    if params.n_trees == 0 || params.subsample_size < 2 {
        return Err(IForestError::InvalidParams(format!(
            "n_trees = {} (>= 1), subsample_size = {} (>= 2)",
            params.n_trees, params.subsample_size
        )));
    }
    if rows.len() < 2 {
        return Err(IForestError::InsufficientData(rows.len()));
    }
    let n_features = rows[0].len();
    validate_rows(rows, n_features)?;

    let psi = params.subsample_size.min(rows.len());
    let max_depth = (psi as f64).log2().ceil() as usize;
    let no_variance = !has_variance(rows, n_features);
    if no_variance {
        log::warn!(
            "no variance: all {} training vectors are identical",
            rows.len()
        );
    }

    let data = Dataset { rows };
    let trees = exec.map_range(params.n_trees, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed ^ t as u64);
        let mut sample = index::sample(&mut rng, rows.len(), psi).into_vec();
        let mut builder = TreeBuilder {
            data: &data,
            n_features,
            max_depth,
            rng,
            nodes: Vec::with_capacity(2 * psi),
            candidates: Vec::with_capacity(n_features),
        };
        builder.grow(&mut sample, 0);
        ITree {
            nodes: builder.nodes,
        }
    });

    Ok(IForestModel {
        version: MODEL_FORMAT_VERSION,
        params: *params,
        n_features,
        psi,
        max_depth,
        c_psi: average_path_length(psi),
        no_variance,
        trees,
    })
}

impl IForestModel {
    /// Mean path length of `x` over all trees.
    pub fn mean_path_length(&self, x: &[f64]) -> Result<f64, IForestError> {
        if x.len() != self.n_features {
            return Err(IForestError::DimensionMismatch {
                row: 0,
                expected: self.n_features,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(IForestError::NonFinite { row: 0 });
        }
        let total: f64 = self.trees.iter().map(|t| t.path_length(x)).sum();
        Ok(total / self.trees.len() as f64)
    }

    /// Anomaly score in `(0, 1)`; higher is more anomalous.
    pub fn score(&self, x: &[f64]) -> Result<f64, IForestError> {
        Ok(score_from_mean_path_length(
            self.mean_path_length(x)?,
            self.c_psi,
        ))
    }

    pub fn score_all(&self, rows: &[Vec<f64>], exec: Execution) -> Result<Vec<f64>, IForestError> {
        exec.map(rows, |x| self.score(x))
            .into_iter()
            .enumerate()
            .map(|(row, r)| {
                r.map_err(|e| match e {
                    IForestError::DimensionMismatch { expected, got, .. } => {
                        IForestError::DimensionMismatch { row, expected, got }
                    }
                    IForestError::NonFinite { .. } => IForestError::NonFinite { row },
                    other => other,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String, IForestError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, IForestError> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(text)?;
        if probe.version != MODEL_FORMAT_VERSION {
            return Err(IForestError::UnsupportedVersion(probe.version));
        }
        Ok(serde_json::from_str(text)?)
    }
}

/// Number of items in the top `fraction` of `n`, rounded up.
///
/// The product is nudged down by a tiny epsilon so that values such as
/// `0.7 * 10` that land a hair above an integer do not round up past it.
pub fn top_count(fraction: f64, n: usize) -> usize {
    let raw = (fraction * n as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContaminationThreshold {
    pub threshold: f64,
    /// Count of scores at or above `threshold`.
    pub n_flagged: usize,
}

/// Score of the `ceil(contamination * N)`-th highest value; every score at or
/// above it is flagged.
pub fn threshold_from_contamination(scores: &[f64], contamination: f64) -> ContaminationThreshold {
    assert!(!scores.is_empty(), "contamination threshold of no scores");
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = top_count(contamination, sorted.len()).max(1);
    let threshold = sorted[k - 1];
    ContaminationThreshold {
        threshold,
        n_flagged: scores.iter().filter(|&&s| s >= threshold).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    // frozen from an independent high-precision evaluation of the formula
    const C_256: f64 = 10.244_770_920_116_852;

    #[test]
    fn average_path_length_values() {
        assert_eq!(average_path_length(0), 0.0);
        assert_eq!(average_path_length(1), 0.0);
        assert!((average_path_length(2) - 0.154_43).abs() < 1e-5);
        assert!((average_path_length(256) - C_256).abs() < 1e-9);
    }

    #[test]
    fn score_formula_limits() {
        let c = average_path_length(256);
        assert_eq!(score_from_mean_path_length(c, c), 0.5);
        assert!(score_from_mean_path_length(0.01 * c, c) > 0.99);
    }

    #[test]
    fn two_points_one_tree() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 3.0]];
        let params = IForestParams {
            n_trees: 1,
            subsample_size: 256,
            rng_seed: 9,
        };
        let m = fit(&rows, &params, Execution::Sequential).unwrap();
        assert_eq!((m.psi, m.max_depth), (2, 1));
        let nodes = &m.trees[0].nodes;
        assert_eq!(nodes.len(), 3);
        assert!(matches!(nodes[0], Node::Internal { .. }));
        for n in &nodes[1..] {
            assert_eq!(*n, Node::External { size: 1, depth: 1 });
        }
    }

    fn uniform_rows(n: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dims).map(|_| rng.random::<f64>()).collect())
            .collect()
    }

    #[test]
    fn subsample_size_is_honored() {
        let rows = uniform_rows(500, 3, 1);
        let m = fit(&rows, &IForestParams::default(), Execution::Sequential).unwrap();
        assert_eq!(m.psi, 256);
        assert_eq!(m.trees.len(), 100);
        for t in &m.trees {
            let total: usize = t
                .nodes
                .iter()
                .map(|n| match n {
                    Node::External { size, .. } => *size,
                    _ => 0,
                })
                .sum();
            assert_eq!(total, 256);
            assert!(t.max_external_depth() <= 8);
        }
    }

    #[test]
    fn split_values_lie_strictly_inside_node_range() {
        let rows = uniform_rows(64, 2, 3);
        let params = IForestParams {
            n_trees: 5,
            subsample_size: 64,
            rng_seed: 4,
        };
        let m = fit(&rows, &params, Execution::Sequential).unwrap();
        fn check(t: &ITree, i: usize, pts: &[&Vec<f64>]) {
            if let Node::Internal {
                dim,
                split,
                left,
                right,
            } = t.nodes[i]
            {
                let lo = pts.iter().map(|p| p[dim]).fold(f64::INFINITY, f64::min);
                let hi = pts.iter().map(|p| p[dim]).fold(f64::NEG_INFINITY, f64::max);
                assert!(lo < split && split < hi);
                let (l, r): (Vec<_>, Vec<_>) = pts.iter().partition(|p| p[dim] < split);
                check(t, left, &l);
                check(t, right, &r);
            }
        }
        for t in &m.trees {
            check(t, 0, &rows.iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn determinism_and_parallel_equivalence() {
        let rows = uniform_rows(300, 4, 11);
        let params = IForestParams {
            rng_seed: 42,
            ..Default::default()
        };
        let a = fit(&rows, &params, Execution::Sequential).unwrap();
        let b = fit(&rows, &params, Execution::Sequential).unwrap();
        let c = fit(&rows, &params, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(
            a.score_all(&rows, Execution::Sequential).unwrap(),
            c.score_all(&rows, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn identical_data_scores_half() {
        let rows = vec![vec![1.0, 2.0]; 10];
        let m = fit(&rows, &IForestParams::default(), Execution::Sequential).unwrap();
        assert!(m.no_variance);
        for t in &m.trees {
            assert_eq!(t.nodes, vec![Node::External { size: 10, depth: 0 }]);
        }
        // mean of 100 equal path lengths, so only rounding separates it from c(psi)
        assert!((m.score(&[1.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!((m.score(&[100.0, -5.0]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn outlier_beats_every_inlier() {
        let mut rows = uniform_rows(200, 2, 7);
        rows.push(vec![10.0, 10.0]);
        let params = IForestParams {
            rng_seed: 42,
            ..Default::default()
        };
        let m = fit(&rows, &params, Execution::Sequential).unwrap();
        let scores = m.score_all(&rows, Execution::Sequential).unwrap();
        let out = scores[200];
        assert!(scores[..200].iter().all(|&s| s < out));
    }

    #[test]
    fn score_non_decreasing_with_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sigma = 1.0;
        let normal = Normal::new(0.0, sigma).unwrap();
        let cluster: Vec<Vec<f64>> = (0..100).map(|_| vec![normal.sample(&mut rng)]).collect();
        let params = IForestParams {
            rng_seed: 8,
            ..Default::default()
        };
        let mut last = 0.0;
        for k in [2.0, 5.0, 10.0] {
            let mut rows = cluster.clone();
            rows.push(vec![k * sigma + 3.0]);
            let m = fit(&rows, &params, Execution::Sequential).unwrap();
            let s = m.score(&rows[100]).unwrap();
            assert!(s >= last, "{s} < {last} at {k} sigma");
            last = s;
        }
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let rows = uniform_rows(50, 3, 2);
        let params = IForestParams {
            n_trees: 10,
            subsample_size: 32,
            rng_seed: 1,
        };
        let m = fit(&rows, &params, Execution::Sequential).unwrap();
        let text = m.to_json().unwrap();
        assert!(text.starts_with("{\"version\":1,\"params\":{"));
        let back = IForestModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            IForestModel::from_json(&bumped),
            Err(IForestError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn input_validation() {
        let p = IForestParams::default();
        assert!(matches!(
            fit(&[vec![1.0]], &p, Execution::Sequential),
            Err(IForestError::InsufficientData(1))
        ));
        assert!(matches!(
            fit(&[vec![1.0], vec![1.0, 2.0]], &p, Execution::Sequential),
            Err(IForestError::DimensionMismatch { row: 1, .. })
        ));
        assert!(matches!(
            fit(&[vec![1.0], vec![f64::NAN]], &p, Execution::Sequential),
            Err(IForestError::NonFinite { row: 1 })
        ));
        let m = fit(&[vec![1.0], vec![2.0]], &p, Execution::Sequential).unwrap();
        assert!(m.score(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn contamination_threshold_rule() {
        let t = threshold_from_contamination(&[0.9, 0.5, 0.4, 0.3, 0.2], 0.2);
        assert_eq!((t.threshold, t.n_flagged), (0.9, 1));
        assert_eq!(top_count(0.2, 18), 4);
        assert_eq!(top_count(0.1, 18), 2);
        assert_eq!(top_count(0.7, 10), 7);
        let scores: Vec<f64> = (0..18).map(|i| i as f64 / 20.0).collect();
        assert_eq!(threshold_from_contamination(&scores, 0.2).n_flagged, 4);
        let t = threshold_from_contamination(&[0.4; 6], 0.2);
        assert_eq!(t.n_flagged, 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn scores_strictly_inside_unit_interval(
            seed in any::<u64>(),
            n in 2usize..80,
            probe in prop::collection::vec(-1e6f64..1e6, 3),
        ) {
            let rows = uniform_rows(n, 3, seed);
            let params = IForestParams { n_trees: 20, subsample_size: 64, rng_seed: seed };
            let m = fit(&rows, &params, Execution::Sequential).unwrap();
            for x in rows.iter().chain(std::iter::once(&probe)) {
                let s = m.score(x).unwrap();
                prop_assert!(s > 0.0 && s < 1.0, "score {s}");
            }
        }

        #[test]
        fn duplicate_inlier_keeps_outliers_flagged(seed in 0u64..1000) {
            let mut rows = uniform_rows(100, 2, seed);
            for k in 0..5 {
                rows.push(vec![20.0 + 5.0 * k as f64, -20.0 - 3.0 * k as f64]);
            }
            let params = IForestParams { rng_seed: seed, ..Default::default() };
            let flagged = |rows: &[Vec<f64>]| {
                let m = fit(rows, &params, Execution::Sequential).unwrap();
                let s = m.score_all(rows, Execution::Sequential).unwrap();
                let t = threshold_from_contamination(&s, 0.05);
                (100..105).filter(|&i| s[i] >= t.threshold).count()
            };
            let before = flagged(&rows);
            let mut dup = rows.clone();
            dup.push(rows[3].clone());
            prop_assert_eq!(before, 5);
            prop_assert_eq!(flagged(&dup), 5);
        }
    }
}
