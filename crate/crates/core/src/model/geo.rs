//! Great-circle geometry and circular statistics on course-over-ground angles.
//!
//! Everything here works in degrees and meters on a spherical Earth of radius
//! [`EARTH_RADIUS_M`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Resultant vector lengths below this are treated as having no direction.
const DEGENERATE_RESULTANT: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("undefined bearing: start and end coincide")]
    UndefinedBearing,
    #[error("circular mean of an empty sequence")]
    EmptyAngles,
}

/// A latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Haversine distance between two points, in meters.
pub fn haversine_distance(a: LatLon, b: LatLon) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let d_phi = phi2 - phi1;
    let d_lambda = (b.lon - a.lon).to_radians();
    let h = (d_phi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (d_lambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `a` to `b`, in `[0, 360)`.
pub fn bearing(a: LatLon, b: LatLon) -> Result<f64, GeoError> {
    if a == b {
        return Err(GeoError::UndefinedBearing);
    }
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let d_lambda = (b.lon - a.lon).to_radians();
    let y = d_lambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * d_lambda.cos();
    Ok(normalize_degrees(y.atan2(x).to_degrees()))
}

/// Point reached by travelling `distance_m` from `start` along the initial bearing.
pub fn destination(start: LatLon, bearing_deg: f64, distance_m: f64) -> LatLon {
    let delta = distance_m / EARTH_RADIUS_M;
    let theta = bearing_deg.to_radians();
    let phi1 = start.lat.to_radians();
    let lambda1 = start.lon.to_radians();
    let phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos()).asin();
    let lambda2 = lambda1
        + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * phi2.sin());
    LatLon::new(phi2.to_degrees(), normalize_longitude(lambda2.to_degrees()))
}

/// Wraps any finite angle into `[0, 360)`.
pub fn normalize_degrees(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360.0 for tiny negative inputs
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

fn normalize_longitude(lon: f64) -> f64 {
    let l = normalize_degrees(lon + 180.0) - 180.0;
    if l < -180.0 {
        l + 360.0
    } else {
        l
    }
}

/// Smallest absolute difference between two directions, in `[0, 180]`.
pub fn angular_difference(a: f64, b: f64) -> f64 {
    let d = normalize_degrees(a - b);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Result of averaging angles on the unit circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircularMean {
    /// Mean direction in `[0, 360)`.
    pub mean: f64,
    /// Mean resultant length in `[0, 1]`; `1 - resultant` is the circular variance.
    pub resultant: f64,
    /// Set when the unit vectors cancel out; `mean` then holds the first angle.
    pub degenerate: bool,
}

/// Circular mean of a sequence of angles in degrees.
pub fn circular_mean(angles: &[f64]) -> Result<CircularMean, GeoError> {
    let first = *angles.first().ok_or(GeoError::EmptyAngles)?;
    let (sin_sum, cos_sum) = angles.iter().fold((0.0, 0.0), |(s, c), a| {
        let r = a.to_radians();
        (s + r.sin(), c + r.cos())
    });
    let n = angles.len() as f64;
    let length = sin_sum.hypot(cos_sum);
    let resultant = (length / n).min(1.0);
    if length / n < DEGENERATE_RESULTANT {
        return Ok(CircularMean {
            mean: normalize_degrees(first),
            resultant: 0.0,
            degenerate: true,
        });
    }
    Ok(CircularMean {
        mean: normalize_degrees(sin_sum.atan2(cos_sum).to_degrees()),
        resultant,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ONE_DEGREE_AT_EQUATOR: f64 = 111_194.926_644_558_74;

    #[test]
    fn haversine_examples() {
        let origin = LatLon::new(0.0, 0.0);
        assert_eq!(haversine_distance(origin, origin), 0.0);
        let d = haversine_distance(origin, LatLon::new(0.0, 1.0));
        assert!((d - ONE_DEGREE_AT_EQUATOR).abs() < 1.0, "{d}");
        let d = haversine_distance(origin, LatLon::new(0.001, 0.0));
        assert!((d - ONE_DEGREE_AT_EQUATOR / 1000.0).abs() < 0.01, "{d}");
    }

    #[test]
    fn bearing_examples() {
        let o = LatLon::new(0.0, 0.0);
        assert!(bearing(o, LatLon::new(1.0, 0.0)).unwrap().abs() < 1e-12);
        assert!((bearing(o, LatLon::new(0.0, 1.0)).unwrap() - 90.0).abs() < 1e-12);
        let b = bearing(o, LatLon::new(1.0, 1.0)).unwrap();
        assert!((b - 44.995_636_455_344_85).abs() < 1e-9, "{b}");
        assert!((b - 45.0).abs() < 0.01);
        assert_eq!(bearing(o, o), Err(GeoError::UndefinedBearing));
    }

    #[test]
    fn circular_mean_examples() {
        assert!((circular_mean(&[90.0]).unwrap().mean - 90.0).abs() < 1e-9);
        let m = circular_mean(&[350.0, 10.0]).unwrap().mean;
        assert!(angular_difference(m, 0.0) < 1e-9, "{m}");
        assert!((circular_mean(&[0.0, 90.0]).unwrap().mean - 45.0).abs() < 1e-9);
    }

    #[test]
    fn opposed_angles_are_degenerate() {
        let m = circular_mean(&[30.0, 210.0]).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.mean, 30.0);
        assert_eq!(circular_mean(&[]), Err(GeoError::EmptyAngles));
    }

    #[test]
    fn destination_inverts_haversine_and_bearing() {
        let start = LatLon::new(26.37, -80.1);
        let end = destination(start, 37.0, 1234.5);
        assert!((haversine_distance(start, end) - 1234.5).abs() < 1e-6);
        assert!((bearing(start, end).unwrap() - 37.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_handles_wrap() {
        assert_eq!(normalize_degrees(-1e-18), 0.0);
        assert_eq!(normalize_degrees(360.0), 0.0);
        assert_eq!(normalize_degrees(-90.0), 270.0);
        assert_eq!(angular_difference(350.0, 10.0), 20.0);
    }

    fn coord() -> impl Strategy<Value = LatLon> {
        (-60.0f64..60.0, -170.0f64..170.0).prop_map(|(lat, lon)| LatLon::new(lat, lon))
    }

    proptest! {
        #[test]
        fn haversine_triangle_inequality(a in coord(), b in coord(), c in coord()) {
            let ab = haversine_distance(a, b);
            let bc = haversine_distance(b, c);
            let ac = haversine_distance(a, c);
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-6) + 1e-6);
            prop_assert!((ab - haversine_distance(b, a)).abs() < 1e-6);
        }

        #[test]
        fn circular_mean_rotation_equivariant(
            angles in prop::collection::vec(0.0f64..120.0, 1..20),
            rot in 0.0f64..360.0,
        ) {
            let base = circular_mean(&angles).unwrap();
            let rotated: Vec<f64> = angles.iter().map(|a| normalize_degrees(a + rot)).collect();
            let moved = circular_mean(&rotated).unwrap();
            prop_assert!(angular_difference(moved.mean, normalize_degrees(base.mean + rot)) < 1e-9);
        }

        #[test]
        fn circular_mean_within_half_circle_arc(
            start in 0.0f64..360.0,
            offsets in prop::collection::vec(0.0f64..179.0, 1..20),
        ) {
            let angles: Vec<f64> = offsets.iter().map(|o| normalize_degrees(start + o)).collect();
            let lo = offsets.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let m = circular_mean(&angles).unwrap().mean;
            let offset = normalize_degrees(m - start);
            prop_assert!(offset >= lo - 1e-9 && offset <= hi + 1e-9, "{offset} not in [{lo}, {hi}]");
        }
    }
}
