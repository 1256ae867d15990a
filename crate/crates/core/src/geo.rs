//! Geodesic primitives on a spherical earth.
//!
//! Coordinates are decimal degrees, distances are meters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean earth radius used for every distance in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Upper clamp for the haversine term `a`, keeping `1 - a` away from zero.
const HAVERSINE_A_MAX: f64 = 1.0 - 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("not a distribution: weights sum to {0}")]
    NotADistribution(f64),
    #[error("length mismatch: {points} points, {weights} weights")]
    LengthMismatch { points: usize, weights: usize },
    #[error("degenerate heading: origin and through point coincide")]
    DegenerateHeading,
    #[error("invalid coordinate ({lat}, {lon})")]
    InvalidCoordinate { lat: f64, lon: f64 },
}

/// A GPS observation `(lat, lon)` in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    /// Checked constructor enforcing the latitude/longitude ranges.
    pub fn checked(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = Self { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(GeoError::InvalidCoordinate { lat, lon })
        }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Sphere used for distance computations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarthModel {
    pub radius_m: f64,
}

impl Default for EarthModel {
    fn default() -> Self {
        Self {
            radius_m: EARTH_RADIUS_M,
        }
    }
}

impl EarthModel {
    /// Haversine distance in the `2 r atan(sqrt(a / (1 - a)))` form.
    pub fn haversine(&self, a: GeoPoint, b: GeoPoint) -> f64 {
        let term = haversine_term(a, b);
        2.0 * self.radius_m * (term / (1.0 - term)).sqrt().atan()
    }
}

/// The haversine term `a` for two points, clamped to `[0, 1 - 1e-12]`.
pub fn haversine_term(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi_a = a.lat.to_radians();
    let phi_b = b.lat.to_radians();
    let half_dphi = (b.lat - a.lat).to_radians() / 2.0;
    let half_dlambda = (b.lon - a.lon).to_radians() / 2.0;
    let term = half_dphi.sin().powi(2) + phi_a.cos() * phi_b.cos() * half_dlambda.sin().powi(2);
    term.clamp(0.0, HAVERSINE_A_MAX)
}

/// Great-circle distance between two points in meters.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    EarthModel::default().haversine(a, b)
}

/// Sum of consecutive haversine distances along a path.
pub fn path_length(points: &[GeoPoint]) -> Result<f64, GeoError> {
    if points.is_empty() {
        return Err(GeoError::EmptyTrajectory);
    }
    Ok(points.windows(2).map(|w| haversine(w[0], w[1])).sum())
}

/// Component-wise weighted average of coordinates. The weights must form a
/// distribution (sum to 1 within 1e-6).
pub fn weighted_mean_point(points: &[GeoPoint], weights: &[f64]) -> Result<GeoPoint, GeoError> {
    if points.len() != weights.len() {
        return Err(GeoError::LengthMismatch {
            points: points.len(),
            weights: weights.len(),
        });
    }
    if points.is_empty() {
        return Err(GeoError::EmptyTrajectory);
    }
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || (total - 1.0).abs() > 1e-6 {
        return Err(GeoError::NotADistribution(total));
    }
    let (lat, lon) = points
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(lat, lon), (p, w)| {
            (lat + w * p.lat, lon + w * p.lon)
        });
    Ok(GeoPoint::new(lat, lon))
}

/// Local equirectangular projection around an anchor point, in meters.
#[derive(Debug, Clone, Copy)]
pub struct LocalPlane {
    anchor: GeoPoint,
    meters_per_deg_lat: f64,
    meters_per_deg_lon: f64,
}

impl LocalPlane {
    pub fn new(anchor: GeoPoint) -> Self {
        let meters_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Self {
            anchor,
            meters_per_deg_lat,
            meters_per_deg_lon: meters_per_deg_lat * anchor.lat.to_radians().cos(),
        }
    }

    /// `(east, north)` offset of `p` from the anchor.
    pub fn project(&self, p: GeoPoint) -> (f64, f64) {
        (
            (p.lon - self.anchor.lon) * self.meters_per_deg_lon,
            (p.lat - self.anchor.lat) * self.meters_per_deg_lat,
        )
    }
}

/// Distance from `target` to the ray that starts at `through` and points away
/// from `origin`. Targets behind the ray start measure their distance to
/// `through`.
pub fn point_to_ray_distance(
    origin: GeoPoint,
    through: GeoPoint,
    target: GeoPoint,
) -> Result<f64, GeoError> {
    if origin == through {
        return Err(GeoError::DegenerateHeading);
    }
    let plane = LocalPlane::new(through);
    let (ox, oy) = plane.project(origin);
    let (tx, ty) = plane.project(target);
    // direction from origin towards `through` (which sits at the plane origin)
    let (dx, dy) = (-ox, -oy);
    let norm = (dx * dx + dy * dy).sqrt();
    if norm == 0.0 {
        return Err(GeoError::DegenerateHeading);
    }
    let (ux, uy) = (dx / norm, dy / norm);
    let along = tx * ux + ty * uy;
    if along <= 0.0 {
        return Ok((tx * tx + ty * ty).sqrt());
    }
    Ok((tx * uy - ty * ux).abs())
}
