//! Great-circle distances on a spherical Earth.
//!
//! Two paths share one formula: [`orthodromic_distance`] evaluates the
//! spherical law of cosines directly, and [`TrigCache::distance_km`] reuses
//! per-point latitude sines/cosines computed once up front. The cache can also
//! replace `cos(Δlon)` with a lookup table whose value is the cosine at the
//! lower bound of the bin the angle falls in.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used when none is configured.
pub const DEFAULT_RADIUS_KM: f64 = 6371.0;

/// Default number of bins for the tabulated cosine (2^20).
pub const DEFAULT_GRAIN: usize = 1 << 20;

/// A location in geographic degrees.
///
/// Latitude is in `[-90, 90]`, longitude normalized into `(-180, 180]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidCoordinate(format!(
                "latitude {lat} outside [-90, 90]"
            )));
        }
        if !lon.is_finite() {
            return Err(Error::InvalidCoordinate(format!("longitude {lon} is not finite")));
        }
        Ok(Self {
            lat,
            lon: normalize_lon(lon),
        })
    }

    #[inline]
    pub fn lat(&self) -> f64 {
        self.lat
    }

    #[inline]
    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Maps any finite longitude into `(-180, 180]`.
pub fn normalize_lon(lon: f64) -> f64 {
    if lon > -180.0 && lon <= 180.0 {
        return lon;
    }
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if wrapped <= -180.0 {
        wrapped + 360.0
    } else {
        wrapped
    }
}

/// Latitude/longitude rectangle in degrees. Never crosses the antimeridian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBox {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
}

impl GeoBox {
    /// Smallest box holding every point; `None` for an empty slice.
    pub fn enclosing(points: impl IntoIterator<Item = GeoPoint>) -> Option<Self> {
        points.into_iter().fold(None, |acc, p| {
            Some(match acc {
                None => GeoBox {
                    west: p.lon,
                    south: p.lat,
                    east: p.lon,
                    north: p.lat,
                },
                Some(b) => GeoBox {
                    west: b.west.min(p.lon),
                    south: b.south.min(p.lat),
                    east: b.east.max(p.lon),
                    north: b.north.max(p.lat),
                },
            })
        })
    }

    #[inline]
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.south..=self.north).contains(&p.lat) && (self.west..=self.east).contains(&p.lon)
    }

    pub fn width_deg(&self) -> f64 {
        self.east - self.west
    }

    pub fn height_deg(&self) -> f64 {
        self.north - self.south
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.west < self.east && self.south < self.north)
    }

    /// True when every edge is finite and inside world bounds.
    pub fn within_world(&self) -> bool {
        [self.west, self.south, self.east, self.north]
            .iter()
            .all(|v| v.is_finite())
            && self.south >= -90.0
            && self.north <= 90.0
            && self.west >= -180.0
            && self.east <= 180.0
    }
}

/// Spherical Earth model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereModel {
    radius_km: f64,
}

impl SphereModel {
    pub fn new(radius_km: f64) -> Result<Self> {
        if !(radius_km.is_finite() && radius_km > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sphere radius must be positive, got {radius_km}"
            )));
        }
        Ok(Self { radius_km })
    }

    #[inline]
    pub fn radius_km(&self) -> f64 {
        self.radius_km
    }
}

impl Default for SphereModel {
    fn default() -> Self {
        Self {
            radius_km: DEFAULT_RADIUS_KM,
        }
    }
}

/// Latitude sine/cosine and longitude in radians for one location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointTrig {
    pub sin_lat: f64,
    pub cos_lat: f64,
    pub lon_rad: f64,
}

impl PointTrig {
    #[inline]
    pub fn new(p: GeoPoint) -> Self {
        let lat = p.lat.to_radians();
        Self {
            sin_lat: lat.sin(),
            cos_lat: lat.cos(),
            lon_rad: p.lon.to_radians(),
        }
    }
}

#[inline]
fn central_angle(a: &PointTrig, b: &PointTrig, cos_dlon: f64) -> f64 {
    let c = a.sin_lat * b.sin_lat + a.cos_lat * b.cos_lat * cos_dlon;
    c.clamp(-1.0, 1.0).acos()
}

/// Great-circle distance in km between `a` and `b` by the spherical law of
/// cosines, with the `acos` argument clamped to `[-1, 1]`.
pub fn orthodromic_distance(a: GeoPoint, b: GeoPoint, sphere: SphereModel) -> f64 {
    let ta = PointTrig::new(a);
    let tb = PointTrig::new(b);
    sphere.radius_km * central_angle(&ta, &tb, (tb.lon_rad - ta.lon_rad).cos())
}

/// Lookup table of `cos` over `[0, 2π)` split into `grain` equal bins.
#[derive(Debug, Clone)]
pub struct CosTable {
    bin_width: f64,
    inv_bin_width: f64,
    values: Vec<f64>,
}

impl CosTable {
    pub fn new(grain: usize) -> Result<Self> {
        if grain < 2 {
            return Err(Error::InvalidParameter(format!(
                "tabulation grain must be at least 2, got {grain}"
            )));
        }
        let bin_width = TAU / grain as f64;
        let values = (0..grain).map(|k| (k as f64 * bin_width).cos()).collect();
        Ok(Self {
            bin_width,
            inv_bin_width: grain as f64 / TAU,
            values,
        })
    }

    pub fn grain(&self) -> usize {
        self.values.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    /// Lower bound of every bin, in order.
    pub fn bin_lower_bounds(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |k| k as f64 * self.bin_width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `cos` evaluated at the lower bound of the bin containing `angle`.
    #[inline]
    pub fn cos(&self, angle: f64) -> f64 {
        let theta = angle.rem_euclid(TAU);
        let bin = ((theta * self.inv_bin_width) as usize).min(self.values.len() - 1);
        self.values[bin]
    }

    /// Worst-case `|table.cos(θ) − cos(θ)|`; `cos` is 1-Lipschitz so one bin
    /// width bounds it.
    pub fn max_abs_error(&self) -> f64 {
        self.bin_width
    }
}

/// Precomputed trigonometry for a fixed point set.
///
/// Immutable after construction; share it freely between workers.
#[derive(Debug, Clone)]
pub struct TrigCache {
    points: Vec<PointTrig>,
    table: Option<CosTable>,
    sphere: SphereModel,
}

impl TrigCache {
    /// Exact mode: latitudes cached, `cos(Δlon)` evaluated directly.
    pub fn exact(points: &[GeoPoint], sphere: SphereModel) -> Self {
        Self {
            points: points.iter().copied().map(PointTrig::new).collect(),
            table: None,
            sphere,
        }
    }

    /// Tabulated mode with `grain` cosine bins over `[0, 2π)`.
    pub fn tabulated(points: &[GeoPoint], grain: usize, sphere: SphereModel) -> Result<Self> {
        let table = CosTable::new(grain)?;
        Ok(Self {
            table: Some(table),
            ..Self::exact(points, sphere)
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &PointTrig {
        &self.points[i]
    }

    pub fn table(&self) -> Option<&CosTable> {
        self.table.as_ref()
    }

    pub fn sphere(&self) -> SphereModel {
        self.sphere
    }

    /// Distance in km from cached point `i` to `b`.
    ///
    /// Without a table this is bit-identical to [`orthodromic_distance`].
    #[inline]
    pub fn distance_km(&self, i: usize, b: &PointTrig) -> f64 {
        let a = &self.points[i];
        let dlon = b.lon_rad - a.lon_rad;
        let cos_dlon = match &self.table {
            Some(t) => t.cos(dlon),
            None => dlon.cos(),
        };
        self.sphere.radius_km * central_angle(a, b, cos_dlon)
    }

    /// Upper bound on `|distance_km − orthodromic_distance|` in km.
    ///
    /// The `acos` argument moves by at most `cos φa·cos φb·w ≤ w` for bin width
    /// `w`, and `acos` changes by at most `acos(1 − δ)` over any interval of
    /// length `δ`. Zero in exact mode; decreasing in the grain.
    pub fn max_distance_error_km(&self) -> f64 {
        match &self.table {
            None => 0.0,
            Some(t) => tabulation_error_bound_km(t.grain(), self.sphere),
        }
    }
}

/// Worst-case tabulated distance error for a table of `grain` bins.
pub fn tabulation_error_bound_km(grain: usize, sphere: SphereModel) -> f64 {
    let delta = (TAU / grain as f64).min(2.0);
    sphere.radius_km * (1.0 - delta).acos()
}

/// Source of distances between indexed stock points and an evaluation point.
pub trait DistanceProvider: Sync {
    fn distance_km(&self, point: usize, target: &PointTrig) -> f64;
}

impl DistanceProvider for TrigCache {
    #[inline]
    fn distance_km(&self, point: usize, target: &PointTrig) -> f64 {
        TrigCache::distance_km(self, point, target)
    }
}

/// Smallest circular separation between two longitudes in radians, in `[0, π]`.
#[inline]
pub(crate) fn lon_separation(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(TAU);
    if d > PI {
        TAU - d
    } else {
        d
    }
}
