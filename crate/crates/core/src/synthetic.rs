//! Seeded synthetic point clouds for benchmarks and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::Dataset;
use crate::error::Result;
use crate::geodesy::{GeoBox, GeoPoint};
use crate::spatial_index::StockPoint;

/// Points uniform in longitude and latitude over `extent`, each with one
/// stock per entry of `variables` drawn from `[1, 1000)`.
pub fn uniform_points(n: usize, extent: GeoBox, variables: usize, seed: u64) -> Vec<StockPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let lon = rng.random_range(extent.west..extent.east);
            let lat = rng.random_range(extent.south..extent.north);
            let stocks = (0..variables).map(|_| rng.random_range(1.0..1000.0)).collect();
            StockPoint {
                id: format!("u{i}"),
                location: GeoPoint::new(lat, lon).expect("extent inside the world"),
                stocks,
            }
        })
        .collect()
}

/// A dataset of `n` uniform points with stocks named `v0`, `v1`, ...
pub fn uniform_dataset(id: &str, n: usize, extent: GeoBox, variables: usize, seed: u64) -> Result<Dataset> {
    let names = (0..variables).map(|i| format!("v{i}")).collect();
    Dataset::new(id, id, names, uniform_points(n, extent, variables, seed))
}

/// A regular lattice with `spacing_deg` steps starting at the south-west
/// corner of `extent`, unit stock everywhere.
pub fn lattice_points(extent: GeoBox, spacing_deg: f64) -> Vec<StockPoint> {
    let mut out = Vec::new();
    let mut lat = extent.south;
    while lat <= extent.north + 1e-9 {
        let mut lon = extent.west;
        while lon <= extent.east + 1e-9 {
            out.push(StockPoint {
                id: format!("l{}", out.len()),
                location: GeoPoint::new(lat, lon).expect("extent inside the world"),
                stocks: vec![1.0],
            });
            lon += spacing_deg;
        }
        lat += spacing_deg;
    }
    out
}
