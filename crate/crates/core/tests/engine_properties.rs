use potsmooth::catalog::Dataset;
use potsmooth::engine::{compute_grid, compute_grid_naive, nyquist_min_portee, ComputeOptions, GridSpec};
use potsmooth::geodesy::{GeoBox, GeoPoint};
use potsmooth::kernels::{Kernel, KernelKind};
use potsmooth::spatial_index::{CutoffPolicy, StockPoint};
use potsmooth::synthetic::uniform_points;
use proptest::prelude::*;

const EXTENT: GeoBox = GeoBox { west: 0.0, south: 40.0, east: 10.0, north: 48.0 };

fn two_variable_dataset(n: usize, seed: u64) -> Dataset {
    let pts = uniform_points(n, EXTENT, 2, seed);
    Dataset::new("t", "t", vec!["a".into(), "b".into()], pts).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

#[test]
fn linear_in_stocks() {
    let base = two_variable_dataset(300, 3);
    let (alpha, beta) = (2.5, 0.75);
    let mut pts = base.points().to_vec();
    for p in &mut pts {
        p.stocks = vec![alpha * p.stocks[0] + beta * p.stocks[1]];
    }
    let mixed = Dataset::new("m", "m", vec!["c".into()], pts).unwrap();
    let spec = GridSpec::new(EXTENT, 24, 18).unwrap();
    let opts = ComputeOptions::default();
    let exact = CutoffPolicy::exact();
    for kind in KernelKind::ALL {
        let k = Kernel::new(kind, 80.0, None).unwrap();
        let ga = compute_grid(&base, "a", &k, &spec, &exact, &opts).unwrap();
        let gb = compute_grid(&base, "b", &k, &spec, &exact, &opts).unwrap();
        let gc = compute_grid(&mixed, "c", &k, &spec, &exact, &opts).unwrap();
        for i in 0..spec.cells() {
            let want = alpha * ga.values[i] + beta * gb.values[i];
            assert!(rel(gc.values[i], want) <= 1e-9, "{kind}: cell {i}: {} vs {want}", gc.values[i]);
        }
    }
}

#[test]
fn shifted_frame_shifts_values() {
    let ds = two_variable_dataset(400, 5);
    let k = Kernel::new(KernelKind::Gaussian, 60.0, None).unwrap();
    let spec = GridSpec::new(EXTENT, 20, 16).unwrap();
    let (dx, dy) = (spec.cell_width_deg(), spec.cell_height_deg());
    // Three cells east, two cells north.
    let moved = GridSpec::new(
        GeoBox {
            west: EXTENT.west + 3.0 * dx,
            south: EXTENT.south + 2.0 * dy,
            east: EXTENT.east + 3.0 * dx,
            north: EXTENT.north + 2.0 * dy,
        },
        20,
        16,
    )
    .unwrap();
    let opts = ComputeOptions::default();
    let g = compute_grid(&ds, "a", &k, &spec, &CutoffPolicy::exact(), &opts).unwrap();
    let h = compute_grid(&ds, "a", &k, &moved, &CutoffPolicy::exact(), &opts).unwrap();
    let mut checked = 0;
    for row in 0..16 {
        for col in 0..20 {
            // h(row, col) sits where g(row - 2, col + 3) does.
            if row < 2 || col + 3 >= 20 {
                continue;
            }
            let a = h.value(row, col);
            let b = g.value(row - 2, col + 3);
            assert!(rel(a, b) <= 1e-9, "({row},{col}): {a} vs {b}");
            checked += 1;
        }
    }
    assert_eq!(checked, 14 * 17);
}

#[test]
fn identical_across_worker_counts() {
    let ds = two_variable_dataset(800, 9);
    let k = Kernel::new(KernelKind::Pareto, 40.0, Some(4.5)).unwrap();
    let spec = GridSpec::new(EXTENT, 31, 17).unwrap();
    let policy = CutoffPolicy::default();
    let reference = compute_grid(&ds, "b", &k, &spec, &policy, &ComputeOptions::default().with_workers(1)).unwrap();
    for workers in [2, 3, 8] {
        let g = compute_grid(&ds, "b", &k, &spec, &policy, &ComputeOptions::default().with_workers(workers)).unwrap();
        let same = g.values.iter().zip(&reference.values).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{workers} workers differ");
    }
}

#[test]
fn exact_mode_matches_naive_for_every_kernel() {
    let ds = two_variable_dataset(500, 21);
    let spec = GridSpec::new(EXTENT, 16, 12).unwrap();
    let opts = ComputeOptions::default();
    for kind in KernelKind::ALL {
        for p in [15.0, 120.0] {
            let k = Kernel::new(kind, p, None).unwrap();
            let fast = compute_grid(&ds, "a", &k, &spec, &CutoffPolicy::exact(), &opts).unwrap();
            let naive = compute_grid_naive(&ds, "a", &k, &spec, &opts).unwrap();
            for (a, b) in fast.values.iter().zip(&naive.values) {
                assert!(rel(*a, *b) <= 1e-9, "{kind} p={p}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn nyquist_mixed_spacing() {
    // Two points 5 km apart and a third 50 km from its nearest neighbor,
    // along the equator where 1 degree of longitude is r·π/180 km.
    let km_per_deg = 6371.0 * std::f64::consts::PI / 180.0;
    let mk = |i: usize, lon_km: f64| StockPoint {
        id: format!("p{i}"),
        location: GeoPoint::new(0.0, lon_km / km_per_deg).unwrap(),
        stocks: vec![1.0],
    };
    let ds = Dataset::new("n", "n", vec!["v".into()], vec![mk(0, 0.0), mk(1, 5.0), mk(2, 55.0)]).unwrap();
    let got = nyquist_min_portee(&ds).unwrap();
    assert!((got - 100.0).abs() < 1e-6, "{got}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn potentials_are_nonnegative(seed in 0u64..1000, kind_ix in 0usize..4, p in 5.0f64..400.0, eps in 0.0f64..0.1) {
        let ds = two_variable_dataset(60, seed);
        let k = Kernel::new(KernelKind::ALL[kind_ix], p, None).unwrap();
        let spec = GridSpec::new(EXTENT, 9, 7).unwrap();
        let g = compute_grid(&ds, "a", &k, &spec, &CutoffPolicy::new(eps).unwrap(), &ComputeOptions::default()).unwrap();
        prop_assert!(g.values.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }
}
