use std::time::Instant;

use clap::Args;
use potsmooth::catalog::Dataset;
use potsmooth::engine::{compute_grid_naive, compute_grid_prepared, ComputeOptions, GridSpec, PreparedStocks};
use potsmooth::geodesy::GeoBox;
use potsmooth::kernels::{Kernel, KernelKind};
use potsmooth::spatial_index::CutoffPolicy;
use potsmooth::synthetic::uniform_dataset;

use crate::Failure;

/// Synthetic points are spread uniformly over this window, which is also the
/// grid framing.
pub const BENCH_EXTENT: GeoBox = GeoBox { west: -10.0, south: 35.0, east: 30.0, north: 60.0 };

const SWEEP: [f64; 5] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2];

/// Published grid timings: samples, width, height, portée km, seconds on the
/// original dual Pentium 4 server.
const TABLE1: [(usize, usize, usize, f64, f64); 4] = [
    (116_203, 400, 300, 100.0, 35.0),
    (288, 400, 300, 100.0, 9.0),
    (116_203, 800, 600, 100.0, 165.0),
    (116_203, 400, 300, 50.0, 15.0),
];

#[derive(Args)]
pub struct BenchArgs {
    /// Number of synthetic points.
    #[arg(long, default_value_t = 50_000)]
    n: usize,
    /// Resolution as `WIDTHxHEIGHT`.
    #[arg(long, default_value = "400x300")]
    size: String,
    #[arg(long, default_value_t = 100.0)]
    portee: f64,
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    #[arg(long, default_value_t = potsmooth::spatial_index::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Also time several thresholds and report the largest relative error of each.
    #[arg(long)]
    epsilon_sweep: bool,
    /// Skip the unpruned reference run.
    #[arg(long)]
    skip_naive: bool,
    /// Replay the published table's parameter rows (quadtree only).
    #[arg(long)]
    table1: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_size(raw: &str) -> Result<(usize, usize), Failure> {
    raw.split_once(['x', 'X'])
        .and_then(|(w, h)| Some((w.trim().parse().ok()?, h.trim().parse().ok()?)))
        .filter(|(w, h)| *w > 0 && *h > 0)
        .ok_or_else(|| Failure::Invalid(format!("--size: expected WIDTHxHEIGHT, got `{raw}`")))
}

fn row(samples: usize, spec: &GridSpec, portee: f64, method: &str, secs: f64, extra: &str) {
    println!(
        "{samples:>9}  {:>10}  {portee:>9}  {method:<14}  {secs:>9.3}  {extra}",
        format!("{}x{}", spec.width, spec.height)
    );
}

fn header(extra: &str) {
    println!("{:>9}  {:>10}  {:>9}  {:<14}  {:>9}  {extra}", "samples", "resolution", "portee_km", "method", "time_s");
}

/// Largest `|a − b| / b` over cells with a positive reference value.
pub fn max_relative_error(values: &[f64], reference: &[f64]) -> f64 {
    values
        .iter()
        .zip(reference)
        .filter(|(_, r)| **r > 0.0)
        .map(|(v, r)| (v - r).abs() / r)
        .fold(0.0, f64::max)
}

fn timed_quadtree(
    prepared: &PreparedStocks,
    kernel: &Kernel,
    spec: &GridSpec,
    epsilon: f64,
    opts: &ComputeOptions,
) -> Result<(f64, Vec<f64>), Failure> {
    let policy = CutoffPolicy::new(epsilon)?;
    let start = Instant::now();
    let grid = compute_grid_prepared(prepared, kernel, spec, &policy, opts)?;
    Ok((start.elapsed().as_secs_f64(), grid.values))
}

fn dataset(n: usize, seed: u64) -> Result<Dataset, Failure> {
    if n == 0 {
        return Err(Failure::Invalid("--n must be positive".into()));
    }
    Ok(uniform_dataset("bench", n, BENCH_EXTENT, 1, seed)?)
}

pub fn run(args: BenchArgs) -> Result<(), Failure> {
    let kind: KernelKind = args
        .kernel
        .parse()
        .map_err(|_| Failure::Invalid(format!("--kernel: unknown kernel `{}`", args.kernel)))?;
    let opts = ComputeOptions {
        workers: args.workers,
        ..ComputeOptions::default()
    };
    if args.table1 {
        return replay_table1(kind, args.epsilon, args.seed, &opts);
    }
    let (w, h) = parse_size(&args.size)?;
    let spec = GridSpec::new(BENCH_EXTENT, w, h)?;
    let kernel = Kernel::new(kind, args.portee, None)?;
    let ds = dataset(args.n, args.seed)?;

    let start = Instant::now();
    let prepared = PreparedStocks::new(&ds, "v0", &opts)?;
    let build = start.elapsed().as_secs_f64();

    header("note");
    let naive = if args.skip_naive {
        None
    } else {
        let start = Instant::now();
        let grid = compute_grid_naive(&ds, "v0", &kernel, &spec, &opts)?;
        let secs = start.elapsed().as_secs_f64();
        row(args.n, &spec, args.portee, "naive", secs, "");
        Some((secs, grid.values))
    };
    let (secs, values) = timed_quadtree(&prepared, &kernel, &spec, args.epsilon, &opts)?;
    let note = format!("eps={}, tree build {build:.3} s", args.epsilon);
    row(args.n, &spec, args.portee, "quadtree", secs, &note);
    if let Some((naive_secs, reference)) = &naive {
        println!(
            "speedup {:.2}x, max relative error {:.3e}",
            naive_secs / secs,
            max_relative_error(&values, reference)
        );
    }

    if args.epsilon_sweep {
        let reference = match naive {
            Some((_, r)) => r,
            None => timed_quadtree(&prepared, &kernel, &spec, 0.0, &opts)?.1,
        };
        println!();
        println!("{:>8}  {:>9}  {:>12}", "epsilon", "time_s", "max_rel_err");
        let mut previous = 0.0;
        let mut monotone = true;
        for eps in SWEEP {
            let (secs, values) = timed_quadtree(&prepared, &kernel, &spec, eps, &opts)?;
            let err = max_relative_error(&values, &reference);
            monotone &= err >= previous;
            previous = err;
            println!("{eps:>8.0e}  {secs:>9.3}  {err:>12.3e}");
        }
        println!("error grows with epsilon: {}", if monotone { "yes" } else { "no" });
    }
    Ok(())
}

fn replay_table1(kind: KernelKind, epsilon: f64, seed: u64, opts: &ComputeOptions) -> Result<(), Failure> {
    header("published_s");
    for (n, w, h, portee, published) in TABLE1 {
        let ds = dataset(n, seed)?;
        let spec = GridSpec::new(BENCH_EXTENT, w, h)?;
        let kernel = Kernel::new(kind, portee, None)?;
        let prepared = PreparedStocks::new(&ds, "v0", opts)?;
        let (secs, _) = timed_quadtree(&prepared, &kernel, &spec, epsilon, opts)?;
        row(n, &spec, portee, "quadtree", secs, &format!("{published}"));
    }
    Ok(())
}
