//! `potsmooth`: ingest datasets, compute potential grids to files, benchmark
//! the pruned evaluator and run the HTTP service.
//!
//! Exit status: 0 success, 1 invalid input, 2 I/O failure, 3 internal error.

mod bench;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use potsmooth::catalog::Catalog;
use potsmooth::engine::ComputeOptions;
use potsmooth::request::{execute_naive, execute_on, Computation, ComputeRequest, RequestError};
use potsmooth::wire::{potential_warnings, render_report, GridPayload, ReportFormat};
use potsmooth::Error;
use potsmooth_server::ServerConfig;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "potsmooth", version, about = "Potential smoothing of point stocks onto grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a CSV file and store it in the catalog.
    Ingest(IngestArgs),
    /// Compute potential grids and write the API response body to a file.
    Compute(ComputeArgs),
    /// Time the quadtree evaluator against the plain double sum.
    Bench(bench::BenchArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct CatalogArg {
    /// Catalog directory.
    #[arg(long, env = "POTSMOOTH_CATALOG", default_value = "catalog")]
    catalog: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// CSV with header `id,lon,lat,<stock>...`.
    csv: PathBuf,
    #[arg(long)]
    id: String,
    #[arg(long)]
    name: String,
    /// GeoJSON FeatureCollection drawn under the grids by clients.
    #[arg(long)]
    boundaries: Option<PathBuf>,
    #[command(flatten)]
    catalog: CatalogArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Text,
    Html,
}

#[derive(Args)]
struct ComputeArgs {
    #[arg(long)]
    dataset: String,
    /// Numerator stock.
    #[arg(long)]
    num: String,
    /// Denominator stock; also writes the ratio grids.
    #[arg(long)]
    den: Option<String>,
    /// disk, damped-disk, gaussian or pareto.
    #[arg(long)]
    kernel: String,
    /// Portée (mean range) in km.
    #[arg(long, allow_negative_numbers = true)]
    portee: f64,
    /// Pareto tail exponent (> 3).
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Second, larger portée.
    #[arg(long, allow_negative_numbers = true)]
    portee2: Option<f64>,
    /// Framing as `west,south,east,north` in degrees.
    #[arg(long, allow_hyphen_values = true)]
    bbox: String,
    /// Resolution as `WIDTHxHEIGHT`.
    #[arg(long)]
    size: String,
    /// Pruning threshold; 0 sums every point.
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    /// Use the unpruned reference sum.
    #[arg(long)]
    naive: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Tabulate cos(Δlon) with this many bins.
    #[arg(long)]
    tabulate: Option<usize>,
    /// Output file for the response body.
    #[arg(short = 'o', long)]
    output: PathBuf,
    /// Also write a per-cell report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    report_format: ReportKind,
    /// Which grid of the response the report covers.
    #[arg(long, default_value_t = 0)]
    report_grid: usize,
    #[command(flatten)]
    catalog: CatalogArg,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Accepted bearer token; repeat for several.
    #[arg(long = "token", env = "POTSMOOTH_TOKENS", value_delimiter = ',', required = true)]
    tokens: Vec<String>,
    /// Per-request computation limit in seconds.
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
    /// Pruning threshold for requests that omit `epsilon`.
    #[arg(long, default_value_t = potsmooth::spatial_index::DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    tabulate: Option<usize>,
    /// Response cache size in requests (0 disables).
    #[arg(long, default_value_t = 0)]
    cache: usize,
    #[command(flatten)]
    catalog: CatalogArg,
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Io(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Io(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Catalog(_) => Failure::Io(e.to_string()),
            Error::Cancelled => Failure::Internal(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

/// Flag spelled by the user for each request field.
fn flag_for(field: &str) -> Option<&'static str> {
    Some(match field {
        "dataset" => "--dataset",
        "numerator" => "--num",
        "denominator" => "--den",
        "kernel.kind" => "--kernel",
        "kernel.portee_km" => "--portee",
        "kernel.beta" => "--beta",
        "portee2_km" => "--portee2",
        "epsilon" => "--epsilon",
        "grid.width" | "grid.height" => "--size",
        f if f.starts_with("grid.bbox") => "--bbox",
        _ => return None,
    })
}

impl From<RequestError> for Failure {
    fn from(e: RequestError) -> Self {
        let describe = |fields: Vec<potsmooth::request::FieldError>| {
            fields
                .into_iter()
                .map(|f| match flag_for(&f.field) {
                    Some(flag) => format!("{flag} ({}): {}", f.field, f.message),
                    None => format!("{}: {}", f.field, f.message),
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        match e {
            RequestError::Invalid(fields) => Failure::Invalid(describe(fields)),
            RequestError::Unprocessable(f) | RequestError::NotFound(f) => Failure::Invalid(describe(vec![f])),
            RequestError::Compute(e) => e.into(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Ingest(args) => ingest(args),
        Command::Compute(args) => compute(args),
        Command::Bench(args) => bench::run(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn ingest(args: IngestArgs) -> Result<(), Failure> {
    let catalog = Catalog::open(&args.catalog.catalog)?;
    let ds = catalog.ingest_csv(&args.csv, &args.id, &args.name, args.boundaries.as_deref())?;
    let s = ds.summary();
    println!(
        "ingested `{}` ({}): {} points, stocks {}{}",
        s.id,
        s.name,
        s.points,
        s.variables.join(", "),
        if s.has_boundaries { ", with boundaries" } else { "" }
    );
    if let Some(p) = ds.nyquist_min_portee() {
        println!("minimum portée for this mesh: {p:.3} km");
    }
    Ok(())
}

fn parse_list(raw: &str, flag: &str, sep: char, n: usize) -> Result<Vec<f64>, Failure> {
    let parts: Vec<&str> = raw.split(sep).map(str::trim).collect();
    let bad = || Failure::Invalid(format!("{flag}: cannot parse `{raw}`"));
    if parts.len() != n {
        return Err(bad());
    }
    parts.iter().map(|p| p.parse::<f64>().map_err(|_| bad())).collect()
}

/// The JSON body an API client would send for these flags.
fn request_json(args: &ComputeArgs) -> Result<Value, Failure> {
    let bbox = parse_list(&args.bbox, "--bbox", ',', 4)?;
    let (w, h) = args
        .size
        .split_once(['x', 'X'])
        .and_then(|(w, h)| Some((w.trim().parse::<u64>().ok()?, h.trim().parse::<u64>().ok()?)))
        .ok_or_else(|| Failure::Invalid(format!("--size: expected WIDTHxHEIGHT, got `{}`", args.size)))?;
    let mut kernel = Map::new();
    kernel.insert("kind".into(), json!(args.kernel));
    kernel.insert("portee_km".into(), json!(args.portee));
    if let Some(b) = args.beta {
        kernel.insert("beta".into(), json!(b));
    }
    let mut body = Map::new();
    body.insert("dataset".into(), json!(args.dataset));
    body.insert("numerator".into(), json!(args.num));
    if let Some(d) = &args.den {
        body.insert("denominator".into(), json!(d));
    }
    body.insert("kernel".into(), Value::Object(kernel));
    if let Some(p) = args.portee2 {
        body.insert("portee2_km".into(), json!(p));
    }
    body.insert(
        "grid".into(),
        json!({
            "bbox": {"west": bbox[0], "south": bbox[1], "east": bbox[2], "north": bbox[3]},
            "width": w,
            "height": h
        }),
    );
    if let Some(e) = args.epsilon {
        body.insert("epsilon".into(), json!(e));
    }
    Ok(Value::Object(body))
}

fn sibling(output: &Path, tag: &str) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.{tag}.json"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn write_payload(path: &Path, payload: &GridPayload) -> Result<(), Failure> {
    let bytes = serde_json::to_vec(payload).map_err(|e| Failure::Internal(e.to_string()))?;
    write_file(path, &bytes)
}

/// Side files for ratio work: `<stem>.num.json`, `.den.json`, `.ratio.json`
/// at the first portée, the same with a `2` suffix at the second, and
/// `.diff.json` for the difference of the two ratios.
fn write_ratio_files(comp: &Computation, output: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut written = Vec::new();
    let ratios = comp.ratios()?;
    for (i, pair) in comp.grids.chunks(2).enumerate() {
        let suffix = if i == 0 { "" } else { "2" };
        for (g, tag) in pair.iter().zip(["num", "den"]) {
            let path = sibling(output, &format!("{tag}{suffix}"));
            write_payload(&path, &GridPayload::from_potential(&g.grid))?;
            written.push(path);
        }
        let path = sibling(output, &format!("ratio{suffix}"));
        write_payload(&path, &GridPayload::from_ratio(&ratios[i]))?;
        written.push(path);
    }
    if let Some(diff) = comp.difference()? {
        let path = sibling(output, "diff");
        write_payload(&path, &GridPayload::from_diff(&diff))?;
        written.push(path);
    }
    Ok(written)
}

fn compute(args: ComputeArgs) -> Result<(), Failure> {
    let body = request_json(&args)?;
    let request = ComputeRequest::from_json(&body)?;
    let catalog = Catalog::open(&args.catalog.catalog)?;
    let dataset = catalog.get(&request.dataset).map_err(|e| match e {
        Error::UnknownDataset(id) => Failure::Invalid(format!("--dataset: unknown dataset `{id}`")),
        other => other.into(),
    })?;
    let opts = ComputeOptions {
        workers: args.workers,
        tabulation_grain: args.tabulate,
        ..ComputeOptions::default()
    };
    let comp = if args.naive {
        execute_naive(&request, &dataset, &opts)?
    } else {
        execute_on(&request, &dataset, &opts)?
    };
    let response = comp.response();
    write_file(&args.output, &response.to_bytes())?;

    let total: Duration = comp.grids.iter().map(|g| g.grid.elapsed).sum();
    eprintln!(
        "{} grid(s) of {}x{} in {:.3} s -> {}",
        comp.grids.len(),
        request.grid.width,
        request.grid.height,
        total.as_secs_f64(),
        args.output.display()
    );
    for g in &comp.grids {
        for w in potential_warnings(&g.grid.meta).iter().filter(|w| w.code != "margin") {
            eprintln!("warning: {}", w.message);
        }
    }
    if request.denominator.is_some() {
        for path in write_ratio_files(&comp, &args.output)? {
            eprintln!("  {}", path.display());
        }
    }
    if let Some(path) = &args.report {
        let entry = response.grids.get(args.report_grid).ok_or_else(|| {
            Failure::Invalid(format!(
                "--report-grid: index {} out of range, {} grids computed",
                args.report_grid,
                response.grids.len()
            ))
        })?;
        let format = match args.report_format {
            ReportKind::Text => ReportFormat::Text,
            ReportKind::Html => ReportFormat::Html,
        };
        let text = render_report(&entry.payload, format)?;
        write_file(path, text.as_bytes())?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    if !(args.timeout > 0.0 && args.timeout.is_finite()) {
        return Err(Failure::Invalid("--timeout must be a positive number of seconds".into()));
    }
    if !(0.0..=1.0).contains(&args.epsilon) {
        return Err(Failure::Invalid("--epsilon must be in [0, 1]".into()));
    }
    let tokens: Vec<String> = args.tokens.into_iter().filter(|t| !t.is_empty()).collect();
    if tokens.is_empty() {
        return Err(Failure::Invalid("--token must not be empty".into()));
    }
    let config = ServerConfig {
        listen: args.listen,
        catalog_dir: args.catalog.catalog,
        tokens,
        timeout: Duration::from_secs_f64(args.timeout),
        default_epsilon: args.epsilon,
        workers: args.workers,
        tabulation_grain: args.tabulate,
        cache_entries: args.cache,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Internal(e.to_string()))?;
    runtime
        .block_on(potsmooth_server::serve(config))
        .map_err(|e| match e.downcast::<Error>() {
            Ok(e) => Failure::from(*e),
            Err(e) => match e.downcast::<std::io::Error>() {
                Ok(e) => Failure::Io(e.to_string()),
                Err(e) => Failure::Internal(e.to_string()),
            },
        })
}
