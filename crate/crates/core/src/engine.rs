//! Potential rasters and the grids derived from them.
//!
//! Values sit at cell centers. Rows run north to south and columns west to
//! east; cell `(row, col)` is stored at `row * width + col`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::Dataset;
use crate::error::{Error, Result};
use crate::geodesy::{GeoBox, GeoPoint, PointTrig, SphereModel, TrigCache};
use crate::kernels::{Kernel, KernelSpec};
use crate::spatial_index::{build_quadtree, evaluate_potential, CutoffPolicy, Probe, QuadTree, DEFAULT_LEAF_CAPACITY};

/// Cells with a denominator below this fraction of the largest denominator
/// get no ratio.
pub const DEFAULT_RATIO_FLOOR: f64 = 1e-9;

/// Framing and resolution of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bbox: GeoBox,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(bbox: GeoBox, width: usize, height: usize) -> Result<Self> {
        let spec = Self { bbox, width, height };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if !self.bbox.within_world() {
            return Err(Error::InvalidParameter("bbox outside world bounds".into()));
        }
        if self.bbox.is_degenerate() {
            return Err(Error::InvalidParameter("bbox needs west < east and south < north".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_height_deg(&self) -> f64 {
        self.bbox.height_deg() / self.height as f64
    }

    pub fn cell_width_deg(&self) -> f64 {
        self.bbox.width_deg() / self.width as f64
    }

    #[inline]
    pub fn row_lat(&self, row: usize) -> f64 {
        self.bbox.north - (row as f64 + 0.5) * self.cell_height_deg()
    }

    #[inline]
    pub fn col_lon(&self, col: usize) -> f64 {
        self.bbox.west + (col as f64 + 0.5) * self.cell_width_deg()
    }

    pub fn cell_center(&self, row: usize, col: usize) -> GeoPoint {
        GeoPoint::new(self.row_lat(row), self.col_lon(col)).expect("cell centers of a valid grid are valid")
    }

    /// Spherical area of a cell in `row`, `r²·Δφ·Δλ·cos φ_center`.
    pub fn cell_area_km2(&self, row: usize, sphere: SphereModel) -> f64 {
        let r = sphere.radius_km();
        r * r
            * self.cell_height_deg().to_radians()
            * self.cell_width_deg().to_radians()
            * self.row_lat(row).to_radians().cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Quadtree,
    Naive,
}

/// Everything that determined a potential grid, plus validity notes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dataset: String,
    pub variable: String,
    pub kernel: KernelSpec,
    pub epsilon: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tabulation_grain: Option<usize>,
    /// Width of the border band where the estimate is degraded.
    pub margin_km: f64,
    pub nyquist_min_portee_km: Option<f64>,
    pub nyquist_warning: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub meta: GridMeta,
    /// Wall time of the computation; not part of any serialized output.
    pub elapsed: Duration,
}

impl PotentialGrid {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.spec.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Cellwise quotient of two potentials; `None` where the denominator is too small.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioGrid {
    pub spec: GridSpec,
    pub values: Vec<Option<f64>>,
    pub kernel: KernelSpec,
    pub numerator: String,
    pub denominator: String,
    pub floor: f64,
}

/// `z2 − z1` of two ratio grids; negative cells are local peaks, positive
/// cells local hollows relative to the wider neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffGrid {
    pub spec: GridSpec,
    pub values: Vec<Option<f64>>,
    pub portee1_km: f64,
    pub portee2_km: f64,
}

/// Knobs that change how, not what, is computed (except tabulation, which
/// trades accuracy for speed and is recorded in the metadata).
#[derive(Debug, Clone)]
pub struct ComputeOptions {
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
    /// Bins for the tabulated `cos(Δlon)`; `None` computes it exactly.
    pub tabulation_grain: Option<usize>,
    pub leaf_capacity: usize,
    pub sphere: SphereModel,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for ComputeOptions {
    fn default() -> Self {
        Self {
            workers: None,
            tabulation_grain: None,
            leaf_capacity: DEFAULT_LEAF_CAPACITY,
            sphere: SphereModel::default(),
            cancel: None,
        }
    }
}

impl ComputeOptions {
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = Some(workers);
        self
    }

    fn cancelled(&self) -> bool {
        self.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed))
    }

    fn run<T: Send>(&self, job: impl FnOnce() -> T + Send) -> Result<T> {
        match self.workers {
            None => Ok(job()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::InvalidParameter(format!("cannot start workers: {e}")))?;
                Ok(pool.install(job))
            }
        }
    }
}

/// Quadtree and distance cache for one variable of a dataset; reusable
/// across any number of grids.
pub struct PreparedStocks {
    pub tree: QuadTree,
    pub distances: TrigCache,
    pub dataset: String,
    pub variable: String,
    pub tabulation_grain: Option<usize>,
    nyquist: Option<f64>,
}

impl PreparedStocks {
    pub fn new(dataset: &Dataset, variable: &str, opts: &ComputeOptions) -> Result<Self> {
        let v = dataset.variable_index(variable)?;
        let tree = build_quadtree(dataset.points(), v, opts.leaf_capacity)?;
        let locations = dataset.locations();
        let distances = match opts.tabulation_grain {
            Some(g) => TrigCache::tabulated(&locations, g, opts.sphere)?,
            None => TrigCache::exact(&locations, opts.sphere),
        };
        Ok(Self {
            tree,
            distances,
            dataset: dataset.id().to_string(),
            variable: variable.to_string(),
            tabulation_grain: opts.tabulation_grain,
            nyquist: dataset.nyquist_min_portee(),
        })
    }
}

fn grid_meta(
    dataset: &str,
    variable: &str,
    kernel: &Kernel,
    epsilon: f64,
    method: Method,
    tabulation_grain: Option<usize>,
    nyquist: Option<f64>,
) -> GridMeta {
    GridMeta {
        dataset: dataset.to_string(),
        variable: variable.to_string(),
        kernel: KernelSpec::from(kernel),
        epsilon,
        method,
        tabulation_grain,
        margin_km: kernel.portee_km(),
        nyquist_min_portee_km: nyquist,
        nyquist_warning: nyquist.is_some_and(|n| kernel.portee_km() < n),
    }
}

/// Potential of `variable` at every cell center, through the pruned quadtree.
pub fn compute_grid(
    dataset: &Dataset,
    variable: &str,
    kernel: &Kernel,
    spec: &GridSpec,
    policy: &CutoffPolicy,
    opts: &ComputeOptions,
) -> Result<PotentialGrid> {
    let prepared = PreparedStocks::new(dataset, variable, opts)?;
    compute_grid_prepared(&prepared, kernel, spec, policy, opts)
}

pub fn compute_grid_prepared(
    prepared: &PreparedStocks,
    kernel: &Kernel,
    spec: &GridSpec,
    policy: &CutoffPolicy,
    opts: &ComputeOptions,
) -> Result<PotentialGrid> {
    spec.validate()?;
    let start = Instant::now();
    let sphere = opts.sphere;
    let mut values = vec![0.0; spec.cells()];
    opts.run(|| {
        values
            .par_chunks_mut(spec.width)
            .enumerate()
            .try_for_each(|(row, out)| {
                if opts.cancelled() {
                    return Err(Error::Cancelled);
                }
                let lat = spec.row_lat(row);
                for (col, v) in out.iter_mut().enumerate() {
                    let m = GeoPoint::new(lat, spec.col_lon(col))?;
                    *v = evaluate_potential(&Probe::new(m), &prepared.tree, kernel, policy, &prepared.distances, sphere);
                }
                Ok(())
            })
    })??;
    let epsilon = if policy.enabled { policy.epsilon } else { 0.0 };
    Ok(PotentialGrid {
        spec: *spec,
        values,
        meta: grid_meta(
            &prepared.dataset,
            &prepared.variable,
            kernel,
            epsilon,
            Method::Quadtree,
            prepared.tabulation_grain,
            prepared.nyquist,
        ),
        elapsed: start.elapsed(),
    })
}

/// Reference path: the plain double sum over cells and points, in input
/// order, with the exact distance formula (per-point sines and cosines computed once).
pub fn compute_grid_naive(
    dataset: &Dataset,
    variable: &str,
    kernel: &Kernel,
    spec: &GridSpec,
    opts: &ComputeOptions,
) -> Result<PotentialGrid> {
    spec.validate()?;
    let v = dataset.variable_index(variable)?;
    let start = Instant::now();
    let stocks = dataset.column(v);
    let distances = TrigCache::exact(&dataset.locations(), opts.sphere);
    let mut values = vec![0.0; spec.cells()];
    opts.run(|| {
        values
            .par_chunks_mut(spec.width)
            .enumerate()
            .try_for_each(|(row, out)| {
                if opts.cancelled() {
                    return Err(Error::Cancelled);
                }
                let lat = spec.row_lat(row);
                for (col, cell) in out.iter_mut().enumerate() {
                    let m = PointTrig::new(GeoPoint::new(lat, spec.col_lon(col))?);
                    let mut acc = 0.0;
                    for (i, s) in stocks.iter().enumerate() {
                        acc += s * kernel.eval(distances.distance_km(i, &m));
                    }
                    *cell = acc;
                }
                Ok(())
            })
    })??;
    Ok(PotentialGrid {
        spec: *spec,
        values,
        meta: grid_meta(
            dataset.id(),
            variable,
            kernel,
            0.0,
            Method::Naive,
            None,
            dataset.nyquist_min_portee(),
        ),
        elapsed: start.elapsed(),
    })
}

/// `num / den` per cell. Both grids must share framing and kernel; cells where
/// `den < floor · max(den)` are undefined.
pub fn ratio_grid(num: &PotentialGrid, den: &PotentialGrid, floor: f64) -> Result<RatioGrid> {
    if num.spec != den.spec {
        return Err(Error::Mismatch("numerator and denominator grids differ in framing".into()));
    }
    if num.meta.kernel != den.meta.kernel {
        return Err(Error::Mismatch(format!(
            "numerator kernel {:?} differs from denominator kernel {:?}",
            num.meta.kernel, den.meta.kernel
        )));
    }
    if !(floor.is_finite() && floor >= 0.0) {
        return Err(Error::InvalidParameter(format!("ratio floor must be non-negative, got {floor}")));
    }
    let max_den = den.max();
    let threshold = floor * max_den;
    let values = num
        .values
        .iter()
        .zip(&den.values)
        .map(|(&n, &d)| if max_den > 0.0 && d > 0.0 && d >= threshold { Some(n / d) } else { None })
        .collect();
    Ok(RatioGrid {
        spec: num.spec,
        values,
        kernel: num.meta.kernel,
        numerator: num.meta.variable.clone(),
        denominator: den.meta.variable.clone(),
        floor,
    })
}

/// `z2 − z1` per cell; undefined wherever either side is.
pub fn diff_grid(z2: &RatioGrid, z1: &RatioGrid) -> Result<DiffGrid> {
    if z2.spec != z1.spec {
        return Err(Error::Mismatch("ratio grids differ in framing".into()));
    }
    let values = z2
        .values
        .iter()
        .zip(&z1.values)
        .map(|(a, b)| Some((*a)? - (*b)?))
        .collect();
    Ok(DiffGrid {
        spec: z2.spec,
        values,
        portee1_km: z1.kernel.portee_km,
        portee2_km: z2.kernel.portee_km,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassReport {
    /// Midpoint-rule integral of the grid over its framing.
    pub grid_mass: f64,
    pub stock_mass: f64,
    /// `(grid_mass − stock_mass) / stock_mass`; 0 when both are zero.
    pub relative_gap: f64,
}

/// Compares the integral of a potential grid with the total stock.
pub fn mass_check(grid: &PotentialGrid, dataset: &Dataset, variable: &str, sphere: SphereModel) -> Result<MassReport> {
    let v = dataset.variable_index(variable)?;
    let spec = &grid.spec;
    let grid_mass: f64 = grid
        .values
        .chunks(spec.width)
        .enumerate()
        .map(|(row, vals)| spec.cell_area_km2(row, sphere) * vals.iter().sum::<f64>())
        .sum();
    let stock_mass = dataset.column_sum(v);
    let relative_gap = if stock_mass == 0.0 {
        if grid_mass == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (grid_mass - stock_mass) / stock_mass
    };
    Ok(MassReport {
        grid_mass,
        stock_mass,
        relative_gap,
    })
}

/// `2 ×` the largest nearest-neighbor distance of the dataset's points.
pub fn nyquist_min_portee(dataset: &Dataset) -> Option<f64> {
    dataset.nyquist_min_portee()
}
