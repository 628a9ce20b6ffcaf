//! The compute contract shared by the HTTP service and the command line.
//!
//! A request names a dataset, a numerator stock and optionally a denominator,
//! a kernel with its portée, optionally a second portée, the grid framing and
//! resolution, and the pruning threshold. [`ComputeRequest::from_json`]
//! checks every field and reports each problem by its dotted path.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::catalog::{Catalog, Dataset};
use crate::engine::{
    compute_grid_naive, compute_grid_prepared, diff_grid, ratio_grid, ComputeOptions, DiffGrid, GridSpec, Method,
    PotentialGrid, PreparedStocks, RatioGrid, DEFAULT_RATIO_FLOOR,
};
use crate::error::Error;
use crate::geodesy::GeoBox;
use crate::kernels::{Kernel, KernelKind, KernelSpec};
use crate::spatial_index::{CutoffPolicy, DEFAULT_EPSILON};
use crate::wire::GridPayload;

pub const MAX_GRID_SIDE: usize = 8192;
pub const MAX_GRID_CELLS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    #[error("invalid request: {}", summarize(.0))]
    Invalid(Vec<FieldError>),
    #[error("{}: {}", .0.field, .0.message)]
    Unprocessable(FieldError),
    #[error("{}: {}", .0.field, .0.message)]
    NotFound(FieldError),
    #[error(transparent)]
    Compute(#[from] Error),
}

fn summarize(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// A validated compute request, in canonical form (defaults filled in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeRequest {
    pub dataset: String,
    pub numerator: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denominator: Option<String>,
    pub kernel: KernelSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub portee2_km: Option<f64>,
    pub grid: GridSpec,
    pub epsilon: f64,
}

struct Fields<'a> {
    obj: &'a Map<String, Value>,
    prefix: &'a str,
    errors: &'a mut Vec<FieldError>,
}

impl<'a> Fields<'a> {
    fn path(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    fn reject_unknown(&mut self, allowed: &[&str]) {
        for key in self.obj.keys() {
            if !allowed.contains(&key.as_str()) {
                let path = self.path(key);
                self.errors.push(FieldError::new(path, "unknown field"));
            }
        }
    }

    fn get(&mut self, key: &str, required: bool) -> Option<&'a Value> {
        match self.obj.get(key) {
            None | Some(Value::Null) => {
                if required {
                    let path = self.path(key);
                    self.errors.push(FieldError::new(path, "required"));
                }
                None
            }
            Some(v) => Some(v),
        }
    }

    fn string(&mut self, key: &str, required: bool) -> Option<String> {
        let v = self.get(key, required)?;
        match v.as_str() {
            Some(s) if !s.is_empty() => Some(s.to_string()),
            Some(_) => {
                let path = self.path(key);
                self.errors.push(FieldError::new(path, "must not be empty"));
                None
            }
            None => {
                let path = self.path(key);
                self.errors.push(FieldError::new(path, "expected a string"));
                None
            }
        }
    }

    fn number(&mut self, key: &str, required: bool) -> Option<f64> {
        let v = self.get(key, required)?;
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                let path = self.path(key);
                self.errors.push(FieldError::new(path, "expected a finite number"));
                None
            }
        }
    }

    fn count(&mut self, key: &str) -> Option<usize> {
        let v = self.get(key, true)?;
        match v.as_u64() {
            Some(n) if n >= 1 && n as usize <= MAX_GRID_SIDE => Some(n as usize),
            _ => {
                let path = self.path(key);
                self.errors
                    .push(FieldError::new(path, format!("expected an integer in [1, {MAX_GRID_SIDE}]")));
                None
            }
        }
    }

    fn object(&mut self, key: &str) -> Option<&'a Map<String, Value>> {
        let v = self.get(key, true)?;
        match v.as_object() {
            Some(o) => Some(o),
            None => {
                let path = self.path(key);
                self.errors.push(FieldError::new(path, "expected an object"));
                None
            }
        }
    }

    fn error(&mut self, key: &str, message: impl Into<String>) {
        let path = self.path(key);
        self.errors.push(FieldError::new(path, message));
    }
}

impl ComputeRequest {
    pub fn from_slice(body: &[u8]) -> Result<Self, RequestError> {
        let value: Value = serde_json::from_slice(body)
            .map_err(|e| RequestError::Invalid(vec![FieldError::new("", format!("malformed JSON: {e}"))]))?;
        Self::from_json(&value)
    }

    pub fn from_json(value: &Value) -> Result<Self, RequestError> {
        Self::from_json_with(value, DEFAULT_EPSILON)
    }

    /// Validates a raw JSON request. Structural and range problems are all
    /// collected into [`RequestError::Invalid`]; a Pareto exponent `≤ 3` on an
    /// otherwise valid request is [`RequestError::Unprocessable`].
    /// `default_epsilon` fills in a missing `epsilon`.
    pub fn from_json_with(value: &Value, default_epsilon: f64) -> Result<Self, RequestError> {
        let Some(obj) = value.as_object() else {
            return Err(RequestError::Invalid(vec![FieldError::new("", "expected a JSON object")]));
        };
        let mut errors = Vec::new();
        let mut top = Fields {
            obj,
            prefix: "",
            errors: &mut errors,
        };
        top.reject_unknown(&[
            "dataset",
            "numerator",
            "denominator",
            "kernel",
            "portee2_km",
            "grid",
            "epsilon",
        ]);
        let dataset = top.string("dataset", true);
        let numerator = top.string("numerator", true);
        let denominator = top.string("denominator", false);
        let portee2 = top.number("portee2_km", false);
        let epsilon = top.number("epsilon", false);
        let kernel_obj = top.object("kernel");
        let grid_obj = top.object("grid");

        if let Some(e) = epsilon {
            if !(0.0..=1.0).contains(&e) {
                top.error("epsilon", "must be in [0, 1]");
            }
        }

        let mut kernel_parts = None;
        if let Some(k) = kernel_obj {
            let mut kf = Fields {
                obj: k,
                prefix: "kernel",
                errors: top.errors,
            };
            kf.reject_unknown(&["kind", "portee_km", "beta"]);
            let kind = kf.string("kind", true).and_then(|s| match s.parse::<KernelKind>() {
                Ok(kind) => Some(kind),
                Err(_) => {
                    let names: Vec<&str> = KernelKind::ALL.iter().map(|k| k.name()).collect();
                    kf.error("kind", format!("unknown kernel `{s}`, expected one of {}", names.join(", ")));
                    None
                }
            });
            let portee = kf.number("portee_km", true);
            if let Some(p) = portee {
                if p <= 0.0 {
                    kf.error("portee_km", "must be positive");
                }
            }
            let beta = kf.number("beta", false);
            if let (Some(kind), Some(_)) = (kind, beta) {
                if kind != KernelKind::Pareto {
                    kf.error("beta", "only applies to the pareto kernel");
                }
            }
            kernel_parts = Some((kind, portee, beta));
        }

        if let (Some(p2), Some((_, Some(p1), _))) = (portee2, kernel_parts) {
            if p2 <= 0.0 {
                top.error("portee2_km", "must be positive");
            } else if p1 > 0.0 && p2 <= p1 {
                top.error("portee2_km", "must exceed kernel.portee_km");
            }
        } else if let Some(p2) = portee2 {
            if p2 <= 0.0 {
                top.error("portee2_km", "must be positive");
            }
        }

        let mut grid = None;
        if let Some(g) = grid_obj {
            let mut gf = Fields {
                obj: g,
                prefix: "grid",
                errors: top.errors,
            };
            gf.reject_unknown(&["bbox", "width", "height"]);
            let width = gf.count("width");
            let height = gf.count("height");
            if let (Some(w), Some(h)) = (width, height) {
                if w * h > MAX_GRID_CELLS {
                    gf.error("width", format!("grid has {} cells, limit is {MAX_GRID_CELLS}", w * h));
                }
            }
            let bbox_obj = gf.object("bbox");
            let mut bbox = None;
            if let Some(b) = bbox_obj {
                let mut bf = Fields {
                    obj: b,
                    prefix: "grid.bbox",
                    errors: gf.errors,
                };
                bf.reject_unknown(&["west", "south", "east", "north"]);
                let west = bf.number("west", true);
                let south = bf.number("south", true);
                let east = bf.number("east", true);
                let north = bf.number("north", true);
                for (key, v, lo, hi) in [
                    ("west", west, -180.0, 180.0),
                    ("east", east, -180.0, 180.0),
                    ("south", south, -90.0, 90.0),
                    ("north", north, -90.0, 90.0),
                ] {
                    if let Some(v) = v {
                        if !(lo..=hi).contains(&v) {
                            bf.error(key, format!("must be in [{lo}, {hi}]"));
                        }
                    }
                }
                if let (Some(w), Some(e)) = (west, east) {
                    if w >= e {
                        bf.error("east", "must be greater than west");
                    }
                }
                if let (Some(s), Some(n)) = (south, north) {
                    if s >= n {
                        bf.error("north", "must be greater than south");
                    }
                }
                if let (Some(west), Some(south), Some(east), Some(north)) = (west, south, east, north) {
                    bbox = Some(GeoBox { west, south, east, north });
                }
            }
            if let (Some(bbox), Some(width), Some(height)) = (bbox, width, height) {
                grid = Some(GridSpec { bbox, width, height });
            }
        }

        if !errors.is_empty() {
            return Err(RequestError::Invalid(errors));
        }
        let (kind, portee, beta) = kernel_parts.expect("validated");
        let kernel = match Kernel::new(kind.expect("validated"), portee.expect("validated"), beta) {
            Ok(k) => k,
            Err(Error::ParetoExponent(b)) => {
                return Err(RequestError::Unprocessable(FieldError::new(
                    "kernel.beta",
                    format!("pareto exponent must exceed 3, got {b}"),
                )))
            }
            Err(e) => return Err(RequestError::Invalid(vec![FieldError::new("kernel", e.to_string())])),
        };
        Ok(ComputeRequest {
            dataset: dataset.expect("validated"),
            numerator: numerator.expect("validated"),
            denominator,
            kernel: KernelSpec::from(&kernel),
            portee2_km: portee2,
            grid: grid.expect("validated"),
            epsilon: epsilon.unwrap_or(default_epsilon),
        })
    }

    /// Kernel at the first portée.
    pub fn kernel(&self) -> Kernel {
        self.kernel.build().expect("validated kernel")
    }

    /// Same kernel family at the second portée, when one was requested.
    pub fn kernel2(&self) -> Option<Kernel> {
        self.portee2_km
            .map(|p| Kernel::new(self.kernel.kind, p, self.kernel.beta).expect("validated kernel"))
    }

    /// SHA-256 (hex) of the canonical JSON form; equal requests share a key.
    pub fn cache_key(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Numerator,
    Denominator,
}

/// One computed potential grid of a request.
#[derive(Debug, Clone)]
pub struct ComputedGrid {
    pub role: Role,
    pub grid: PotentialGrid,
}

#[derive(Debug, Clone)]
pub struct Computation {
    pub request: ComputeRequest,
    pub key: String,
    /// Numerator then denominator at the first portée, then the same at the
    /// second portée.
    pub grids: Vec<ComputedGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub role: Role,
    pub portee_km: f64,
    pub payload: GridPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResponse {
    pub key: String,
    pub request: ComputeRequest,
    pub grids: Vec<GridEntry>,
}

impl GridResponse {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("response serializes")
    }
}

/// Resolves the request against the catalog and computes every grid it asks for.
pub fn execute(
    request: &ComputeRequest,
    catalog: &Catalog,
    opts: &ComputeOptions,
) -> Result<Computation, RequestError> {
    let dataset = catalog.get(&request.dataset).map_err(|e| match e {
        Error::UnknownDataset(id) => RequestError::NotFound(FieldError::new("dataset", format!("unknown dataset `{id}`"))),
        other => RequestError::Compute(other),
    })?;
    execute_on(request, &dataset, opts)
}

pub fn execute_on(
    request: &ComputeRequest,
    dataset: &Arc<Dataset>,
    opts: &ComputeOptions,
) -> Result<Computation, RequestError> {
    execute_with(request, dataset, opts, Method::Quadtree)
}

/// Same grids through the unpruned reference sum (no tabulation either).
pub fn execute_naive(
    request: &ComputeRequest,
    dataset: &Arc<Dataset>,
    opts: &ComputeOptions,
) -> Result<Computation, RequestError> {
    execute_with(request, dataset, opts, Method::Naive)
}

fn execute_with(
    request: &ComputeRequest,
    dataset: &Arc<Dataset>,
    opts: &ComputeOptions,
    method: Method,
) -> Result<Computation, RequestError> {
    let mut roles = vec![(Role::Numerator, "numerator", request.numerator.as_str())];
    if let Some(den) = &request.denominator {
        roles.push((Role::Denominator, "denominator", den.as_str()));
    }
    for (_, field, variable) in &roles {
        if dataset.variable_index(variable).is_err() {
            return Err(RequestError::NotFound(FieldError::new(
                *field,
                format!("dataset `{}` has no stock `{variable}`", dataset.id()),
            )));
        }
    }
    let policy = CutoffPolicy::new(request.epsilon)?;
    let mut kernels = vec![request.kernel()];
    kernels.extend(request.kernel2());
    let mut grids = Vec::new();
    match method {
        Method::Quadtree => {
            let mut prepared = Vec::with_capacity(roles.len());
            for (role, _, variable) in &roles {
                prepared.push((*role, PreparedStocks::new(dataset, variable, opts)?));
            }
            for kernel in &kernels {
                for (role, stocks) in &prepared {
                    let grid = compute_grid_prepared(stocks, kernel, &request.grid, &policy, opts)?;
                    grids.push(ComputedGrid { role: *role, grid });
                }
            }
        }
        Method::Naive => {
            for kernel in &kernels {
                for (role, _, variable) in &roles {
                    let grid = compute_grid_naive(dataset, variable, kernel, &request.grid, opts)?;
                    grids.push(ComputedGrid { role: *role, grid });
                }
            }
        }
    }
    Ok(Computation {
        request: request.clone(),
        key: request.cache_key(),
        grids,
    })
}

impl Computation {
    pub fn response(&self) -> GridResponse {
        GridResponse {
            key: self.key.clone(),
            request: self.request.clone(),
            grids: self
                .grids
                .iter()
                .map(|g| GridEntry {
                    role: g.role,
                    portee_km: g.grid.meta.kernel.portee_km,
                    payload: GridPayload::from_potential(&g.grid),
                })
                .collect(),
        }
    }

    fn find(&self, role: Role, portee: f64) -> Option<&PotentialGrid> {
        self.grids
            .iter()
            .find(|g| g.role == role && g.grid.meta.kernel.portee_km == portee)
            .map(|g| &g.grid)
    }

    /// Ratio grids, one per portée, when a denominator was requested.
    pub fn ratios(&self) -> Result<Vec<RatioGrid>, Error> {
        if self.request.denominator.is_none() {
            return Ok(Vec::new());
        }
        let mut portees = vec![self.request.kernel.portee_km];
        portees.extend(self.request.portee2_km);
        portees
            .into_iter()
            .map(|p| {
                let num = self.find(Role::Numerator, p).expect("numerator computed");
                let den = self.find(Role::Denominator, p).expect("denominator computed");
                ratio_grid(num, den, DEFAULT_RATIO_FLOOR)
            })
            .collect()
    }

    /// `Z₂ − Z₁` when both a denominator and a second portée were requested.
    pub fn difference(&self) -> Result<Option<DiffGrid>, Error> {
        let ratios = self.ratios()?;
        match ratios.as_slice() {
            [z1, z2] => Ok(Some(diff_grid(z2, z1)?)),
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "dataset": "eu",
            "numerator": "pop",
            "kernel": {"kind": "gaussian", "portee_km": 50.0},
            "grid": {"bbox": {"west": -10.0, "south": 35.0, "east": 30.0, "north": 60.0}, "width": 4, "height": 3}
        })
    }

    fn fields(v: &Value) -> Vec<String> {
        match ComputeRequest::from_json(v) {
            Err(RequestError::Invalid(errs)) => errs.into_iter().map(|e| e.field).collect(),
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn minimal_request_gets_defaults() {
        let r = ComputeRequest::from_json(&base()).unwrap();
        assert_eq!(r.epsilon, DEFAULT_EPSILON);
        assert_eq!(r.grid.width, 4);
        assert_eq!(r.kernel.kind, KernelKind::Gaussian);
        assert!(r.denominator.is_none());
    }

    #[test]
    fn pareto_beta_is_canonicalized() {
        let mut v = base();
        v["kernel"] = json!({"kind": "pareto", "portee_km": 50.0});
        let a = ComputeRequest::from_json(&v).unwrap();
        v["kernel"]["beta"] = json!(4.0);
        let b = ComputeRequest::from_json(&v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cache_key(), b.cache_key());
    }

    #[test]
    fn nonpositive_portee_names_field() {
        let mut v = base();
        v["kernel"]["portee_km"] = json!(0.0);
        assert_eq!(fields(&v), vec!["kernel.portee_km"]);
        v["kernel"]["portee_km"] = json!(-3);
        assert_eq!(fields(&v), vec!["kernel.portee_km"]);
    }

    #[test]
    fn every_bad_field_is_reported() {
        let v = json!({
            "dataset": 3,
            "numerator": "",
            "kernel": {"kind": "cubic", "portee_km": "far", "extra": 1},
            "portee2_km": -1,
            "grid": {"bbox": {"west": 10, "south": 95, "east": 5}, "width": 0, "height": 2.5},
            "epsilon": 2,
            "colour": "red"
        });
        let mut got = fields(&v);
        got.sort();
        let mut want = vec![
            "colour",
            "dataset",
            "numerator",
            "kernel.extra",
            "kernel.kind",
            "kernel.portee_km",
            "portee2_km",
            "epsilon",
            "grid.width",
            "grid.height",
            "grid.bbox.north",
            "grid.bbox.south",
            "grid.bbox.east",
        ];
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn beta_rules() {
        let mut v = base();
        v["kernel"]["beta"] = json!(4.0);
        assert_eq!(fields(&v), vec!["kernel.beta"]);
        v["kernel"]["kind"] = json!("pareto");
        v["kernel"]["beta"] = json!(2.5);
        assert!(matches!(ComputeRequest::from_json(&v), Err(RequestError::Unprocessable(_))));
        v["kernel"]["beta"] = json!(3.0);
        assert!(matches!(ComputeRequest::from_json(&v), Err(RequestError::Unprocessable(_))));
    }

    #[test]
    fn second_portee_must_be_larger() {
        let mut v = base();
        v["portee2_km"] = json!(50.0);
        assert_eq!(fields(&v), vec!["portee2_km"]);
        v["portee2_km"] = json!(100.0);
        assert!(ComputeRequest::from_json(&v).is_ok());
    }

    #[test]
    fn not_an_object() {
        assert!(matches!(ComputeRequest::from_json(&json!([1])), Err(RequestError::Invalid(_))));
        assert!(matches!(ComputeRequest::from_slice(b"{"), Err(RequestError::Invalid(_))));
    }

    #[test]
    fn cache_key_distinguishes_fields() {
        let a = ComputeRequest::from_json(&base()).unwrap();
        let mut v = base();
        v["grid"]["width"] = json!(5);
        let b = ComputeRequest::from_json(&v).unwrap();
        assert_ne!(a.cache_key(), b.cache_key());
        assert_eq!(a.cache_key(), ComputeRequest::from_json(&base()).unwrap().cache_key());
        assert_eq!(a.cache_key().len(), 64);
    }
}
