//! Dataset ingestion and the on-disk catalog.
//!
//! Layout of a catalog directory:
//!
//! ```text
//! <root>/index.json             {"datasets": ["<id>", ...]}  insertion order
//! <root>/datasets/<id>.json     one serialized dataset
//! <root>/boundaries/<id>.geojson  optional GeoJSON FeatureCollection
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place, so a
//! reader never sees a half-written dataset.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{GeoPoint, SphereModel};
use crate::spatial_index::{nearest_neighbor_distances, StockPoint};

const INDEX_FILE: &str = "index.json";
const DATASETS_DIR: &str = "datasets";
const BOUNDARIES_DIR: &str = "boundaries";
const RESERVED_COLUMNS: [&str; 3] = ["id", "lon", "lat"];

/// A validated set of stock points sharing the same variables.
#[derive(Debug)]
pub struct Dataset {
    id: String,
    name: String,
    variables: Vec<String>,
    points: Vec<StockPoint>,
    has_boundaries: bool,
    nyquist: OnceLock<Option<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    id: String,
    name: String,
    variables: Vec<String>,
    #[serde(default)]
    has_boundaries: bool,
    units: Vec<UnitRecord>,
}

#[derive(Serialize, Deserialize)]
struct UnitRecord {
    id: String,
    lon: f64,
    lat: f64,
    stocks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub id: String,
    pub name: String,
    pub points: usize,
    pub variables: Vec<String>,
    pub has_boundaries: bool,
}

pub fn validate_slug(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
        && id.as_bytes()[0].is_ascii_alphanumeric();
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "dataset id `{id}` must be 1-64 ASCII letters, digits, `-` or `_`, starting alphanumeric"
        )))
    }
}

impl Dataset {
    pub fn new(id: &str, name: &str, variables: Vec<String>, points: Vec<StockPoint>) -> Result<Self> {
        validate_slug(id)?;
        if points.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if variables.is_empty() {
            return Err(Error::InvalidParameter("dataset needs at least one stock variable".into()));
        }
        for (i, v) in variables.iter().enumerate() {
            if v.is_empty() || RESERVED_COLUMNS.contains(&v.as_str()) {
                return Err(Error::InvalidParameter(format!("invalid variable name `{v}`")));
            }
            if variables[..i].contains(v) {
                return Err(Error::InvalidParameter(format!("duplicate variable `{v}`")));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(points.len());
        for p in &points {
            if p.stocks.len() != variables.len() {
                return Err(Error::InvalidParameter(format!(
                    "unit `{}` has {} stocks for {} variables",
                    p.id,
                    p.stocks.len(),
                    variables.len()
                )));
            }
            if let Some(s) = p.stocks.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "unit `{}` has invalid stock {s}",
                    p.id
                )));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate unit id `{}`", p.id)));
            }
        }
        Ok(Self {
            id: id.to_string(),
            name: name.to_string(),
            variables,
            points,
            has_boundaries: false,
            nyquist: OnceLock::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn points(&self) -> &[StockPoint] {
        &self.points
    }

    pub fn has_boundaries(&self) -> bool {
        self.has_boundaries
    }

    pub fn variable_index(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn locations(&self) -> Vec<GeoPoint> {
        self.points.iter().map(|p| p.location).collect()
    }

    pub fn column(&self, variable: usize) -> Vec<f64> {
        self.points.iter().map(|p| p.stocks[variable]).collect()
    }

    pub fn column_sum(&self, variable: usize) -> f64 {
        self.points.iter().map(|p| p.stocks[variable]).sum()
    }

    /// Twice the largest nearest-neighbor distance on the default sphere;
    /// `None` with fewer than two points. Computed once and cached.
    pub fn nyquist_min_portee(&self) -> Option<f64> {
        *self
            .nyquist
            .get_or_init(|| nyquist_min_portee(&self.locations(), SphereModel::default()))
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            id: self.id.clone(),
            name: self.name.clone(),
            points: self.points.len(),
            variables: self.variables.clone(),
            has_boundaries: self.has_boundaries,
        }
    }

    fn to_file(&self) -> DatasetFile {
        DatasetFile {
            id: self.id.clone(),
            name: self.name.clone(),
            variables: self.variables.clone(),
            has_boundaries: self.has_boundaries,
            units: self
                .points
                .iter()
                .map(|p| UnitRecord {
                    id: p.id.clone(),
                    lon: p.location.lon(),
                    lat: p.location.lat(),
                    stocks: p.stocks.clone(),
                })
                .collect(),
        }
    }

    fn from_file(f: DatasetFile) -> Result<Self> {
        let points = f
            .units
            .into_iter()
            .map(|u| {
                Ok(StockPoint {
                    location: GeoPoint::new(u.lat, u.lon)?,
                    id: u.id,
                    stocks: u.stocks,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Dataset::new(&f.id, &f.name, f.variables, points)?;
        ds.has_boundaries = f.has_boundaries;
        Ok(ds)
    }
}

/// `2 × max_a min_{b≠a} d(a, b)`, a proxy for twice the largest mesh size.
pub fn nyquist_min_portee(locations: &[GeoPoint], sphere: SphereModel) -> Option<f64> {
    if locations.len() < 2 {
        return None;
    }
    let nn = nearest_neighbor_distances(locations, sphere).ok()?;
    Some(2.0 * nn.into_iter().fold(0.0, f64::max))
}

fn ingest_error(line: u64, column: &str, message: impl Into<String>) -> Error {
    Error::Ingest {
        line,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Parses `id,lon,lat,<var>...` CSV into a dataset. Line numbers in errors
/// count the header as line 1.
pub fn parse_csv<R: Read>(reader: R, id: &str, name: &str) -> Result<Dataset> {
    validate_slug(id)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| ingest_error(1, "", format!("unreadable header: {e}")))?
        .clone();
    let header: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    for (i, expected) in RESERVED_COLUMNS.iter().enumerate() {
        if header.get(i).map(String::as_str) != Some(*expected) {
            return Err(ingest_error(
                1,
                header.get(i).map(String::as_str).unwrap_or(""),
                format!("column {} must be `{expected}`", i + 1),
            ));
        }
    }
    let variables: Vec<String> = header[3..].to_vec();
    if variables.is_empty() {
        return Err(ingest_error(1, "", "no stock columns after `id,lon,lat`"));
    }
    for (i, v) in variables.iter().enumerate() {
        if v.is_empty() {
            return Err(ingest_error(1, "", format!("column {} has an empty name", i + 4)));
        }
        if RESERVED_COLUMNS.contains(&v.as_str()) || variables[..i].contains(v) {
            return Err(ingest_error(1, v, "duplicate column name"));
        }
    }

    let mut points = Vec::new();
    let mut ids = std::collections::HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            ingest_error(line, "", format!("malformed row: {e}"))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(ingest_error(
                line,
                "",
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let unit = record[0].trim();
        if unit.is_empty() {
            return Err(ingest_error(line, "id", "empty unit id"));
        }
        if let Some(first) = ids.insert(unit.to_string(), line) {
            return Err(ingest_error(line, "id", format!("duplicate unit id `{unit}` (first on line {first})")));
        }
        let number = |col: usize| -> Result<f64> {
            let raw = record[col].trim();
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(ingest_error(line, &header[col], format!("`{raw}` is not a finite number"))),
            }
        };
        let lon = number(1)?;
        let lat = number(2)?;
        if !(-180.0..=180.0).contains(&lon) {
            return Err(ingest_error(line, "lon", format!("longitude {lon} outside [-180, 180]")));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(ingest_error(line, "lat", format!("latitude {lat} outside [-90, 90]")));
        }
        let mut stocks = Vec::with_capacity(variables.len());
        for col in 3..header.len() {
            let v = number(col)?;
            if v < 0.0 {
                return Err(ingest_error(line, &header[col], format!("negative stock {v}")));
            }
            stocks.push(v);
        }
        points.push(StockPoint {
            id: unit.to_string(),
            location: GeoPoint::new(lat, lon)?,
            stocks,
        });
    }
    Dataset::new(id, name, variables, points)
}

/// Checks that `value` looks like a GeoJSON FeatureCollection.
pub fn validate_boundaries(value: &serde_json::Value) -> Result<()> {
    let ok = value.get("type").and_then(|t| t.as_str()) == Some("FeatureCollection")
        && value.get("features").map(|f| f.is_array()).unwrap_or(false);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(
            "boundaries must be a GeoJSON FeatureCollection".into(),
        ))
    }
}

#[derive(Serialize, Deserialize, Default)]
struct IndexFile {
    datasets: Vec<String>,
}

/// Directory-backed dataset store. Reads run concurrently; ingest is exclusive.
#[derive(Debug)]
pub struct Catalog {
    root: PathBuf,
    datasets: RwLock<Vec<Arc<Dataset>>>,
}

impl Catalog {
    /// Opens (creating if needed) the catalog at `root` and loads every dataset.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join(DATASETS_DIR)).map_err(|e| Error::io(&root, e))?;
        fs::create_dir_all(root.join(BOUNDARIES_DIR)).map_err(|e| Error::io(&root, e))?;
        let index_path = root.join(INDEX_FILE);
        let index: IndexFile = match fs::read(&index_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| Error::Catalog(format!("{}: {e}", index_path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => IndexFile::default(),
            Err(e) => return Err(Error::io(index_path, e)),
        };
        let mut datasets = Vec::with_capacity(index.datasets.len());
        for id in &index.datasets {
            let path = dataset_path(&root, id);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let file: DatasetFile = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Catalog(format!("{}: {e}", path.display())))?;
            let ds = Dataset::from_file(file)?;
            if ds.id != *id {
                return Err(Error::Catalog(format!("{} holds dataset `{}`", path.display(), ds.id)));
            }
            datasets.push(Arc::new(ds));
        }
        Ok(Self {
            root,
            datasets: RwLock::new(datasets),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Reads `csv_path` (and optional GeoJSON boundaries), validates, and
    /// stores the dataset, replacing any dataset with the same id.
    pub fn ingest_csv(
        &self,
        csv_path: impl AsRef<Path>,
        id: &str,
        name: &str,
        boundaries: Option<&Path>,
    ) -> Result<Arc<Dataset>> {
        let path = csv_path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ds = parse_csv(std::io::BufReader::new(file), id, name)?;
        let boundaries = match boundaries {
            Some(p) => {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                let value: serde_json::Value = serde_json::from_slice(&bytes)?;
                validate_boundaries(&value)?;
                Some(value)
            }
            None => None,
        };
        self.insert(ds, boundaries)
    }

    /// Stores an already validated dataset.
    pub fn insert(&self, mut ds: Dataset, boundaries: Option<serde_json::Value>) -> Result<Arc<Dataset>> {
        if let Some(b) = &boundaries {
            validate_boundaries(b)?;
        }
        ds.has_boundaries = boundaries.is_some();
        let mut guard = self.datasets.write().unwrap_or_else(|e| e.into_inner());

        let bpath = boundaries_path(&self.root, &ds.id);
        match &boundaries {
            Some(b) => write_atomic(&bpath, &serde_json::to_vec(b)?)?,
            None => match fs::remove_file(&bpath) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(bpath, e)),
            },
        }
        write_atomic(&dataset_path(&self.root, &ds.id), &serde_json::to_vec(&ds.to_file())?)?;

        let ds = Arc::new(ds);
        let mut next: Vec<Arc<Dataset>> = guard.clone();
        match next.iter_mut().find(|d| d.id == ds.id) {
            Some(slot) => *slot = ds.clone(),
            None => next.push(ds.clone()),
        }
        let index = IndexFile {
            datasets: next.iter().map(|d| d.id.clone()).collect(),
        };
        write_atomic(&self.root.join(INDEX_FILE), &serde_json::to_vec_pretty(&index)?)?;
        *guard = next;
        Ok(ds)
    }

    pub fn list_datasets(&self) -> Vec<DatasetSummary> {
        self.read().iter().map(|d| d.summary()).collect()
    }

    pub fn list_stocks(&self, id: &str) -> Result<Vec<String>> {
        Ok(self.get(id)?.variables.clone())
    }

    pub fn get(&self, id: &str) -> Result<Arc<Dataset>> {
        self.read()
            .iter()
            .find(|d| d.id == id)
            .cloned()
            .ok_or_else(|| Error::UnknownDataset(id.to_string()))
    }

    pub fn boundaries(&self, id: &str) -> Result<Option<serde_json::Value>> {
        let ds = self.get(id)?;
        if !ds.has_boundaries {
            return Ok(None);
        }
        let path = boundaries_path(&self.root, id);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_slice(&bytes)?))
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Vec<Arc<Dataset>>> {
        self.datasets.read().unwrap_or_else(|e| e.into_inner())
    }
}

fn dataset_path(root: &Path, id: &str) -> PathBuf {
    root.join(DATASETS_DIR).join(format!("{id}.json"))
}

fn boundaries_path(root: &Path, id: &str) -> PathBuf {
    root.join(BOUNDARIES_DIR).join(format!("{id}.geojson"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(dir, e));
    }
    Ok(())
}
