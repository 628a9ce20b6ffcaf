//! JSON grid payloads and plain-text/HTML cell reports.
//!
//! Values travel as IEEE-754 binary32, little-endian, row-major (north row
//! first), base64-encoded with the standard alphabet and padding. Undefined
//! ratio or difference cells are NaN. Grids are computed in f64; the cast to
//! f32 is the only rounding on the way out.

use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::engine::{DiffGrid, GridMeta, GridSpec, PotentialGrid, RatioGrid};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;

pub const ENCODING: &str = "f32le-rowmajor-base64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PayloadMeta {
    Potential(GridMeta),
    Ratio {
        kernel: KernelSpec,
        numerator: String,
        denominator: String,
        floor: f64,
    },
    Difference {
        portee1_km: f64,
        portee2_km: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPayload {
    pub spec: GridSpec,
    pub meta: PayloadMeta,
    pub warnings: Vec<Warning>,
    pub encoding: String,
    pub values: String,
}

/// Packs values as little-endian binary32 and base64-encodes them.
pub fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32(encoded: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(encoded)
        .map_err(|e| Error::InvalidParameter(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidParameter(format!(
            "payload length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Warnings attached to every potential grid.
pub fn potential_warnings(meta: &GridMeta) -> Vec<Warning> {
    let mut out = Vec::new();
    if meta.nyquist_warning {
        out.push(Warning {
            code: "nyquist".into(),
            message: format!(
                "portee {} km is below 2x the largest nearest-neighbor spacing ({:.3} km); \
                 the surface may still reflect the sampling mesh",
                meta.kernel.portee_km,
                meta.nyquist_min_portee_km.unwrap_or(f64::NAN)
            ),
        });
    }
    out.push(Warning {
        code: "margin".into(),
        message: format!(
            "values within about {} km of the data extent are biased low (no data beyond it)",
            meta.margin_km
        ),
    });
    out
}

fn to_f32(values: impl Iterator<Item = f64>) -> Vec<f32> {
    values.map(|v| v as f32).collect()
}

impl GridPayload {
    pub fn from_potential(grid: &PotentialGrid) -> Self {
        Self {
            spec: grid.spec,
            meta: PayloadMeta::Potential(grid.meta.clone()),
            warnings: potential_warnings(&grid.meta),
            encoding: ENCODING.into(),
            values: encode_f32(&to_f32(grid.values.iter().copied())),
        }
    }

    pub fn from_ratio(grid: &RatioGrid) -> Self {
        Self {
            spec: grid.spec,
            meta: PayloadMeta::Ratio {
                kernel: grid.kernel,
                numerator: grid.numerator.clone(),
                denominator: grid.denominator.clone(),
                floor: grid.floor,
            },
            warnings: Vec::new(),
            encoding: ENCODING.into(),
            values: encode_f32(&to_f32(grid.values.iter().map(|v| v.unwrap_or(f64::NAN)))),
        }
    }

    pub fn from_diff(grid: &DiffGrid) -> Self {
        Self {
            spec: grid.spec,
            meta: PayloadMeta::Difference {
                portee1_km: grid.portee1_km,
                portee2_km: grid.portee2_km,
            },
            warnings: Vec::new(),
            encoding: ENCODING.into(),
            values: encode_f32(&to_f32(grid.values.iter().map(|v| v.unwrap_or(f64::NAN)))),
        }
    }

    /// Decodes the value array, checking its length against the spec.
    pub fn decode_values(&self) -> Result<Vec<f32>> {
        if self.encoding != ENCODING {
            return Err(Error::InvalidParameter(format!("unsupported encoding `{}`", self.encoding)));
        }
        let values = decode_f32(&self.values)?;
        if values.len() != self.spec.width * self.spec.height {
            return Err(Error::InvalidParameter(format!(
                "payload holds {} values for a {}x{} grid",
                values.len(),
                self.spec.width,
                self.spec.height
            )));
        }
        Ok(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Html,
}

/// One line per cell: center longitude and latitude (6 decimals) and the
/// float32 value in shortest round-trip form. Row-major, north row first.
pub fn render_report(payload: &GridPayload, format: ReportFormat) -> Result<String> {
    let values = payload.decode_values()?;
    let spec = &payload.spec;
    let mut out = String::new();
    match format {
        ReportFormat::Text => {
            out.push_str("lon,lat,value\n");
            for (i, v) in values.iter().enumerate() {
                let (row, col) = (i / spec.width, i % spec.width);
                writeln!(out, "{:.6},{:.6},{}", spec.col_lon(col), spec.row_lat(row), v).expect("string write");
            }
        }
        ReportFormat::Html => {
            out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>potential report</title></head><body>\n");
            out.push_str("<table>\n<tr><th>lon</th><th>lat</th><th>value</th></tr>\n");
            for (i, v) in values.iter().enumerate() {
                let (row, col) = (i / spec.width, i % spec.width);
                writeln!(
                    out,
                    "<tr><td>{:.6}</td><td>{:.6}</td><td>{}</td></tr>",
                    spec.col_lon(col),
                    spec.row_lat(row),
                    v
                )
                .expect("string write");
            }
            out.push_str("</table>\n</body></html>\n");
        }
    }
    Ok(out)
}

/// Reads the value column back out of a text report.
pub fn parse_text_report(text: &str) -> Result<Vec<(f64, f64, f32)>> {
    text.lines()
        .skip(1)
        .map(|line| {
            let mut it = line.split(',');
            let mut next = |what: &str| {
                it.next()
                    .ok_or_else(|| Error::InvalidParameter(format!("report line missing {what}: `{line}`")))
            };
            let lon = next("lon")?;
            let lat = next("lat")?;
            let value = next("value")?;
            let bad = |_| Error::InvalidParameter(format!("bad report line `{line}`"));
            Ok((lon.parse().map_err(bad)?, lat.parse().map_err(bad)?, value.parse().map_err(bad)?))
        })
        .collect()
}
