//! Normalized distance-decay kernels.
//!
//! Every kernel integrates to one over the plane and is calibrated so its mean
//! range `∫ f(r)·2πr² dr` equals the requested portée `p` (km):
//!
//! | kind          | profile                         | shape            |
//! |---------------|---------------------------------|------------------|
//! | `disk`        | `1/(πR²)` on `r ≤ R`            | `R = 3p/2`       |
//! | `damped-disk` | `2/(πR²)·(1 − r²/R²)` on `r ≤ R` | `R = 15p/8`      |
//! | `gaussian`    | `exp(−r²/σ²)/(πσ²)`             | `σ = 2p/√π`      |
//! | `pareto`      | `c·(1 + r/b)^(−β)`              | `b = p(β − 3)/2` |
//!
//! with `c = (β − 1)(β − 2)/(2πb²)` for the Pareto family, which needs `β > 3`
//! for the mean range to exist.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::integrate;

pub const DEFAULT_PARETO_BETA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Disk,
    DampedDisk,
    Gaussian,
    Pareto,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::Disk,
        KernelKind::DampedDisk,
        KernelKind::Gaussian,
        KernelKind::Pareto,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Disk => "disk",
            KernelKind::DampedDisk => "damped-disk",
            KernelKind::Gaussian => "gaussian",
            KernelKind::Pareto => "pareto",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            KernelKind::Disk => "uniform weight inside a disk, zero outside",
            KernelKind::DampedDisk => "quadratic taper to zero at the disk edge",
            KernelKind::Gaussian => "negative exponential of squared distance",
            KernelKind::Pareto => "inverse power decay with long-range interaction",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown kernel `{s}`")))
    }
}

/// A calibrated kernel. Immutable; construct with [`Kernel::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    kind: KernelKind,
    portee_km: f64,
    /// R for the disk families, σ for the Gaussian, b for Pareto.
    shape: f64,
    norm: f64,
    beta: Option<f64>,
    inv_shape_sq: f64,
}

impl Kernel {
    /// Builds and calibrates a kernel of mean range `portee_km`.
    ///
    /// `beta` is the Pareto exponent (default 4) and must be absent for the
    /// other kinds.
    pub fn new(kind: KernelKind, portee_km: f64, beta: Option<f64>) -> Result<Self> {
        if !(portee_km.is_finite() && portee_km > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "portee must be positive, got {portee_km}"
            )));
        }
        let p = portee_km;
        let (shape, norm, beta) = match kind {
            KernelKind::Pareto => {
                let beta = beta.unwrap_or(DEFAULT_PARETO_BETA);
                if !beta.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "pareto exponent must be finite, got {beta}"
                    )));
                }
                if beta <= 3.0 {
                    return Err(Error::ParetoExponent(beta));
                }
                let b = p * (beta - 3.0) / 2.0;
                let c = (beta - 1.0) * (beta - 2.0) / (2.0 * PI * b * b);
                (b, c, Some(beta))
            }
            _ if beta.is_some() => {
                return Err(Error::InvalidParameter(format!(
                    "exponent only applies to the pareto kernel, not `{kind}`"
                )))
            }
            KernelKind::Disk => {
                let r = 1.5 * p;
                (r, 1.0 / (PI * r * r), None)
            }
            KernelKind::DampedDisk => {
                let r = 15.0 * p / 8.0;
                (r, 2.0 / (PI * r * r), None)
            }
            KernelKind::Gaussian => {
                let sigma = 2.0 * p / PI.sqrt();
                (sigma, 1.0 / (PI * sigma * sigma), None)
            }
        };
        Ok(Self {
            kind,
            portee_km,
            shape,
            norm,
            beta,
            inv_shape_sq: 1.0 / (shape * shape),
        })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn portee_km(&self) -> f64 {
        self.portee_km
    }

    /// Calibrated shape parameter (R, σ or b depending on the kind).
    pub fn shape(&self) -> f64 {
        self.shape
    }

    /// Leading constant; also the kernel's maximum `f(0)`.
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    /// Radius beyond which the kernel is exactly zero, if any.
    pub fn support_radius(&self) -> Option<f64> {
        match self.kind {
            KernelKind::Disk | KernelKind::DampedDisk => Some(self.shape),
            _ => None,
        }
    }

    /// Kernel value at distance `r` km, in 1/km².
    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        match self.kind {
            KernelKind::Disk => {
                if r <= self.shape {
                    self.norm
                } else {
                    0.0
                }
            }
            KernelKind::DampedDisk => {
                if r <= self.shape {
                    self.norm * (1.0 - r * r * self.inv_shape_sq)
                } else {
                    0.0
                }
            }
            KernelKind::Gaussian => self.norm * (-r * r * self.inv_shape_sq).exp(),
            KernelKind::Pareto => {
                self.norm * (1.0 + r / self.shape).powf(-self.beta.unwrap_or(DEFAULT_PARETO_BETA))
            }
        }
    }

    /// Analytic upper bounds on `(∫_T^∞ f·2πr dr, ∫_T^∞ f·2πr² dr)`.
    fn tail_bounds(&self, t: f64) -> (f64, f64) {
        match self.kind {
            KernelKind::Disk | KernelKind::DampedDisk => {
                if t >= self.shape {
                    (0.0, 0.0)
                } else {
                    (f64::INFINITY, f64::INFINITY)
                }
            }
            KernelKind::Gaussian => {
                // erfc(x) <= exp(-x²) for x >= 0
                let e = (-t * t * self.inv_shape_sq).exp();
                (e, (t + PI.sqrt() * self.shape / 2.0) * e)
            }
            KernelKind::Pareto => {
                let beta = self.beta.unwrap_or(DEFAULT_PARETO_BETA);
                let b = self.shape;
                let u = 1.0 + t / b;
                let two_pi_c = 2.0 * PI * self.norm;
                let norm_tail = two_pi_c * b * b * u.powf(2.0 - beta) / (beta - 2.0);
                let mean_tail = two_pi_c * b * b * b * u.powf(3.0 - beta) / (beta - 3.0);
                if beta <= 3.0 {
                    (norm_tail, f64::INFINITY)
                } else {
                    (norm_tail, mean_tail)
                }
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn raw(kind: KernelKind, portee_km: f64, shape: f64, norm: f64, beta: Option<f64>) -> Self {
        Self {
            kind,
            portee_km,
            shape,
            norm,
            beta,
            inv_shape_sq: 1.0 / (shape * shape),
        }
    }
}

/// Parameters identifying a kernel; what travels on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub portee_km: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl KernelSpec {
    pub fn build(&self) -> Result<Kernel> {
        Kernel::new(self.kind, self.portee_km, self.beta)
    }
}

impl From<&Kernel> for KernelSpec {
    fn from(k: &Kernel) -> Self {
        Self {
            kind: k.kind,
            portee_km: k.portee_km,
            beta: k.beta,
        }
    }
}

/// Outcome of [`verify_kernel`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    /// `∫ f·2πr dr`, expected 1.
    pub norm_integral: f64,
    /// `∫ f·2πr² dr`, expected the portée.
    pub portee_integral: f64,
    /// Radius where the infinite tail was cut, for unbounded kernels.
    pub truncation_radius_km: Option<f64>,
    pub norm_ok: bool,
    pub portee_ok: bool,
    /// Set when a tail bound never drops below tolerance or quadrature fails.
    pub diverged: bool,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.norm_ok && self.portee_ok && !self.diverged
    }
}

/// Numerically checks the normalization and mean-range constraints.
///
/// `tol` is the absolute tolerance on the normalization and the relative
/// tolerance on the mean range. Unbounded kernels are truncated where the
/// analytic tail bound of both integrals falls below `tol/10`.
pub fn verify_kernel(k: &Kernel, tol: f64) -> Result<KernelReport> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let p = k.portee_km;
    let tail_target_norm = tol / 10.0;
    let tail_target_mean = tol / 10.0 * p;

    let (upper, truncation) = match k.support_radius() {
        Some(r) => (r, None),
        None => {
            let mut t = k.shape;
            let mut found = false;
            // doubling search; 2^1100 overflows, which means the tail never decays
            for _ in 0..1100 {
                let (tn, tm) = k.tail_bounds(t);
                if tn < tail_target_norm && tm < tail_target_mean {
                    found = true;
                    break;
                }
                t *= 2.0;
                if !t.is_finite() {
                    break;
                }
            }
            if !found {
                return Ok(KernelReport {
                    norm_integral: f64::NAN,
                    portee_integral: f64::INFINITY,
                    truncation_radius_km: None,
                    norm_ok: false,
                    portee_ok: false,
                    diverged: true,
                });
            }
            (t, Some(t))
        }
    };

    let quad_tol = tol / 100.0;
    let (norm, mean) = if k.kind == KernelKind::Pareto {
        // r = b(e^s − 1) spreads the algebraic tail evenly over s
        let b = k.shape;
        let s_max = (1.0 + upper / b).ln();
        let norm = integrate(
            |s: f64| {
                let r = b * s.exp_m1();
                k.eval(r) * 2.0 * PI * r * b * s.exp()
            },
            0.0,
            s_max,
            quad_tol,
            quad_tol,
        );
        let mean = integrate(
            |s: f64| {
                let r = b * s.exp_m1();
                k.eval(r) * 2.0 * PI * r * r * b * s.exp()
            },
            0.0,
            s_max,
            quad_tol * p,
            quad_tol,
        );
        (norm, mean)
    } else {
        (
            integrate(|r| k.eval(r) * 2.0 * PI * r, 0.0, upper, quad_tol, quad_tol),
            integrate(|r| k.eval(r) * 2.0 * PI * r * r, 0.0, upper, quad_tol * p, quad_tol),
        )
    };

    let diverged = !(norm.converged && mean.converged);
    let norm_ok = (norm.value - 1.0).abs() <= tol;
    let portee_ok = ((mean.value - p) / p).abs() <= tol;
    Ok(KernelReport {
        norm_integral: norm.value,
        portee_integral: mean.value,
        truncation_radius_km: truncation,
        norm_ok,
        portee_ok,
        diverged,
    })
}
