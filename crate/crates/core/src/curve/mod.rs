//! Iso-quality curve reconstruction and power-minimal pruning ratio.
//!
//! Sampled `(rho, display W, rendering W)` triples are min-max normalized per scene.
//! On the normalized axes display power follows `D(x) = 1 - V_d (1 - x) / (K_d + 1 - x)`
//! and rendering power `R(x) = 1 - V_r x / (K_r + x)`. Both are convex and monotone
//! for positive parameters, so total power has at most one stationary point:
//!
//! ```text
//! x* = (sqrt(B) (K_d + 1) - sqrt(A) K_r) / (sqrt(A) + sqrt(B)),
//! A = w_d V_d K_d,  B = w_r V_r K_r
//! ```
//!
//! where `w_d`, `w_r` are the display and rendering power spans in Watts. With unit
//! spans this is the stationary point of `D + R`.

mod fit;
mod pipeline;

pub use fit::{fit_mm, MmFit, MAX_ITERATIONS, STEP_TOLERANCE};
pub use pipeline::{
    build_power_optimal_model, fit_samples, leave_one_out_errors, mean_ssim, sample_curve, Checkpointer, CurveFit,
    OptimizeOutcome, OptimizeReport, OptimizeSettings, SampleRecord,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::{IsoQualitySample, SampleFlags};

/// Parameters `(V, K)` of one saturating curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmParams {
    pub v: f64,
    pub k: f64,
}

impl MmParams {
    pub fn is_valid(&self) -> bool {
        self.v > 0.0 && self.k > 0.0 && self.v.is_finite() && self.k.is_finite()
    }
}

/// Normalized display power at normalized ratio `x`.
pub fn display_curve(p: MmParams, x: f64) -> f64 {
    let u = 1.0 - x;
    1.0 - p.v * u / (p.k + u)
}

/// Normalized rendering power at normalized ratio `x`.
pub fn rendering_curve(p: MmParams, x: f64) -> f64 {
    1.0 - p.v * x / (p.k + x)
}

/// One measured point of an iso-quality curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub rho: f64,
    pub display_watts: f64,
    pub rendering_watts: f64,
    pub lambda_used: f64,
    pub quality_achieved: f64,
    #[serde(default)]
    pub flags: SampleFlags,
}

impl CurveSample {
    pub fn total_watts(&self) -> f64 {
        self.display_watts + self.rendering_watts
    }
}

impl From<&IsoQualitySample> for CurveSample {
    fn from(s: &IsoQualitySample) -> Self {
        Self {
            rho: s.rho,
            display_watts: s.display_watts(),
            rendering_watts: s.rendering_watts(),
            lambda_used: s.lambda_used,
            quality_achieved: s.quality_db,
            flags: s.flags,
        }
    }
}

/// Per-scene min-max constants mapping Watts and ratios to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub rho: [f64; 2],
    pub display_watts: [f64; 2],
    pub rendering_watts: [f64; 2],
}

fn to_unit(range: [f64; 2], v: f64) -> f64 {
    (v - range[0]) / (range[1] - range[0])
}

fn from_unit(range: [f64; 2], v: f64) -> f64 {
    range[0] + (range[1] - range[0]) * v
}

impl Normalization {
    pub const IDENTITY: Normalization =
        Normalization { rho: [0.0, 1.0], display_watts: [0.0, 1.0], rendering_watts: [0.0, 1.0] };

    pub fn rho_to_unit(&self, rho: f64) -> f64 {
        to_unit(self.rho, rho)
    }

    pub fn rho_from_unit(&self, x: f64) -> f64 {
        from_unit(self.rho, x)
    }

    pub fn display_to_unit(&self, w: f64) -> f64 {
        to_unit(self.display_watts, w)
    }

    pub fn display_from_unit(&self, v: f64) -> f64 {
        from_unit(self.display_watts, v)
    }

    pub fn rendering_to_unit(&self, w: f64) -> f64 {
        to_unit(self.rendering_watts, w)
    }

    pub fn rendering_from_unit(&self, v: f64) -> f64 {
        from_unit(self.rendering_watts, v)
    }
}

/// Fitted iso-quality curve for one quality target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoQualityCurve {
    pub display: MmParams,
    pub rendering: MmParams,
    pub normalization: Normalization,
    /// Quality target the samples were drawn at, dB; `None` for hand-built curves.
    pub q_min: Option<f64>,
}

impl IsoQualityCurve {
    /// Curve on already normalized axes.
    pub fn from_params(display: MmParams, rendering: MmParams) -> Self {
        Self { display, rendering, normalization: Normalization::IDENTITY, q_min: None }
    }

    pub fn display_unit(&self, rho: f64) -> f64 {
        display_curve(self.display, self.normalization.rho_to_unit(rho))
    }

    pub fn rendering_unit(&self, rho: f64) -> f64 {
        rendering_curve(self.rendering, self.normalization.rho_to_unit(rho))
    }

    pub fn display_watts(&self, rho: f64) -> f64 {
        self.normalization.display_from_unit(self.display_unit(rho))
    }

    pub fn rendering_watts(&self, rho: f64) -> f64 {
        self.normalization.rendering_from_unit(self.rendering_unit(rho))
    }

    pub fn total_watts(&self, rho: f64) -> f64 {
        self.display_watts(rho) + self.rendering_watts(rho)
    }
}

/// Fit quality of both regressions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Mean relative error of predicted Watts.
    pub display_mre: f64,
    pub rendering_mre: f64,
    /// Coefficient of determination on normalized values.
    pub display_r2: f64,
    pub rendering_r2: f64,
    pub display_iterations: usize,
    pub rendering_iterations: usize,
}

fn span(values: impl Iterator<Item = f64>) -> [f64; 2] {
    values.fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], v| [lo.min(v), hi.max(v)])
}

fn r_squared(y: &[f64], pred: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

fn mre(y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(a, b)| ((b - a) / a).abs()).sum::<f64>() / y.len() as f64
}

/// Normalizes the samples and fits both curves.
pub fn fit_curve(samples: &[CurveSample]) -> Result<(IsoQualityCurve, FitDiagnostics)> {
    if samples.len() < 3 {
        return Err(Error::Invalid(format!("curve fit needs at least 3 samples, got {}", samples.len())));
    }
    if !samples.iter().all(|s| s.rho.is_finite() && s.display_watts.is_finite() && s.rendering_watts.is_finite()) {
        return Err(Error::Invalid("non-finite curve sample".into()));
    }
    let mut rhos: Vec<f64> = samples.iter().map(|s| s.rho).collect();
    rhos.sort_by(f64::total_cmp);
    rhos.dedup();
    if rhos.len() < 3 {
        return Err(Error::Invalid("curve fit needs at least 3 distinct pruning ratios".into()));
    }
    let norm = Normalization {
        rho: span(samples.iter().map(|s| s.rho)),
        display_watts: span(samples.iter().map(|s| s.display_watts)),
        rendering_watts: span(samples.iter().map(|s| s.rendering_watts)),
    };
    for (name, r) in [("display", norm.display_watts), ("rendering", norm.rendering_watts)] {
        if !(r[1] - r[0] > 1e-12 * r[1].abs().max(1e-300)) {
            return Err(Error::Degenerate(format!("{name} power does not vary across samples")));
        }
    }

    let x: Vec<f64> = samples.iter().map(|s| norm.rho_to_unit(s.rho)).collect();
    let d: Vec<f64> = samples.iter().map(|s| norm.display_to_unit(s.display_watts)).collect();
    let r: Vec<f64> = samples.iter().map(|s| norm.rendering_to_unit(s.rendering_watts)).collect();
    let u_d: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();

    let (dfit, rfit) = match (fit_mm(&u_d, &d), fit_mm(&x, &r)) {
        (Ok(a), Ok(b)) => (a, b),
        (a, b) => {
            let pick = |f: Result<MmFit>| match f {
                Ok(f) => f.params,
                Err(Error::FitFailed { best, .. }) => best.0,
                Err(_) => MmParams { v: f64::NAN, k: f64::NAN },
            };
            return Err(Error::FitFailed {
                message: "iso-quality curve regression did not converge".into(),
                best: Box::new((pick(a), pick(b))),
            });
        }
    };
    let curve = IsoQualityCurve { display: dfit.params, rendering: rfit.params, normalization: norm, q_min: None };
    let d_pred: Vec<f64> = x.iter().map(|&v| display_curve(curve.display, v)).collect();
    let r_pred: Vec<f64> = x.iter().map(|&v| rendering_curve(curve.rendering, v)).collect();
    let dw: Vec<f64> = samples.iter().map(|s| s.display_watts).collect();
    let rw: Vec<f64> = samples.iter().map(|s| s.rendering_watts).collect();
    let dw_pred: Vec<f64> = d_pred.iter().map(|&v| norm.display_from_unit(v)).collect();
    let rw_pred: Vec<f64> = r_pred.iter().map(|&v| norm.rendering_from_unit(v)).collect();
    let diagnostics = FitDiagnostics {
        display_mre: mre(&dw, &dw_pred),
        rendering_mre: mre(&rw, &rw_pred),
        display_r2: r_squared(&d, &d_pred),
        rendering_r2: r_squared(&r, &r_pred),
        display_iterations: dfit.iterations,
        rendering_iterations: rfit.iterations,
    };
    Ok((curve, diagnostics))
}

/// Power-minimal point of a curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerOptimum {
    pub rho_star: f64,
    /// Unclamped stationary ratio.
    pub stationary_rho: f64,
    pub clamped: bool,
    pub display_unit: f64,
    pub rendering_unit: f64,
    pub display_watts: f64,
    pub rendering_watts: f64,
    pub total_watts: f64,
}

/// Minimizes predicted total Watts over `rho_bounds` in closed form.
pub fn minimize_total_power(curve: &IsoQualityCurve, rho_bounds: [f64; 2]) -> Result<PowerOptimum> {
    let [lo, hi] = rho_bounds;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Invalid(format!("invalid ratio bounds [{lo}, {hi}]")));
    }
    if !(curve.display.is_valid() && curve.rendering.is_valid()) {
        return Err(Error::Invalid("curve parameters must be positive".into()));
    }
    let n = &curve.normalization;
    let w_d = n.display_watts[1] - n.display_watts[0];
    let w_r = n.rendering_watts[1] - n.rendering_watts[0];
    let (d, r) = (curve.display, curve.rendering);
    let sa = (w_d * d.v * d.k).sqrt();
    let sb = (w_r * r.v * r.k).sqrt();
    let x_star = (sb * (d.k + 1.0) - sa * r.k) / (sa + sb);
    let stationary_rho = n.rho_from_unit(x_star);
    let rho_star = stationary_rho.clamp(lo, hi);
    Ok(PowerOptimum {
        rho_star,
        stationary_rho,
        clamped: rho_star != stationary_rho,
        display_unit: curve.display_unit(rho_star),
        rendering_unit: curve.rendering_unit(rho_star),
        display_watts: curve.display_watts(rho_star),
        rendering_watts: curve.rendering_watts(rho_star),
        total_watts: curve.total_watts(rho_star),
    })
}
