use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fit_curve, minimize_total_power, CurveSample, FitDiagnostics, IsoQualityCurve, PowerOptimum};
use crate::error::{Error, Result};
use crate::power::{DisplayModel, EnergyModel, PowerReport};
use crate::prune::{ControlRecord, ControllerConfig, IsoQualitySample, IsoQualitySampler};
use crate::quality::ssim;
use crate::raster::{Framebuffer, Rasterizer};
use crate::scene::{save_scene, CameraPose, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSettings {
    pub rho_plan: Vec<f64>,
    pub controller: ControllerConfig,
    pub display: DisplayModel,
    pub energy: EnergyModel,
}

impl Default for OptimizeSettings {
    fn default() -> Self {
        Self {
            rho_plan: vec![0.1, 0.3, 0.5, 0.7, 0.85],
            controller: ControllerConfig::default(),
            display: DisplayModel::default(),
            energy: EnergyModel::default(),
        }
    }
}

/// Serializable summary of one sampled model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: CurveSample,
    pub point_count: usize,
    pub iterations: usize,
    pub ssim: Option<f64>,
    pub trajectory: Vec<ControlRecord>,
    pub report: PowerReport,
}

/// Mean SSIM of `scene` against `refs` over the poses; `None` if a frame is too small.
pub fn mean_ssim(rasterizer: &Rasterizer, scene: &Scene, poses: &[CameraPose], refs: &[Framebuffer]) -> Option<f64> {
    let mut total = 0.0;
    for (pose, r) in poses.iter().zip(refs) {
        total += ssim(&rasterizer.render(scene, pose).framebuffer, r).ok()?;
    }
    Some(total / poses.len() as f64)
}

impl SampleRecord {
    fn new(s: &IsoQualitySample, sampler: &IsoQualitySampler<'_>) -> Self {
        Self {
            sample: CurveSample::from(s),
            point_count: s.scene.len(),
            iterations: s.iterations,
            ssim: mean_ssim(&sampler.rasterizer, &s.scene, sampler.poses, &sampler.references),
            trajectory: s.trajectory.clone(),
            report: s.report.clone(),
        }
    }
}

/// Everything a power-optimal run produced, minus the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub scene_id: String,
    pub dense_points: usize,
    pub q_min: f64,
    pub samples: Vec<SampleRecord>,
    /// Indices into `samples` used for the regression.
    pub fitted: Vec<usize>,
    pub curve: IsoQualityCurve,
    pub diagnostics: FitDiagnostics,
    pub optimum: PowerOptimum,
    /// Relative error of each fitted sample's total power predicted by a refit
    /// without it; `None` when the refit was impossible.
    pub leave_one_out: Vec<Option<f64>>,
    pub final_model: SampleRecord,
}

pub struct OptimizeOutcome {
    pub scene: Scene,
    pub report: OptimizeReport,
}

/// Per-sample resume files in a run directory.
#[derive(Debug, Clone)]
pub struct Checkpointer {
    dir: PathBuf,
    fingerprint: String,
    reuse: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    fingerprint: String,
    rho: f64,
    q_min: f64,
    record: SampleRecord,
}

impl Checkpointer {
    /// `fingerprint` identifies the inputs; checkpoints with a different one are ignored.
    pub fn new(dir: impl Into<PathBuf>, fingerprint: impl Into<String>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, fingerprint: fingerprint.into(), reuse: true })
    }

    /// With `false`, existing checkpoints are ignored (and overwritten).
    pub fn with_reuse(mut self, reuse: bool) -> Self {
        self.reuse = reuse;
        self
    }

    fn path(&self, tag: &str, index: usize, ext: &str) -> PathBuf {
        self.dir.join(format!("{tag}_sample_{index}.{ext}"))
    }

    pub fn load(&self, tag: &str, index: usize, rho: f64, q_min: f64) -> Result<Option<SampleRecord>> {
        let path = self.path(tag, index, "json");
        if !self.reuse || !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: CheckpointFile = match serde_json::from_str(&text) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("ignoring unreadable checkpoint {}: {e}", path.display());
                return Ok(None);
            }
        };
        if file.fingerprint != self.fingerprint || file.rho != rho || file.q_min != q_min {
            return Ok(None);
        }
        Ok(Some(file.record))
    }

    pub fn save(&self, tag: &str, index: usize, q_min: f64, record: &SampleRecord, scene: &Scene) -> Result<()> {
        save_scene(scene, self.path(tag, index, "ply"))?;
        let file = CheckpointFile {
            fingerprint: self.fingerprint.clone(),
            rho: record.sample.rho,
            q_min,
            record: record.clone(),
        };
        let path = self.path(tag, index, "json");
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Relative prediction errors of total power from leave-one-out refits.
pub fn leave_one_out_errors(samples: &[CurveSample]) -> Vec<Option<f64>> {
    (0..samples.len())
        .map(|i| {
            let rest: Vec<CurveSample> =
                samples.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| s.clone()).collect();
            let (curve, _) = fit_curve(&rest).ok()?;
            let measured = samples[i].total_watts();
            Some((curve.total_watts(samples[i].rho) - measured).abs() / measured)
        })
        .collect()
}

/// The regression of one set of curve samples and its optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    /// Indices of the samples used for the regression.
    pub fitted: Vec<usize>,
    pub curve: IsoQualityCurve,
    pub diagnostics: FitDiagnostics,
    pub optimum: PowerOptimum,
    /// Relative error of each fitted sample's total power predicted by a refit
    /// without it; `None` when the refit was impossible.
    pub leave_one_out: Vec<Option<f64>>,
}

/// Fits the samples not flagged unreachable and locates the power minimum.
pub fn fit_samples(samples: &[CurveSample], q_min: Option<f64>) -> Result<CurveFit> {
    let fitted: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].flags.unreachable).collect();
    let fit_set: Vec<CurveSample> = fitted.iter().map(|&i| samples[i].clone()).collect();
    let (mut curve, diagnostics) = fit_curve(&fit_set)?;
    curve.q_min = q_min;
    let optimum = minimize_total_power(&curve, curve.normalization.rho)?;
    Ok(CurveFit { fitted, curve, diagnostics, optimum, leave_one_out: leave_one_out_errors(&fit_set) })
}

fn sample_plan(
    sampler: &IsoQualitySampler<'_>,
    q_min: f64,
    rho_plan: &[f64],
    checkpoint: Option<(&Checkpointer, &str)>,
) -> Result<Vec<SampleRecord>> {
    let mut samples = Vec::with_capacity(rho_plan.len());
    for (i, &rho) in rho_plan.iter().enumerate() {
        if let Some((cp, tag)) = checkpoint {
            if let Some(rec) = cp.load(tag, i, rho, q_min)? {
                log::info!("rho {rho}: reusing checkpoint");
                samples.push(rec);
                continue;
            }
        }
        let s = sampler.sample(rho, q_min)?;
        log::info!(
            "rho {rho}: {:.3} dB, display {:.6} W, rendering {:.6} W, lambda {:.4}",
            s.quality_db,
            s.display_watts(),
            s.rendering_watts(),
            s.lambda_used
        );
        let rec = SampleRecord::new(&s, sampler);
        if let Some((cp, tag)) = checkpoint {
            cp.save(tag, i, q_min, &rec, &s.scene)?;
        }
        samples.push(rec);
    }
    Ok(samples)
}

/// Samples the iso-quality curve at each planned ratio. With a checkpointer, sample
/// records are stored as they complete and reused on the next call.
pub fn sample_curve(
    rasterizer: &Rasterizer,
    dense: &Scene,
    poses: &[CameraPose],
    q_min: f64,
    settings: &OptimizeSettings,
    checkpoint: Option<(&Checkpointer, &str)>,
) -> Result<Vec<SampleRecord>> {
    let sampler = IsoQualitySampler::new(
        rasterizer.clone(),
        dense,
        poses,
        settings.display,
        settings.energy,
        settings.controller.clone(),
    )?;
    sample_plan(&sampler, q_min, &settings.rho_plan, checkpoint)
}

/// Samples the iso-quality curve at each planned ratio, fits it, and produces the
/// model at the predicted power-minimal ratio.
///
/// Samples flagged unreachable are excluded from the fit.
pub fn build_power_optimal_model(
    rasterizer: &Rasterizer,
    dense: &Scene,
    poses: &[CameraPose],
    q_min: f64,
    settings: &OptimizeSettings,
    checkpoint: Option<(&Checkpointer, &str)>,
) -> Result<OptimizeOutcome> {
    if settings.rho_plan.len() < 3 {
        return Err(Error::Config("sampling plan needs at least 3 ratios".into()));
    }
    let sampler = IsoQualitySampler::new(
        rasterizer.clone(),
        dense,
        poses,
        settings.display,
        settings.energy,
        settings.controller.clone(),
    )?;
    let samples = sample_plan(&sampler, q_min, &settings.rho_plan, checkpoint)?;
    let curve_samples: Vec<CurveSample> = samples.iter().map(|r| r.sample.clone()).collect();
    let fit = fit_samples(&curve_samples, Some(q_min))?;
    let final_sample = sampler.sample(fit.optimum.rho_star, q_min)?;
    let final_model = SampleRecord::new(&final_sample, &sampler);
    let report = OptimizeReport {
        scene_id: dense.id.clone(),
        dense_points: dense.len(),
        q_min,
        samples,
        fitted: fit.fitted,
        curve: fit.curve,
        diagnostics: fit.diagnostics,
        leave_one_out: fit.leave_one_out,
        optimum: fit.optimum,
        final_model,
    };
    Ok(OptimizeOutcome { scene: final_sample.scene, report })
}

impl OptimizeReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
