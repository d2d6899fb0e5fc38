//! The commands behind the `splatpower` binary. Each reads a [`RunConfig`], writes
//! its artifacts under the output directory, and returns its report. Outputs depend
//! only on the configuration (including its seed); the thread count never changes
//! them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant, SCHEMA_VERSION};
use crate::curve::{
    build_power_optimal_model, fit_samples, mean_ssim, sample_curve, Checkpointer, CurveFit, CurveSample,
    OptimizeReport, OptimizeSettings, SampleRecord,
};
use crate::error::{Error, Result};
use crate::foveation::{build_cascade, render_foveated, CascadeReport, FoveationPlan};
use crate::plot::{chart, Mark, Series};
use crate::power::{evaluate_with, FramePower, PowerReport};
use crate::quality::{mean_psnr, ssim};
use crate::raster::{write_png, Framebuffer, Rasterizer};
use crate::scene::{save_scene, CameraPose, Scene};

pub const DEFAULT_OUTPUT_DIR: &str = "splatpower-out";

/// A configured invocation: resolved output directory and rasterizer.
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub rasterizer: Rasterizer,
    /// Reuse checkpoints left by an earlier run with the same configuration.
    pub resume: bool,
}

impl Run {
    /// `out` and `threads` override the config's values.
    pub fn new(config: RunConfig, out: Option<PathBuf>, threads: Option<usize>, resume: bool) -> Result<Self> {
        config.validate()?;
        let out = out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| DEFAULT_OUTPUT_DIR.into());
        let rasterizer = match threads.or(config.threads) {
            Some(n) => Rasterizer::with_threads(config.raster.clone(), n)?,
            None => Rasterizer::new(config.raster.clone()),
        };
        Ok(Self { config, out, rasterizer, resume })
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn inputs(&self) -> Result<(Scene, Vec<CameraPose>)> {
        let scene = self.config.load_scene()?;
        let poses = self.config.poses(&scene)?;
        Ok((scene, poses))
    }

    fn checkpointer(&self) -> Result<Checkpointer> {
        Ok(Checkpointer::new(self.out.join("checkpoints"), self.config.fingerprint()?)?.with_reuse(self.resume))
    }

    fn references(&self, dense: &Scene, poses: &[CameraPose]) -> Vec<Framebuffer> {
        poses.iter().map(|p| self.rasterizer.render(dense, p).framebuffer).collect()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One frame's power as a flat table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub pose: usize,
    pub display_watts: f64,
    pub rendering_watts: f64,
    pub total_watts: f64,
    pub flop_count: u64,
    pub sram_bytes: u64,
    pub dram_bytes: u64,
}

impl FrameRow {
    fn rows(report: &PowerReport) -> Vec<Self> {
        report
            .per_pose
            .iter()
            .enumerate()
            .map(|(pose, f)| Self {
                pose,
                display_watts: f.display_watts,
                rendering_watts: f.rendering_watts,
                total_watts: f.display_watts + f.rendering_watts,
                flop_count: f.counters.flop_count,
                sram_bytes: f.counters.sram_bytes,
                dram_bytes: f.counters.dram_bytes,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub schema_version: u32,
    pub scene_id: String,
    pub points: usize,
    /// Image files, relative to the report.
    pub images: Vec<String>,
    pub power: PowerReport,
}

/// Renders every pose of the configured scene to PNG with per-frame power.
pub fn cmd_render(run: &Run) -> Result<RenderReport> {
    let (scene, poses) = run.inputs()?;
    let dir = run.subdir("render")?;
    let settings = run.config.optimize_settings()?;
    let mut images = Vec::with_capacity(poses.len());
    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let out = run.rasterizer.render(&scene, pose);
        let name = format!("frame_{i:03}.png");
        write_png(&out.framebuffer, &dir.join(&name))?;
        images.push(name);
        frames.push(FramePower::new(&out.framebuffer, out.counters(), &settings.display, &settings.energy));
    }
    let report = RenderReport {
        schema_version: SCHEMA_VERSION,
        scene_id: scene.id.clone(),
        points: scene.len(),
        images,
        power: PowerReport::from_frames(frames)?,
    };
    write_json(&dir.join("report.json"), &report)?;
    write_csv(&dir.join("frames.csv"), &FrameRow::rows(&report.power))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSummary {
    pub schema_version: u32,
    pub scene_id: String,
    pub points: usize,
    pub power: PowerReport,
}

/// Power of the configured scene over the pose set, without images.
pub fn cmd_power(run: &Run) -> Result<PowerSummary> {
    let (scene, poses) = run.inputs()?;
    let settings = run.config.optimize_settings()?;
    let dir = run.subdir("power")?;
    let power = evaluate_with(&run.rasterizer, &scene, &poses, &settings.display, &settings.energy)?;
    let report = PowerSummary { schema_version: SCHEMA_VERSION, scene_id: scene.id.clone(), points: scene.len(), power };
    write_json(&dir.join("report.json"), &report)?;
    write_csv(&dir.join("frames.csv"), &FrameRow::rows(&report.power))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSamples {
    pub variant: Variant,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesReport {
    pub schema_version: u32,
    pub scene_id: String,
    pub dense_points: usize,
    pub variants: Vec<VariantSamples>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRow {
    variant: String,
    q_min: f64,
    rho: f64,
    points: usize,
    quality_db: f64,
    lambda: f64,
    iterations: usize,
    display_watts: f64,
    rendering_watts: f64,
    total_watts: f64,
    converged: bool,
    unreachable: bool,
}

fn sample_rows(variant: &Variant, samples: &[SampleRecord]) -> Vec<SampleRow> {
    samples
        .iter()
        .map(|r| SampleRow {
            variant: variant.name.clone(),
            q_min: variant.q_min,
            rho: r.sample.rho,
            points: r.point_count,
            quality_db: r.sample.quality_achieved,
            lambda: r.sample.lambda_used,
            iterations: r.iterations,
            display_watts: r.sample.display_watts,
            rendering_watts: r.sample.rendering_watts,
            total_watts: r.sample.total_watts(),
            converged: r.sample.flags.converged,
            unreachable: r.sample.flags.unreachable,
        })
        .collect()
}

/// Samples the iso-quality curve for every quality target.
pub fn cmd_sample_curve(run: &Run) -> Result<SamplesReport> {
    let (dense, poses) = run.inputs()?;
    let settings = run.config.optimize_settings()?;
    let dir = run.subdir("curve")?;
    let cp = run.checkpointer()?;
    let mut report = SamplesReport {
        schema_version: SCHEMA_VERSION,
        scene_id: dense.id.clone(),
        dense_points: dense.len(),
        variants: Vec::new(),
    };
    let mut rows = Vec::new();
    for v in run.config.variants() {
        let samples = sample_curve(&run.rasterizer, &dense, &poses, v.q_min, &settings, Some((&cp, &v.name)))?;
        rows.extend(sample_rows(&v, &samples));
        report.variants.push(VariantSamples { variant: v, samples });
        write_json(&dir.join("samples.json"), &report)?;
        write_csv(&dir.join("samples.csv"), &rows)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantFit {
    pub variant: Variant,
    pub fit: CurveFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub scene_id: String,
    pub variants: Vec<VariantFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CurveRow {
    rho: f64,
    display_watts: f64,
    rendering_watts: f64,
    total_watts: f64,
}

const CURVE_POINTS: usize = 101;

fn write_curve_artifacts(dir: &Path, name: &str, samples: &[CurveSample], fit: &CurveFit) -> Result<()> {
    let [lo, hi] = fit.curve.normalization.rho;
    let rows: Vec<CurveRow> = (0..CURVE_POINTS)
        .map(|i| {
            let rho = lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64;
            CurveRow {
                rho,
                display_watts: fit.curve.display_watts(rho),
                rendering_watts: fit.curve.rendering_watts(rho),
                total_watts: fit.curve.total_watts(rho),
            }
        })
        .collect();
    write_csv(&dir.join(format!("{name}_curve.csv")), &rows)?;
    let line = |f: fn(&CurveRow) -> f64| rows.iter().map(|r| [r.rho, f(r)]).collect();
    let measured = |f: fn(&CurveSample) -> f64| samples.iter().map(|s| [s.rho, f(s)]).collect();
    let svg = chart(
        &format!("Iso-quality power, variant {name}"),
        "pruning ratio",
        "power (W)",
        &[
            Series::new("total (fit)", line(|r| r.total_watts), Mark::Line, "black"),
            Series::new("total (measured)", measured(|s| s.total_watts()), Mark::Points, "black"),
            Series::new("display (fit)", line(|r| r.display_watts), Mark::Line, "#1f77b4"),
            Series::new("display (measured)", measured(|s| s.display_watts), Mark::Points, "#1f77b4"),
            Series::new("rendering (fit)", line(|r| r.rendering_watts), Mark::Line, "#d62728"),
            Series::new("rendering (measured)", measured(|s| s.rendering_watts), Mark::Points, "#d62728"),
            Series::new(
                "optimum",
                vec![[fit.optimum.rho_star, fit.optimum.total_watts]],
                Mark::Highlight,
                "#2ca02c",
            ),
        ],
    );
    write_text(&dir.join(format!("{name}_curve.svg")), &svg)
}

/// Fits the samples written by [`cmd_sample_curve`] and locates each optimum.
pub fn cmd_fit(run: &Run) -> Result<FitReport> {
    let dir = run.out.join("curve");
    let samples: SamplesReport = read_json(&dir.join("samples.json"))?;
    let mut report = FitReport { schema_version: SCHEMA_VERSION, scene_id: samples.scene_id.clone(), variants: Vec::new() };
    for vs in &samples.variants {
        let curve_samples: Vec<CurveSample> = vs.samples.iter().map(|r| r.sample.clone()).collect();
        let fit = fit_samples(&curve_samples, Some(vs.variant.q_min))?;
        write_curve_artifacts(&dir, &vs.variant.name, &curve_samples, &fit)?;
        report.variants.push(VariantFit { variant: vs.variant.clone(), fit });
    }
    write_json(&dir.join("fit.json"), &report)?;
    Ok(report)
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    /// `dense`, `single` or `foveated`.
    pub model: String,
    /// Points in the model; for foveated rows, summed over the region models.
    pub points: usize,
    pub ssim: f64,
    pub psnr_db: f64,
    pub display_watts: f64,
    pub rendering_watts: f64,
    pub total_watts: f64,
}

fn mean_ssim_frames(frames: &[Framebuffer], refs: &[Framebuffer]) -> f64 {
    let vals: Option<Vec<f64>> = frames.iter().zip(refs).map(|(f, r)| ssim(f, r).ok()).collect();
    vals.map_or(f64::NAN, |v| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoveatedResult {
    pub cascade: CascadeReport,
    pub power: PowerReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub optimize: OptimizeReport,
    pub foveated: Option<FoveatedResult>,
    /// Model files, relative to the report.
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub fingerprint: String,
    pub seed: u64,
    pub scene_id: String,
    pub dense: SummaryRow,
    pub variants: Vec<VariantReport>,
    pub summary: Vec<SummaryRow>,
}

/// Fixed-width text rendering of the summary table.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<12} {:<9} {:>8} {:>7} {:>10} {:>12} {:>12} {:>12}\n",
        "variant", "model", "points", "SSIM", "PSNR (dB)", "display W", "rendering W", "total W"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:<9} {:>8} {:>7.4} {:>10.3} {:>12.6} {:>12.6} {:>12.6}\n",
            r.variant, r.model, r.points, r.ssim, r.psnr_db, r.display_watts, r.rendering_watts, r.total_watts
        ));
    }
    s
}

fn optimize_into(run: &Run, dir_name: &str, plan: Option<&FoveationPlan>) -> Result<RunReport> {
    let (dense, poses) = run.inputs()?;
    let settings: OptimizeSettings = run.config.optimize_settings()?;
    let dir = run.subdir(dir_name)?;
    let cp = run.checkpointer()?;
    let refs = run.references(&dense, &poses);
    let r = &run.rasterizer;

    let dense_power = evaluate_with(r, &dense, &poses, &settings.display, &settings.energy)?;
    let dense_row = SummaryRow {
        variant: "dense".into(),
        model: "dense".into(),
        points: dense.len(),
        ssim: mean_ssim_frames(&refs, &refs),
        psnr_db: mean_psnr(&refs, &refs)?,
        display_watts: dense_power.display_watts,
        rendering_watts: dense_power.rendering_watts,
        total_watts: dense_power.total_watts,
    };
    let mut report = RunReport {
        schema_version: SCHEMA_VERSION,
        fingerprint: run.config.fingerprint()?,
        seed: run.config.seed,
        scene_id: dense.id.clone(),
        dense: dense_row,
        variants: Vec::new(),
        summary: Vec::new(),
    };

    for v in run.config.variants() {
        let tag = v.name.clone();
        let (optimize, scene, foveated, models) = match plan {
            None => {
                let out = build_power_optimal_model(r, &dense, &poses, v.q_min, &settings, Some((&cp, &tag)))?;
                let file = format!("{}.ply", v.name);
                save_scene(&out.scene, dir.join(&file))?;
                (out.report, out.scene, None, vec![file])
            }
            Some(plan) => {
                let c = build_cascade(r, &dense, &poses, plan, v.q_min, &settings, Some((&cp, &tag)))?;
                let mut files = Vec::new();
                for (k, m) in c.models.iter().enumerate() {
                    let file = format!("{}_r{}.ply", v.name, k + 1);
                    save_scene(m, dir.join(&file))?;
                    files.push(file);
                }
                let mut frames = Vec::with_capacity(poses.len());
                let mut composites = Vec::with_capacity(poses.len());
                for (i, pose) in poses.iter().enumerate() {
                    let f = render_foveated(r, &c.models, &c.layout, pose)?;
                    frames.push(FramePower::new(&f.framebuffer, f.counters, &settings.display, &settings.energy));
                    if dir_name == "foveate" {
                        write_png(&f.framebuffer, &dir.join(format!("{}_composite_{i:03}.png", v.name)))?;
                    }
                    composites.push(f.framebuffer);
                }
                let power = PowerReport::from_frames(frames)?;
                report.summary.push(SummaryRow {
                    variant: v.name.clone(),
                    model: "foveated".into(),
                    points: c.models.iter().map(Scene::len).sum(),
                    ssim: mean_ssim_frames(&composites, &refs),
                    psnr_db: mean_psnr(&composites, &refs)?,
                    display_watts: power.display_watts,
                    rendering_watts: power.rendering_watts,
                    total_watts: power.total_watts,
                });
                let primary = c.report.primary.clone();
                let scene = c.models.into_iter().next().expect("region 1");
                (primary, scene, Some(FoveatedResult { cascade: c.report, power }), files)
            }
        };
        let samples: Vec<CurveSample> = optimize.samples.iter().map(|s| s.sample.clone()).collect();
        let fit = CurveFit {
            fitted: optimize.fitted.clone(),
            curve: optimize.curve.clone(),
            diagnostics: optimize.diagnostics,
            optimum: optimize.optimum,
            leave_one_out: optimize.leave_one_out.clone(),
        };
        write_curve_artifacts(&dir, &v.name, &samples, &fit)?;
        let fm = &optimize.final_model;
        let frames: Vec<Framebuffer> = poses.iter().map(|p| r.render(&scene, p).framebuffer).collect();
        let single = SummaryRow {
            variant: v.name.clone(),
            model: "single".into(),
            points: scene.len(),
            ssim: fm.ssim.unwrap_or_else(|| mean_ssim(r, &scene, &poses, &refs).unwrap_or(f64::NAN)),
            psnr_db: mean_psnr(&frames, &refs)?,
            display_watts: fm.sample.display_watts,
            rendering_watts: fm.sample.rendering_watts,
            total_watts: fm.sample.total_watts(),
        };
        let at = report.summary.len() - usize::from(foveated.is_some());
        report.summary.insert(at, single);
        let vr = VariantReport { variant: v.clone(), optimize, foveated, models };
        write_json(&dir.join(format!("{}.json", v.name)), &vr)?;
        report.variants.push(vr);
    }

    write_json(&dir.join("report.json"), &report)?;
    let mut rows = vec![report.dense.clone()];
    rows.extend(report.summary.iter().cloned());
    write_csv(&dir.join("summary.csv"), &rows)?;
    write_text(&dir.join("summary.txt"), &format_summary(&rows))?;
    Ok(report)
}

/// Produces the power-optimal model for every quality target, or a foveated
/// cascade when the configuration has a foveation plan.
pub fn cmd_optimize(run: &Run) -> Result<RunReport> {
    optimize_into(run, "optimize", run.config.foveation.as_ref())
}

/// Builds foveated cascades with the configured plan, or the default one.
pub fn cmd_foveate(run: &Run) -> Result<RunReport> {
    let plan = run.config.foveation.clone().unwrap_or_default();
    optimize_into(run, "foveate", Some(&plan))
}

/// One model variant in the consolidated report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Command directory the row comes from.
    pub source: String,
    pub variant: String,
    pub model: String,
    pub points: usize,
    pub ssim: f64,
    pub psnr_db: f64,
    pub display_watts: f64,
    pub rendering_watts: f64,
    pub total_watts: f64,
    /// Not dominated in (higher PSNR, lower total power) by any other row.
    pub pareto: bool,
}

/// Whether `a` is at least as good as `b` in both quality and power, and better in one.
pub fn dominates(a: &ReportRow, b: &ReportRow) -> bool {
    a.psnr_db >= b.psnr_db
        && a.total_watts <= b.total_watts
        && (a.psnr_db > b.psnr_db || a.total_watts < b.total_watts)
}

/// Flags every row that no other row dominates.
pub fn mark_pareto(rows: &mut [ReportRow]) {
    let flags: Vec<bool> = (0..rows.len())
        .map(|i| !(0..rows.len()).any(|j| j != i && dominates(&rows[j], &rows[i])))
        .collect();
    for (r, f) in rows.iter_mut().zip(flags) {
        r.pareto = f;
    }
}

/// Consolidates the reports of a run directory into one CSV and a quality-versus-power
/// scatter plot.
pub fn cmd_report(run_dir: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut found = false;
    for source in ["optimize", "foveate"] {
        let path = run_dir.join(source).join("report.json");
        if !path.exists() {
            continue;
        }
        found = true;
        let report: RunReport = read_json(&path)?;
        rows.extend(report.summary.into_iter().map(|s| ReportRow {
            source: source.into(),
            variant: s.variant,
            model: s.model,
            points: s.points,
            ssim: s.ssim,
            psnr_db: s.psnr_db,
            display_watts: s.display_watts,
            rendering_watts: s.rendering_watts,
            total_watts: s.total_watts,
            pareto: false,
        }));
    }
    if !found {
        return Err(Error::io(
            run_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no optimize or foveate report in run directory"),
        ));
    }
    mark_pareto(&mut rows);
    let dir = run_dir.join("report");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_csv(&dir.join("report.csv"), &rows)?;
    let pick = |p: bool| rows.iter().filter(|r| r.pareto == p).map(|r| [r.total_watts, r.psnr_db]).collect();
    let svg = chart(
        "Quality versus total power",
        "total power (W)",
        "PSNR (dB)",
        &[
            Series::new("dominated", pick(false), Mark::Points, "#7f7f7f"),
            Series::new("Pareto front", pick(true), Mark::Highlight, "#ff7f0e"),
        ],
    );
    write_text(&dir.join("scatter.svg"), &svg)?;
    Ok(rows)
}
