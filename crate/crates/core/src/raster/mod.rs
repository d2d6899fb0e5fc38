//! Deterministic tile-based CPU splat renderer with operation counting.
//!
//! Frames are rendered in three stages: projection of every point, binning of the
//! projected footprints into 16x16 tiles with a per-tile depth sort, and
//! front-to-back alpha blending of every tile. Tiles are processed in parallel and
//! merged in tile order, so output does not depend on the worker count.
//!
//! Alongside the image, each frame yields [`OpCounters`] for the power model:
//!
//! * projection: `flops_per_projection` FLOPs and `point_dram_bytes` of DRAM traffic
//!   per visible point (a point is visible when its footprint covers at least one
//!   pixel center of a rendered tile);
//! * sorting: `n * ceil(log2 n)` FLOP-equivalents for a tile list of length `n`;
//! * blending: every listed point is evaluated at every pixel of its tile, costing
//!   `flops_per_blend` FLOPs and `pixel_state_sram_bytes` of SRAM each;
//! * each point's attribute block costs `point_tile_sram_bytes` of SRAM per tile;
//! * every rendered pixel is written out with `pixel_writeout_dram_bytes` of DRAM.

mod export;
mod project;
mod weights;

pub use export::{read_raw_f32, write_png, write_raw_f32};
pub use project::{project_points, ProjectedSplat, Projection, FOOTPRINT_CUTOFF_SQ};
pub use weights::{BlendEntry, BlendWeights};

use std::ops::{Add, AddAssign};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{CameraPose, Scene};

/// Per-stage cost constants of the counting model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CountingModel {
    /// Transform, quaternion-to-matrix, 3D and 2D covariance, inverse and bounds.
    pub flops_per_projection: u64,
    /// Offset, quadratic form, exponential, alpha, weighted color and transmittance update.
    pub flops_per_blend: u64,
    /// Multiplier on the `n * ceil(log2 n)` sort cost.
    pub sort_flops_per_compare: u64,
    /// 2D mean, conic, opacity, color and depth as float32.
    pub point_tile_sram_bytes: u64,
    /// Running RGB and transmittance as float32.
    pub pixel_state_sram_bytes: u64,
    /// Position, scale, rotation, opacity and color as float32.
    pub point_dram_bytes: u64,
    /// 8-bit RGB.
    pub pixel_writeout_dram_bytes: u64,
}

impl Default for CountingModel {
    fn default() -> Self {
        Self {
            flops_per_projection: 180,
            flops_per_blend: 24,
            sort_flops_per_compare: 1,
            point_tile_sram_bytes: 40,
            pixel_state_sram_bytes: 16,
            point_dram_bytes: 56,
            pixel_writeout_dram_bytes: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterSettings {
    pub tile_size: usize,
    /// Added to the diagonal of every screen-space covariance (square pixels).
    pub cov_floor: f64,
    pub near_plane: f64,
    /// Blending stops once a pixel's transmittance drops below this value.
    pub transmittance_cutoff: f64,
    pub counting: CountingModel,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            cov_floor: 1e-7,
            near_plane: 0.01,
            transmittance_cutoff: 1e-4,
            counting: CountingModel::default(),
        }
    }
}

/// Floating-point, SRAM and DRAM work of a frame (or part of one).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub flop_count: u64,
    pub sram_bytes: u64,
    pub dram_bytes: u64,
}

impl Add for OpCounters {
    type Output = OpCounters;
    fn add(self, rhs: Self) -> Self {
        OpCounters {
            flop_count: self.flop_count + rhs.flop_count,
            sram_bytes: self.sram_bytes + rhs.sram_bytes,
            dram_bytes: self.dram_bytes + rhs.dram_bytes,
        }
    }
}

impl AddAssign for OpCounters {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for OpCounters {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(OpCounters::default(), Add::add)
    }
}

/// Counters split by stage, plus a few raw tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderStats {
    /// Sorting, blending, per-tile SRAM and framebuffer writeout; additive over tiles.
    pub tile_stage: OpCounters,
    /// Projection and attribute fetch of visible points.
    pub point_stage: OpCounters,
    pub visible_points: u64,
    pub tile_pairs: u64,
    pub blend_events: u64,
    pub blend_flops: u64,
    pub rendered_tiles: u64,
}

impl RenderStats {
    pub fn counters(&self) -> OpCounters {
        self.tile_stage + self.point_stage
    }
}

/// Tiling of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, tile_size: usize) -> Self {
        Self {
            width,
            height,
            tile_size,
            tiles_x: width.div_ceil(tile_size),
            tiles_y: height.div_ceil(tile_size),
        }
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Half-open pixel rectangle `(x0, y0, x1, y1)` of a tile.
    pub fn tile_rect(&self, tile: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(self.width), (y0 + self.tile_size).min(self.height))
    }

    pub fn tile_of_pixel(&self, x: usize, y: usize) -> usize {
        (y / self.tile_size) * self.tiles_x + x / self.tile_size
    }
}

/// Subset of tiles to render, optionally narrowed to individual pixels; everything
/// else is skipped and left black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileMask {
    bits: Vec<bool>,
    pixels: Option<Vec<bool>>,
}

impl TileMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits, pixels: None }
    }

    pub fn full(grid: &TileGrid) -> Self {
        Self::new(vec![true; grid.tile_count()])
    }

    /// Renders exactly the pixels set in the row-major `pixels`.
    pub fn from_pixel_mask(grid: &TileGrid, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != grid.width * grid.height {
            return Err(Error::Invalid("pixel mask does not match the tile grid".into()));
        }
        let mut mask = Self::from_pixels(grid, |x, y| pixels[y * grid.width + x]);
        mask.pixels = Some(pixels);
        Ok(mask)
    }

    /// Whether pixel `index` (row-major) is rendered inside an active tile.
    pub fn contains_pixel(&self, index: usize) -> bool {
        self.pixels.as_ref().is_none_or(|p| p[index])
    }

    /// Tiles containing at least one pixel for which `pixel(x, y)` holds.
    pub fn from_pixels(grid: &TileGrid, pixel: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..grid.tile_count())
            .map(|t| {
                let (x0, y0, x1, y1) = grid.tile_rect(t);
                (y0..y1).any(|y| (x0..x1).any(|x| pixel(x, y)))
            })
            .collect();
        Self::new(bits)
    }

    pub fn contains(&self, tile: usize) -> bool {
        self.bits.get(tile).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Linear RGB image. Stored values are the raw blend results; reads clamp to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Framebuffer {
    pub width: usize,
    pub height: usize,
    data: Vec<[f64; 3]>,
}

impl Framebuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Invalid(format!(
                "framebuffer data length {} for {width}x{height}",
                data.len()
            )));
        }
        if !data.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Invalid("framebuffer contains non-finite values".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self { width, height, data: vec![rgb; width * height] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x].map(|v| v.clamp(0.0, 1.0))
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        self.data[y * self.width + x] = rgb;
    }

    /// Clamped pixels in row-major order.
    pub fn pixels(&self) -> impl ExactSizeIterator<Item = [f64; 3]> + '_ {
        self.data.iter().map(|p| p.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn raw(&self) -> &[[f64; 3]] {
        &self.data
    }

    /// Per-channel means over pixels where `mask` holds; zeros for an empty mask.
    pub fn channel_means_masked(&self, mask: Option<&[bool]>) -> [f64; 3] {
        let Some(mask) = mask else { return self.channel_means() };
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for (p, &m) in self.pixels().zip(mask) {
            if m {
                for c in 0..3 {
                    sum[c] += p[c];
                }
                n += 1;
            }
        }
        if n == 0 {
            return [0.0; 3];
        }
        sum.map(|s| s / n as f64)
    }

    /// Per-channel means of the clamped image.
    pub fn channel_means(&self) -> [f64; 3] {
        if self.data.is_empty() {
            return [0.0; 3];
        }
        let mut sum = [0.0; 3];
        for p in self.pixels() {
            for c in 0..3 {
                sum[c] += p[c];
            }
        }
        sum.map(|s| s / self.data.len() as f64)
    }
}

/// Image plus counters of one rendered frame.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub framebuffer: Framebuffer,
    pub stats: RenderStats,
}

impl RenderOutput {
    pub fn counters(&self) -> OpCounters {
        self.stats.counters()
    }
}

struct TileOutput {
    colors: Vec<[f64; 3]>,
    counters: OpCounters,
    blend_events: u64,
    blend_flops: u64,
    pairs: u64,
    weights: Vec<(u32, Vec<BlendEntry>)>,
}

fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros() as u64
    }
}

/// The renderer. Cloning is cheap; the worker pool is shared.
#[derive(Clone)]
pub struct Rasterizer {
    settings: RasterSettings,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Rasterizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rasterizer")
            .field("settings", &self.settings)
            .field("threads", &self.pool.as_ref().map(|p| p.current_num_threads()))
            .finish()
    }
}

impl Default for Rasterizer {
    fn default() -> Self {
        Self::new(RasterSettings::default())
    }
}

impl Rasterizer {
    /// Uses the global rayon pool.
    pub fn new(settings: RasterSettings) -> Self {
        Self { settings, pool: None }
    }

    /// Uses a dedicated pool of `threads` workers.
    pub fn with_threads(settings: RasterSettings, threads: usize) -> Result<Self> {
        if settings.tile_size == 0 {
            return Err(Error::Config("tile size must be positive".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self { settings, pool: Some(Arc::new(pool)) })
    }

    pub fn settings(&self) -> &RasterSettings {
        &self.settings
    }

    pub fn grid(&self, pose: &CameraPose) -> TileGrid {
        TileGrid::new(pose.width, pose.height, self.settings.tile_size)
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    pub fn project(&self, scene: &Scene, pose: &CameraPose, mask: Option<&TileMask>) -> Projection {
        self.install(|| project_points(scene, pose, &self.settings, mask))
    }

    /// Per-tile `(depth, scene index)`-sorted lists of splat slots.
    pub fn bin_tiles(&self, projection: &Projection) -> Vec<Vec<u32>> {
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); projection.grid.tile_count()];
        for (slot, s) in projection.splats.iter().enumerate() {
            for &t in &s.tiles {
                lists[t as usize].push(slot as u32);
            }
        }
        let splats = &projection.splats;
        self.install(|| {
            lists.par_iter_mut().for_each(|list| {
                list.sort_by(|&a, &b| {
                    let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
                    sa.depth.total_cmp(&sb.depth).then(sa.index.cmp(&sb.index))
                })
            })
        });
        lists
    }

    fn render_tile(
        &self,
        projection: &Projection,
        tile: usize,
        list: &[u32],
        mask: Option<&TileMask>,
        capture: bool,
    ) -> TileOutput {
        let grid = &projection.grid;
        let counting = &self.settings.counting;
        let (x0, y0, x1, y1) = grid.tile_rect(tile);
        let n = list.len() as u64;

        let mut colors = Vec::with_capacity((x1 - x0) * (y1 - y0));
        let mut weights = Vec::new();
        let mut n_pixels = 0u64;
        let cutoff = self.settings.transmittance_cutoff;
        for py in y0..y1 {
            for px in x0..x1 {
                if mask.is_some_and(|m| !m.contains_pixel(py * grid.width + px)) {
                    colors.push([0.0; 3]);
                    continue;
                }
                n_pixels += 1;
                let mut t = 1.0f64;
                let mut acc = [0.0f64; 3];
                let mut entries = Vec::new();
                for &slot in list {
                    let s = &projection.splats[slot as usize];
                    let Some(alpha) = s.alpha_at(px, py) else { continue };
                    let w = alpha * t;
                    for c in 0..3 {
                        acc[c] += w * s.color[c];
                    }
                    if capture {
                        entries.push(BlendEntry { point: s.index as u32, weight: w });
                    }
                    t *= 1.0 - alpha;
                    if t < cutoff {
                        break;
                    }
                }
                colors.push(acc);
                if capture {
                    weights.push(((py * grid.width + px) as u32, entries));
                }
            }
        }

        let blend_events = n * n_pixels;
        let blend_flops = blend_events * counting.flops_per_blend;
        let sort_flops = n * ceil_log2(n) * counting.sort_flops_per_compare;
        let counters = OpCounters {
            flop_count: sort_flops + blend_flops,
            sram_bytes: n * counting.point_tile_sram_bytes
                + blend_events * counting.pixel_state_sram_bytes,
            dram_bytes: n_pixels * counting.pixel_writeout_dram_bytes,
        };
        TileOutput { colors, counters, blend_events, blend_flops, pairs: n, weights }
    }

    fn run(
        &self,
        scene: &Scene,
        pose: &CameraPose,
        mask: Option<&TileMask>,
        capture: bool,
    ) -> (Framebuffer, RenderStats, Option<BlendWeights>) {
        let projection = self.project(scene, pose, mask);
        let lists = self.bin_tiles(&projection);
        let grid = projection.grid;
        let active: Vec<usize> = (0..grid.tile_count())
            .filter(|&t| mask.is_none_or(|m| m.contains(t)))
            .collect();
        let outputs: Vec<TileOutput> = self.install(|| {
            active
                .par_iter()
                .map(|&t| self.render_tile(&projection, t, &lists[t], mask, capture))
                .collect()
        });

        let counting = &self.settings.counting;
        let visible = projection.splats.len() as u64;
        let mut stats = RenderStats {
            point_stage: OpCounters {
                flop_count: visible * counting.flops_per_projection,
                sram_bytes: 0,
                dram_bytes: visible * counting.point_dram_bytes,
            },
            visible_points: visible,
            rendered_tiles: active.len() as u64,
            ..RenderStats::default()
        };
        let mut fb = Framebuffer::new(pose.width, pose.height);
        let mut captured = Vec::new();
        for (&t, out) in active.iter().zip(outputs) {
            stats.tile_stage += out.counters;
            stats.blend_events += out.blend_events;
            stats.blend_flops += out.blend_flops;
            stats.tile_pairs += out.pairs;
            let (x0, y0, x1, _) = grid.tile_rect(t);
            let w = x1 - x0;
            for (i, rgb) in out.colors.into_iter().enumerate() {
                fb.set(x0 + i % w, y0 + i / w, rgb);
            }
            captured.extend(out.weights);
        }
        let weights = capture.then(|| BlendWeights::from_rows(pose.width, pose.height, captured));
        (fb, stats, weights)
    }

    /// Renders the full frame.
    pub fn render(&self, scene: &Scene, pose: &CameraPose) -> RenderOutput {
        self.render_masked(scene, pose, None)
    }

    /// Renders only the tiles (and pixels) in `mask`; counters cover only the work
    /// performed.
    pub fn render_masked(
        &self,
        scene: &Scene,
        pose: &CameraPose,
        mask: Option<&TileMask>,
    ) -> RenderOutput {
        let (framebuffer, stats, _) = self.run(scene, pose, mask, false);
        RenderOutput { framebuffer, stats }
    }

    /// Renders and records every blend weight `alpha_i * T_i`.
    pub fn render_with_weights(
        &self,
        scene: &Scene,
        pose: &CameraPose,
        mask: Option<&TileMask>,
    ) -> (RenderOutput, BlendWeights) {
        let (framebuffer, stats, weights) = self.run(scene, pose, mask, true);
        (RenderOutput { framebuffer, stats }, weights.expect("weights captured"))
    }

    /// Gradient of `sum_pixels <upstream, pixel color>` with respect to each point's
    /// shaded color; zero for points that never contribute.
    pub fn color_gradients(
        &self,
        scene: &Scene,
        pose: &CameraPose,
        upstream: &[[f64; 3]],
    ) -> Result<Vec<[f64; 3]>> {
        if upstream.len() != pose.pixel_count() {
            return Err(Error::DimensionMismatch(upstream.len(), 1, pose.width, pose.height));
        }
        let (_, weights) = self.render_with_weights(scene, pose, None);
        Ok(weights.backprop(upstream, scene.len()))
    }
}

/// Renders one frame with default settings.
pub fn rasterize(scene: &Scene, pose: &CameraPose) -> (Framebuffer, OpCounters) {
    let out = Rasterizer::default().render(scene, pose);
    let counters = out.counters();
    (out.framebuffer, counters)
}

/// Per-point color gradients for an upstream per-pixel gradient, default settings.
pub fn render_gradient_colors(
    scene: &Scene,
    pose: &CameraPose,
    upstream: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    Rasterizer::default().color_gradients(scene, pose, upstream)
}
