use super::Framebuffer;

/// One term of a pixel's blend: source point and its weight `alpha * T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendEntry {
    pub point: u32,
    pub weight: f64,
}

/// Every blend weight of one rendered frame, stored row-per-pixel (CSR).
///
/// Alphas and transmittances do not depend on point colors, so a frame can be
/// re-composed for new colors without re-rasterizing. Composition accumulates in the
/// same order as the rasterizer and reproduces its output bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights {
    pub width: usize,
    pub height: usize,
    offsets: Vec<usize>,
    entries: Vec<BlendEntry>,
}

impl BlendWeights {
    /// Builds from `(pixel index, entries)` rows in any order; missing pixels are empty.
    pub fn from_rows(width: usize, height: usize, rows: Vec<(u32, Vec<BlendEntry>)>) -> Self {
        let n = width * height;
        let mut slots: Vec<Vec<BlendEntry>> = vec![Vec::new(); n];
        for (pixel, entries) in rows {
            slots[pixel as usize] = entries;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut entries = Vec::with_capacity(slots.iter().map(Vec::len).sum());
        for row in slots {
            entries.extend(row);
            offsets.push(entries.len());
        }
        Self { width, height, offsets, entries }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn row(&self, pixel: usize) -> &[BlendEntry] {
        &self.entries[self.offsets[pixel]..self.offsets[pixel + 1]]
    }

    /// Frame for per-point colors (indexed by scene point, already clamped to `[0, 1]`).
    pub fn compose(&self, colors: &[[f64; 3]]) -> Framebuffer {
        let data = (0..self.pixel_count())
            .map(|p| {
                let mut acc = [0.0f64; 3];
                for e in self.row(p) {
                    let c = &colors[e.point as usize];
                    for k in 0..3 {
                        acc[k] += e.weight * c[k];
                    }
                }
                acc
            })
            .collect();
        Framebuffer::from_raw(self.width, self.height, data).expect("finite composition")
    }

    /// Adjoint of [`compose`](Self::compose): per-point gradients for a per-pixel upstream.
    pub fn backprop(&self, upstream: &[[f64; 3]], n_points: usize) -> Vec<[f64; 3]> {
        let mut grad = vec![[0.0f64; 3]; n_points];
        self.backprop_into(upstream, &mut grad);
        grad
    }

    /// Accumulates into `grad` (which is not cleared).
    pub fn backprop_into(&self, upstream: &[[f64; 3]], grad: &mut [[f64; 3]]) {
        for (p, up) in upstream.iter().enumerate().take(self.pixel_count()) {
            if *up == [0.0; 3] {
                continue;
            }
            for e in self.row(p) {
                let g = &mut grad[e.point as usize];
                for k in 0..3 {
                    g[k] += e.weight * up[k];
                }
            }
        }
    }

    /// Sum of weights per point over the frame.
    pub fn point_totals(&self, n_points: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_points];
        self.add_point_totals(&mut out);
        out
    }

    pub fn add_point_totals(&self, out: &mut [f64]) {
        for e in &self.entries {
            out[e.point as usize] += e.weight;
        }
    }

    /// Sum of weights per pixel, i.e. `1 - T_final` (before early termination effects).
    pub fn pixel_totals(&self) -> Vec<f64> {
        (0..self.pixel_count()).map(|p| self.row(p).iter().map(|e| e.weight).sum()).collect()
    }
}
