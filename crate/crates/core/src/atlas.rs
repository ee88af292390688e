//! The shared texture atlas: back-projection of view grids into texels,
//! weighted multi-view aggregation, nearest-seed (Voronoi) filling and PNG
//! export.
//!
//! Texel `(i, j)` covers `u ∈ [i/W, (i+1)/W)` and `v ∈ (1 − (j+1)/H, 1 − j/H]`:
//! row 0 is the top of the image (`v = 1`), matching the exported PNG.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Mesh;
use crate::grid::Grid;
use crate::imageio::{self, ImageError};
use crate::raster::RasterFrame;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("atlas has no valid texels to fill from")]
    NoSeeds,
    #[error("expected {expected} channels, atlas has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Texel index `(i, j)` addressed by `uv`: nearest texel center, clamped.
pub fn texel_of_uv(uv: [f64; 2], width: usize, height: usize) -> (usize, usize) {
    let i = (uv[0] * width as f64 - 0.5).round();
    let j = ((1.0 - uv[1]) * height as f64 - 0.5).round();
    (
        i.clamp(0.0, (width - 1) as f64) as usize,
        j.clamp(0.0, (height - 1) as f64) as usize,
    )
}

/// UV coordinate of texel `(i, j)`'s center.
pub fn texel_center_uv(i: usize, j: usize, width: usize, height: usize) -> [f64; 2] {
    [(i as f64 + 0.5) / width as f64, 1.0 - (j as f64 + 0.5) / height as f64]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureAtlas {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
    weight: Vec<f64>,
    valid: Vec<bool>,
    chart_mask: Vec<bool>,
}

/// Per-view contributions to atlas texels: `(texel, value, weight)` triples
/// stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct TexelScatter {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub texels: Vec<usize>,
    pub weights: Vec<f64>,
    /// `texels.len() × channels` values.
    pub values: Vec<f64>,
}

impl TexelScatter {
    pub fn len(&self) -> usize {
        self.texels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texels.is_empty()
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.channels..(k + 1) * self.channels]
    }
}

/// Counts reported by [`TextureAtlas::voronoi_fill`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillStats {
    pub seeds: usize,
    pub filled: usize,
}

impl TextureAtlas {
    /// Empty atlas with no chart texels.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            channels,
            values: vec![0.0; n * channels],
            weight: vec![0.0; n],
            valid: vec![false; n],
            chart_mask: vec![false; n],
        }
    }

    /// Empty atlas whose chart covers every texel.
    pub fn full_chart(width: usize, height: usize, channels: usize) -> Self {
        let mut a = Self::new(width, height, channels);
        a.chart_mask.fill(true);
        a
    }

    /// Empty atlas whose chart mask marks every texel overlapped by some UV
    /// triangle of `mesh` (conservative, so any UV inside a triangle addresses
    /// a chart texel).
    pub fn for_mesh(mesh: &Mesh, width: usize, height: usize, channels: usize) -> Self {
        let mut a = Self::new(width, height, channels);
        for f in 0..mesh.faces.len() {
            let tri = mesh
                .triangle_uvs(f)
                .map(|uv| [uv[0] * width as f64, (1.0 - uv[1]) * height as f64]);
            mark_overlapped_texels(&tri, width, height, &mut a.chart_mask);
        }
        a
    }

    /// Fully valid atlas holding `grid` (weight 1 everywhere).
    pub fn from_grid(grid: &Grid) -> Self {
        let n = grid.pixel_count();
        Self {
            width: grid.width(),
            height: grid.height(),
            channels: grid.channels(),
            values: grid.as_slice().to_vec(),
            weight: vec![1.0; n],
            valid: vec![true; n],
            chart_mask: vec![true; n],
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, AtlasError> {
        let bytes = imageio::read_file(path)?;
        Ok(Self::from_grid(&imageio::decode_rgb(&bytes)?))
    }

    /// Same dimensions and chart, no contributions.
    pub fn cleared(&self) -> Self {
        Self {
            chart_mask: self.chart_mask.clone(),
            ..Self::new(self.width, self.height, self.channels)
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn texel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn value(&self, texel: usize) -> &[f64] {
        &self.values[texel * self.channels..(texel + 1) * self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn chart_mask(&self) -> &[bool] {
        &self.chart_mask
    }

    pub fn set_chart_mask(&mut self, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.texel_count());
        self.chart_mask = mask;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn chart_count(&self) -> usize {
        self.chart_mask.iter().filter(|&&v| v).count()
    }

    /// Fraction of chart texels that are valid.
    pub fn chart_coverage(&self) -> f64 {
        let chart = self.chart_count();
        if chart == 0 {
            return 0.0;
        }
        let covered = self
            .chart_mask
            .iter()
            .zip(&self.valid)
            .filter(|(c, v)| **c && **v)
            .count();
        covered as f64 / chart as f64
    }

    pub fn texel_of_uv(&self, uv: [f64; 2]) -> usize {
        let (i, j) = texel_of_uv(uv, self.width, self.height);
        j * self.width + i
    }

    /// Values as a grid (invalid texels keep whatever value they hold, 0 for
    /// a fresh atlas).
    pub fn to_grid(&self) -> Grid {
        Grid::from_vec(self.width, self.height, self.channels, self.values.clone())
            .expect("atlas storage matches its shape")
    }

    /// Writes a single contribution-free value; used to build test fixtures.
    pub fn set_texel(&mut self, texel: usize, value: &[f64], weight: f64) {
        assert_eq!(value.len(), self.channels);
        assert!(weight > 0.0);
        let c = self.channels;
        self.values[texel * c..(texel + 1) * c].copy_from_slice(value);
        self.weight[texel] = weight;
        self.valid[texel] = true;
    }

    /// Weighted mean of all contributions: for each touched texel,
    /// `value = Σ wᵢ vᵢ / Σ wᵢ` including any value already present (with its
    /// accumulated weight). Contributions are summed in the order given, so
    /// the result is independent of how the scatters were produced.
    pub fn aggregate(&mut self, scatters: &[TexelScatter]) -> Result<(), AtlasError> {
        let c = self.channels;
        for s in scatters {
            if (s.width, s.height, s.channels) != (self.width, self.height, c) {
                return Err(AtlasError::ShapeMismatch(format!(
                    "scatter {}x{}x{} vs atlas {}x{}x{}",
                    s.width, s.height, s.channels, self.width, self.height, c
                )));
            }
        }
        let mut touched = vec![false; self.texel_count()];
        let mut order = Vec::new();
        for s in scatters {
            for (k, &p) in s.texels.iter().enumerate() {
                let w = s.weights[k];
                let vals = &mut self.values[p * c..(p + 1) * c];
                if !touched[p] {
                    touched[p] = true;
                    order.push(p);
                    if self.valid[p] {
                        let w0 = self.weight[p];
                        vals.iter_mut().for_each(|v| *v *= w0);
                    } else {
                        vals.fill(0.0);
                        self.weight[p] = 0.0;
                    }
                }
                for (acc, v) in vals.iter_mut().zip(s.value(k)) {
                    *acc += w * v;
                }
                self.weight[p] += w;
            }
        }
        for p in order {
            let w = self.weight[p];
            if w > 0.0 {
                self.values[p * c..(p + 1) * c].iter_mut().for_each(|v| *v /= w);
                self.valid[p] = true;
            }
        }
        Ok(())
    }

    /// Gives every invalid chart texel the value (and weight) of its nearest
    /// valid texel in Euclidean texel distance; ties go to the seed with the
    /// smaller row-major index. Valid texels are never modified.
    pub fn voronoi_fill(&mut self) -> Result<FillStats, AtlasError> {
        let seeds = self.valid_count();
        if seeds == 0 {
            return Err(AtlasError::NoSeeds);
        }
        let nearest = nearest_seed_map(self.width, self.height, &self.valid);
        let c = self.channels;
        let mut filled = 0;
        for p in 0..self.texel_count() {
            if self.valid[p] || !self.chart_mask[p] {
                continue;
            }
            let s = nearest[p].expect("at least one seed exists") as usize;
            self.values.copy_within(s * c..(s + 1) * c, p * c);
            self.weight[p] = self.weight[s];
            self.valid[p] = true;
            filled += 1;
        }
        Ok(FillStats { seeds, filled })
    }

    /// Grows the chart mask by `margin` texels of 8-connected dilation.
    pub fn dilate_chart_mask(&mut self, margin: usize) {
        if margin == 0 {
            return;
        }
        let (w, h) = (self.width, self.height);
        let rows = dilate_1d(&self.chart_mask, w, h, margin, true);
        self.chart_mask = dilate_1d(&rows, w, h, margin, false);
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>, AtlasError> {
        if self.channels != 3 {
            return Err(AtlasError::ChannelMismatch {
                expected: 3,
                actual: self.channels,
            });
        }
        Ok(imageio::rgb8_png_bytes(&self.to_grid())?)
    }

    /// 8-bit RGB PNG, values clamped to `[0, 1]`; row 0 is `v = 1`.
    pub fn export_png(&self, path: impl AsRef<Path>) -> Result<(), AtlasError> {
        let bytes = self.png_bytes()?;
        Ok(imageio::write_file(path, &bytes)?)
    }

    /// Debug dumps: white where valid, and accumulated weight scaled to the
    /// maximum weight.
    pub fn export_debug_pngs(
        &self,
        valid_path: impl AsRef<Path>,
        weight_path: impl AsRef<Path>,
    ) -> Result<(), AtlasError> {
        let mask: Vec<u8> = self.valid.iter().map(|&v| if v { 255 } else { 0 }).collect();
        imageio::write_file(valid_path, &imageio::gray8_png_bytes(self.width, self.height, &mask)?)?;
        let max = self.weight.iter().cloned().fold(0.0_f64, f64::max);
        let heat: Vec<u8> = self
            .weight
            .iter()
            .map(|&w| if max > 0.0 { imageio::quantize_u8(w / max) } else { 0 })
            .collect();
        imageio::write_file(weight_path, &imageio::gray8_png_bytes(self.width, self.height, &heat)?)?;
        Ok(())
    }
}

/// One scatter entry per foreground pixel of `frame`: the texel its UV
/// addresses in a `width × height` atlas, the view value, and weight
/// `cosineᵏ`.
pub fn backproject(
    frame: &RasterFrame,
    view: &Grid,
    weight_exponent: f64,
    width: usize,
    height: usize,
) -> Result<TexelScatter, AtlasError> {
    if view.width() != frame.size() || view.height() != frame.size() {
        return Err(AtlasError::ShapeMismatch(format!(
            "view grid {}x{} vs frame {}",
            view.width(),
            view.height(),
            frame.size()
        )));
    }
    let c = view.channels();
    let fg = frame.foreground_count();
    let mut scatter = TexelScatter {
        width,
        height,
        channels: c,
        texels: Vec::with_capacity(fg),
        weights: Vec::with_capacity(fg),
        values: Vec::with_capacity(fg * c),
    };
    for p in 0..frame.pixel_count() {
        if !frame.is_foreground(p) {
            continue;
        }
        let (i, j) = texel_of_uv(frame.uv()[p], width, height);
        scatter.texels.push(j * width + i);
        scatter.weights.push(frame.cosine()[p].powf(weight_exponent));
        scatter.values.extend_from_slice(view.pixel(p));
    }
    Ok(scatter)
}

/// Convenience wrapper: aggregates into a copy of `atlas`.
pub fn aggregate(atlas: &TextureAtlas, scatters: &[TexelScatter]) -> Result<TextureAtlas, AtlasError> {
    let mut out = atlas.clone();
    out.aggregate(scatters)?;
    Ok(out)
}

/// For every texel, the row-major index of its nearest seed under Euclidean
/// distance, ties resolved toward the smaller seed index. `None` only when
/// there are no seeds at all.
///
/// Exact separable feature transform: a column pass finds the nearest seed row
/// per column, then a row pass takes the lower envelope of the per-column
/// candidates ordered by `(distance², seed index)`. Runs in `O(width · height)`.
pub fn nearest_seed_map(width: usize, height: usize, seeds: &[bool]) -> Vec<Option<u32>> {
    assert_eq!(seeds.len(), width * height);
    // Column pass: (vertical offset, seed row) of the nearest seed per column.
    let mut column_best: Vec<Option<(i64, i64)>> = vec![None; width * height];
    let mut above = vec![None::<usize>; height];
    for x in 0..width {
        let mut last = None;
        for y in 0..height {
            if seeds[y * width + x] {
                last = Some(y);
            }
            above[y] = last;
        }
        let mut next = None;
        for y in (0..height).rev() {
            if seeds[y * width + x] {
                next = Some(y);
            }
            let best = match (above[y], next) {
                (Some(a), Some(b)) => Some(if y - a <= b - y { a } else { b }),
                (a, b) => a.or(b),
            };
            column_best[y * width + x] = best.map(|s| ((s as i64 - y as i64).abs(), s as i64));
        }
    }

    // Row pass over candidates (column x', vertical gap g, seed index).
    struct Candidate {
        x: i64,
        g: i64,
        index: i64,
    }
    fn dist(c: &Candidate, x: i64) -> i64 {
        (x - c.x) * (x - c.x) + c.g * c.g
    }
    // First integer x at which `b` (to the right of `a`) beats `a`.
    fn takeover(a: &Candidate, b: &Candidate) -> i64 {
        let d2 = 2 * (b.x - a.x);
        let n = b.x * b.x - a.x * a.x + b.g * b.g - a.g * a.g;
        if b.index < a.index {
            // b also wins exact ties: x ≥ n / d2
            -((-n).div_euclid(d2))
        } else {
            n.div_euclid(d2) + 1
        }
    }

    let w = width as i64;
    let mut out = vec![None; width * height];
    let mut stack: Vec<(Candidate, i64)> = Vec::with_capacity(width);
    for y in 0..height {
        stack.clear();
        for x in 0..width {
            let Some((g, row)) = column_best[y * width + x] else {
                continue;
            };
            let cand = Candidate {
                x: x as i64,
                g,
                index: row * w + x as i64,
            };
            loop {
                let Some((top, start)) = stack.last() else {
                    stack.push((cand, 0));
                    break;
                };
                let s = takeover(top, &cand);
                if s <= *start {
                    stack.pop();
                    continue;
                }
                if s < w {
                    stack.push((cand, s));
                }
                break;
            }
        }
        if stack.is_empty() {
            continue;
        }
        let mut k = 0;
        for x in 0..w {
            while k + 1 < stack.len() && stack[k + 1].1 <= x {
                k += 1;
            }
            debug_assert!(dist(&stack[k].0, x) >= 0);
            out[y * width + x as usize] = Some(stack[k].0.index as u32);
        }
    }
    out
}

fn dilate_1d(mask: &[bool], w: usize, h: usize, r: usize, along_rows: bool) -> Vec<bool> {
    let (lines, len) = if along_rows { (h, w) } else { (w, h) };
    let idx = |line: usize, k: usize| if along_rows { line * w + k } else { k * w + line };
    let mut out = vec![false; w * h];
    let mut prefix = vec![0usize; len + 1];
    for line in 0..lines {
        for k in 0..len {
            prefix[k + 1] = prefix[k] + mask[idx(line, k)] as usize;
        }
        for k in 0..len {
            let lo = k.saturating_sub(r);
            let hi = (k + r + 1).min(len);
            out[idx(line, k)] = prefix[hi] > prefix[lo];
        }
    }
    out
}

/// Marks texels whose square `[i, i+1] × [j, j+1]` overlaps the triangle given
/// in texel coordinates.
fn mark_overlapped_texels(tri: &[[f64; 2]; 3], w: usize, h: usize, mask: &mut [bool]) {
    let area = (tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1])
        - (tri[1][1] - tri[0][1]) * (tri[2][0] - tri[0][0]);
    let sign = if area >= 0.0 { 1.0 } else { -1.0 };
    let xmin = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let xmax = tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let ymin = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let ymax = tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let clamp_w = |v: f64| v.clamp(0.0, (w - 1) as f64) as usize;
    let clamp_h = |v: f64| v.clamp(0.0, (h - 1) as f64) as usize;
    let (i0, i1) = (clamp_w(xmin.floor()), clamp_w(xmax.floor()));
    let (j0, j1) = (clamp_h(ymin.floor()), clamp_h(ymax.floor()));
    for j in j0..=j1 {
        for i in i0..=i1 {
            let corners = [
                [i as f64, j as f64],
                [i as f64 + 1.0, j as f64],
                [i as f64, j as f64 + 1.0],
                [i as f64 + 1.0, j as f64 + 1.0],
            ];
            // Separating axis along each edge normal.
            let separated = (0..3).any(|e| {
                let a = tri[e];
                let b = tri[(e + 1) % 3];
                corners.iter().all(|p| {
                    let ef = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                    sign * ef < 0.0
                })
            });
            if !separated {
                mask[j * w + i] = true;
            }
        }
    }
}
