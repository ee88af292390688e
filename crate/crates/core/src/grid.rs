//! Dense interleaved `height × width × channels` grids.
//!
//! Every per-view latent, decoded view and sampled atlas is a [`Grid`]. Storage
//! is row-major with channels innermost, row 0 at the top of the image.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Wraps existing interleaved data. Returns `None` when the length does not
    /// match the requested shape.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == width * height * channels).then_some(Self {
            width,
            height,
            channels,
            data,
        })
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

    /// `(width, height, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        let c = self.channels;
        &self.data[index * c..(index + 1) * c]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Elementwise `a·self + b·other`. Shapes must match.
    pub fn axpby(&self, a: f64, other: &Grid, b: f64) -> Grid {
        debug_assert!(self.same_shape(other));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Grid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }

    /// Euclidean norm of `self - other`.
    pub fn distance(&self, other: &Grid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Packs `factor × factor` pixel blocks into channels (space-to-depth).
    ///
    /// Output channel layout for block offset `(dx, dy)` and source channel
    /// `c` is `(dy * factor + dx) * channels + c`.
    pub fn pixel_unshuffle(&self, factor: usize) -> Option<Grid> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return None;
        }
        let (w, h, c) = (self.width / factor, self.height / factor, self.channels * factor * factor);
        let mut out = Grid::zeros(w, h, c);
        for y in 0..self.height {
            for x in 0..self.width {
                let (bx, by) = (x / factor, y / factor);
                let offset = ((y % factor) * factor + x % factor) * self.channels;
                let dst = (by * w + bx) * c + offset;
                out.data[dst..dst + self.channels].copy_from_slice(self.at(x, y));
            }
        }
        Some(out)
    }

    /// Inverse of [`Grid::pixel_unshuffle`].
    pub fn pixel_shuffle(&self, factor: usize) -> Option<Grid> {
        if factor == 0 || self.channels % (factor * factor) != 0 {
            return None;
        }
        let c = self.channels / (factor * factor);
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = Grid::zeros(w, h, c);
        for y in 0..h {
            for x in 0..w {
                let (bx, by) = (x / factor, y / factor);
                let offset = ((y % factor) * factor + x % factor) * c;
                let src = (by * self.width + bx) * self.channels + offset;
                let dst = (y * w + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Some(out)
    }
}
