//! Decoupled cross-attention and per-view direction prompts.
//!
//! Feature sequences are `L×D` matrices, one token per row. The attention
//! contract is
//!
//! ```text
//! Z'' = softmax(Q Kᵀ/√d_k) V + λ · softmax(Q K'ᵀ/√d_k) V'
//! ```
//!
//! with `Q = Z W_q`, `K = c_view W_k`, `V = c_view W_v`, `K' = c_img W'_k`
//! and `V' = c_img W'_v`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraPose;

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("feature sequence is empty")]
    EmptySequence,
    #[error("feature sequence contains non-finite values")]
    NonFinite,
    #[error("base prompt is empty")]
    EmptyPrompt,
    #[error("image scale must be non-negative, got {0}")]
    NegativeScale(f64),
    #[error("{views} views but {features} direction feature sequences")]
    ViewCount { views: usize, features: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureOrigin {
    Text,
    Image,
    Direction,
}

/// A token sequence, one `D`-dimensional token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    tokens: DMatrix<f64>,
    origin: FeatureOrigin,
}

impl FeatureSeq {
    pub fn new(tokens: DMatrix<f64>, origin: FeatureOrigin) -> Result<Self, GuidanceError> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(GuidanceError::EmptySequence);
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(GuidanceError::NonFinite);
        }
        Ok(Self { tokens, origin })
    }

    pub fn random<R: Rng + ?Sized>(len: usize, dim: usize, origin: FeatureOrigin, rng: &mut R) -> Self {
        Self::new(random_matrix(len, dim, rng), origin).expect("non-empty finite")
    }

    pub fn tokens(&self) -> &DMatrix<f64> {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn origin(&self) -> FeatureOrigin {
        self.origin
    }
}

/// Unit-normal matrix.
pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Query and key/value projections for both attention branches.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_k_img: DMatrix<f64>,
    pub w_v_img: DMatrix<f64>,
}

impl AttentionWeights {
    pub fn new(
        w_q: DMatrix<f64>,
        w_k: DMatrix<f64>,
        w_v: DMatrix<f64>,
        w_k_img: DMatrix<f64>,
        w_v_img: DMatrix<f64>,
    ) -> Result<Self, GuidanceError> {
        let d_k = w_q.ncols();
        if d_k == 0 {
            return Err(GuidanceError::DimensionMismatch("d_k must be positive".into()));
        }
        if w_k.ncols() != d_k || w_k_img.ncols() != d_k {
            return Err(GuidanceError::DimensionMismatch(format!(
                "key widths {} / {} differ from query width {d_k}",
                w_k.ncols(),
                w_k_img.ncols()
            )));
        }
        if w_k.nrows() != w_v.nrows() || w_k_img.nrows() != w_v_img.nrows() {
            return Err(GuidanceError::DimensionMismatch(
                "key and value projections take different feature widths".into(),
            ));
        }
        if w_v.ncols() != w_v_img.ncols() {
            return Err(GuidanceError::DimensionMismatch(format!(
                "branch value widths differ: {} vs {}",
                w_v.ncols(),
                w_v_img.ncols()
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_k_img,
            w_v_img,
        })
    }

    /// Random weights with `D_z` query features, `D` context features and
    /// key/value width `d_k`.
    pub fn random<R: Rng + ?Sized>(d_z: usize, d: usize, d_k: usize, rng: &mut R) -> Self {
        Self {
            w_q: random_matrix(d_z, d_k, rng),
            w_k: random_matrix(d, d_k, rng),
            w_v: random_matrix(d, d_k, rng),
            w_k_img: random_matrix(d, d_k, rng),
            w_v_img: random_matrix(d, d_k, rng),
        }
    }

    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }
}

/// Shared image features, per-view direction features and the guidance scales.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceBundle {
    pub c_img: FeatureSeq,
    pub c_view: Vec<FeatureSeq>,
    pub image_scale: f64,
    pub cfg_scale: f64,
}

impl GuidanceBundle {
    pub fn new(
        c_img: FeatureSeq,
        c_view: Vec<FeatureSeq>,
        image_scale: f64,
        cfg_scale: f64,
        views: usize,
    ) -> Result<Self, GuidanceError> {
        if c_view.len() != views {
            return Err(GuidanceError::ViewCount {
                views,
                features: c_view.len(),
            });
        }
        if image_scale.is_nan() || image_scale < 0.0 {
            return Err(GuidanceError::NegativeScale(image_scale));
        }
        Ok(Self {
            c_img,
            c_view,
            image_scale,
            cfg_scale,
        })
    }

    /// Decoupled attention output for `view`.
    pub fn attend(&self, view: usize, z: &DMatrix<f64>, weights: &AttentionWeights) -> Result<DMatrix<f64>, GuidanceError> {
        let c_view = self.c_view.get(view).ok_or(GuidanceError::ViewCount {
            views: view + 1,
            features: self.c_view.len(),
        })?;
        decoupled_attention(z, c_view, &self.c_img, self.image_scale, weights)
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(scores: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = scores.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// `softmax((Z W_q)(c W_k)ᵀ / √d_k) (c W_v)`.
pub fn cross_attention(
    z: &DMatrix<f64>,
    c: &FeatureSeq,
    w_q: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
    w_v: &DMatrix<f64>,
) -> Result<DMatrix<f64>, GuidanceError> {
    if z.ncols() != w_q.nrows() {
        return Err(GuidanceError::DimensionMismatch(format!(
            "query features {} vs W_q rows {}",
            z.ncols(),
            w_q.nrows()
        )));
    }
    if c.dim() != w_k.nrows() || c.dim() != w_v.nrows() {
        return Err(GuidanceError::DimensionMismatch(format!(
            "context features {} vs W_k/W_v rows {}/{}",
            c.dim(),
            w_k.nrows(),
            w_v.nrows()
        )));
    }
    if w_q.ncols() != w_k.ncols() || w_q.ncols() == 0 {
        return Err(GuidanceError::DimensionMismatch(format!(
            "query width {} vs key width {}",
            w_q.ncols(),
            w_k.ncols()
        )));
    }
    let q = z * w_q;
    let k = c.tokens() * w_k;
    let v = c.tokens() * w_v;
    let scores = (q * k.transpose()) / (w_q.ncols() as f64).sqrt();
    Ok(softmax_rows(&scores) * v)
}

/// Direction branch plus `λ` times the image branch.
pub fn decoupled_attention(
    z: &DMatrix<f64>,
    c_view: &FeatureSeq,
    c_img: &FeatureSeq,
    image_scale: f64,
    w: &AttentionWeights,
) -> Result<DMatrix<f64>, GuidanceError> {
    let direction = cross_attention(z, c_view, &w.w_q, &w.w_k, &w.w_v)?;
    let image = cross_attention(z, c_img, &w.w_q, &w.w_k_img, &w.w_v_img)?;
    Ok(direction + image * image_scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionLabel {
    Front,
    Side,
    Back,
    Top,
    Bottom,
}

impl DirectionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Front => "front",
            Self::Side => "side",
            Self::Back => "back",
            Self::Top => "top",
            Self::Bottom => "bottom",
        }
    }
}

impl std::fmt::Display for DirectionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Angular thresholds, in degrees, for [`direction_label`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectionBins {
    /// `|azimuth| ≤ front_max` is front.
    pub front_max: f64,
    /// `|azimuth| ≥ back_min` is back; in between is side.
    pub back_min: f64,
    /// `elevation ≥ top_min` is top.
    pub top_min: f64,
    /// `elevation ≤ bottom_max` is bottom.
    pub bottom_max: f64,
}

impl Default for DirectionBins {
    fn default() -> Self {
        Self {
            front_max: 45.0,
            back_min: 135.0,
            top_min: 60.0,
            bottom_max: -60.0,
        }
    }
}

pub fn direction_label(pose: &CameraPose, bins: &DirectionBins) -> DirectionLabel {
    if pose.elevation >= bins.top_min {
        return DirectionLabel::Top;
    }
    if pose.elevation <= bins.bottom_max {
        return DirectionLabel::Bottom;
    }
    let az = pose.azimuth.abs();
    if az <= bins.front_max {
        DirectionLabel::Front
    } else if az < bins.back_min {
        DirectionLabel::Side
    } else {
        DirectionLabel::Back
    }
}

/// `"{base}, from {label} view"`.
pub fn build_direction_prompt(base: &str, label: DirectionLabel) -> Result<String, GuidanceError> {
    if base.trim().is_empty() {
        return Err(GuidanceError::EmptyPrompt);
    }
    Ok(format!("{base}, from {label} view"))
}

/// Direction prompts for every pose, in order.
pub fn direction_prompts(base: &str, poses: &[CameraPose], bins: &DirectionBins) -> Result<Vec<String>, GuidanceError> {
    poses
        .iter()
        .map(|p| build_direction_prompt(base, direction_label(p, bins)))
        .collect()
}
