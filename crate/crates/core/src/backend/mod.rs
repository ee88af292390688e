//! Wire protocol for an out-of-process diffusion service.
//!
//! All bodies are JSON. Tensors travel as [`TensorPayload`]: shape `[C, H, W]`,
//! little-endian `f32`, channel-planar row-major, base64 encoded.
//!
//! | Method | Path              | Request                 | Response                 |
//! |--------|-------------------|-------------------------|--------------------------|
//! | GET    | `/health`         |                         | [`HealthResponse`]       |
//! | POST   | `/txt2img`        | [`Txt2ImgRequest`]      | [`Txt2ImgResponse`]      |
//! | POST   | `/denoise`        | [`DenoiseRequest`]      | [`DenoiseResponse`]      |
//! | POST   | `/decode`         | [`DecodeRequest`]       | [`DecodeResponse`]       |
//! | POST   | `/register_image` | [`RegisterImageRequest`]| [`RegisterImageResponse`]|
//!
//! Failures answer with a non-2xx status and an [`ErrorBody`].

mod client;
mod replay;
mod server;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::CodecError;
use crate::diffusion::{DenoiserOutput, DiffusionError, ViewConditioning};
use crate::grid::Grid;

pub use client::{ClientConfig, RemoteDenoiser};
pub use replay::{Recorder, ReplayBackend};
pub use server::{EchoHandler, HandlerError, LoopbackServer, ServiceHandler, ToyServiceHandler};

pub const DTYPE_F32: &str = "f32";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("tensor payload holds {actual} bytes but shape {shape:?} needs {expected}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid base64: {0}")]
    BadBase64(String),
    #[error("unsupported dtype {0:?}")]
    BadDtype(String),
    #[error("tensor rank {0}, expected 3")]
    BadRank(usize),
    #[error("tensor contains non-finite values")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("response id {got} does not match request id {expected}")]
    IdMismatch { expected: String, got: String },
    #[error("transport error talking to {url}: {message}")]
    Transport { url: String, message: String },
    #[error("server answered {status} for {url}: {message}")]
    Status { url: String, status: u16, message: String },
    #[error("malformed message: {0}")]
    Protocol(String),
    #[error("no recorded {kind} response for request {key}")]
    ReplayMiss { kind: String, key: String },
    #[error("replay fixture {path}: {message}")]
    Fixture { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<BackendError> for DiffusionError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::ShapeMismatch(_)
            | BackendError::NonFinite
            | BackendError::LengthMismatch { .. }
            | BackendError::BadRank(_) => DiffusionError::ShapeMismatch(e.to_string()),
            other => DiffusionError::DenoiserUnavailable(other.to_string()),
        }
    }
}

impl From<BackendError> for CodecError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::ShapeMismatch(_)
            | BackendError::NonFinite
            | BackendError::LengthMismatch { .. }
            | BackendError::BadRank(_) => CodecError::ShapeMismatch(e.to_string()),
            other => CodecError::Unavailable(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorPayload {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

/// Encodes a grid as `[C, H, W]` little-endian `f32`.
pub fn encode_tensor(grid: &Grid) -> Result<TensorPayload, BackendError> {
    if !grid.is_finite() {
        return Err(BackendError::NonFinite);
    }
    let (w, h, c) = grid.shape();
    let mut bytes = Vec::with_capacity(4 * w * h * c);
    for ch in 0..c {
        for p in 0..w * h {
            bytes.extend_from_slice(&(grid.pixel(p)[ch] as f32).to_le_bytes());
        }
    }
    Ok(TensorPayload {
        shape: vec![c, h, w],
        dtype: DTYPE_F32.into(),
        data: B64.encode(bytes),
    })
}

/// Inverse of [`encode_tensor`]. The shape field is authoritative.
pub fn decode_tensor(payload: &TensorPayload) -> Result<Grid, BackendError> {
    if payload.dtype != DTYPE_F32 {
        return Err(BackendError::BadDtype(payload.dtype.clone()));
    }
    let bytes = B64
        .decode(payload.data.as_bytes())
        .map_err(|e| BackendError::BadBase64(e.to_string()))?;
    let expected = payload
        .shape
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| BackendError::Protocol(format!("shape {:?} overflows", payload.shape)))?;
    if bytes.len() != expected {
        return Err(BackendError::LengthMismatch {
            shape: payload.shape.clone(),
            expected,
            actual: bytes.len(),
        });
    }
    let [c, h, w] = payload.shape[..] else {
        return Err(BackendError::BadRank(payload.shape.len()));
    };
    let mut grid = Grid::zeros(w, h, c);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(BackendError::NonFinite);
        }
        let (ch, p) = (i / (w * h), i % (w * h));
        grid.pixel_mut(p)[ch] = v as f64;
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRequest {
    /// SHA-256 of this request serialized with an empty id.
    pub id: String,
    pub latent: TensorPayload,
    pub timestep: usize,
    /// Prompt including its direction suffix.
    pub prompt: String,
    pub negative_prompt: String,
    /// Base64 16-bit depth PNG.
    pub depth_png: String,
    pub image_guidance_id: Option<String>,
    pub image_scale: f64,
    pub cfg_scale: f64,
    /// When set the server applies CFG itself and returns the guided noise in
    /// both fields.
    pub cfg_server_side: bool,
}

impl DenoiseRequest {
    pub fn new(
        latent: &Grid,
        timestep: usize,
        cond: &ViewConditioning,
        cfg_server_side: bool,
    ) -> Result<Self, BackendError> {
        let mut req = Self {
            id: String::new(),
            latent: encode_tensor(latent)?,
            timestep,
            prompt: cond.prompt.clone(),
            negative_prompt: cond.negative_prompt.clone(),
            depth_png: B64.encode(&cond.depth_png),
            image_guidance_id: cond.image_guidance.clone(),
            image_scale: cond.image_scale,
            cfg_scale: cond.cfg_scale,
            cfg_server_side,
        };
        req.id = content_id(&req);
        Ok(req)
    }

    /// Whether `id` matches the content.
    pub fn id_is_consistent(&self) -> bool {
        let mut copy = self.clone();
        copy.id.clear();
        content_id(&copy) == self.id
    }
}

fn content_id<T: Serialize>(body: &T) -> String {
    let bytes = serde_json::to_vec(body).expect("protocol types serialize");
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseResponse {
    pub id: String,
    pub eps_cond: TensorPayload,
    pub eps_uncond: TensorPayload,
}

impl DenoiseResponse {
    /// Decodes and validates the response against its request latent.
    pub fn into_output(self, request: &DenoiseRequest, latent: &Grid) -> Result<DenoiserOutput, BackendError> {
        if self.id != request.id {
            return Err(BackendError::IdMismatch {
                expected: request.id.clone(),
                got: self.id,
            });
        }
        let eps_cond = decode_tensor(&self.eps_cond)?;
        let eps_uncond = decode_tensor(&self.eps_uncond)?;
        for eps in [&eps_cond, &eps_uncond] {
            if !eps.same_shape(latent) {
                return Err(BackendError::ShapeMismatch(format!(
                    "response {:?} for latent {:?}",
                    eps.shape(),
                    latent.shape()
                )));
            }
        }
        Ok(DenoiserOutput { eps_cond, eps_uncond })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Txt2ImgRequest {
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Txt2ImgResponse {
    pub handle: String,
    /// Base64 PNG.
    pub png: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterImageRequest {
    /// Base64 PNG.
    pub png: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterImageResponse {
    pub handle: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub id: String,
    pub latent: TensorPayload,
}

impl DecodeRequest {
    pub fn new(latent: &Grid) -> Result<Self, BackendError> {
        let mut req = Self {
            id: String::new(),
            latent: encode_tensor(latent)?,
        };
        req.id = content_id(&req);
        Ok(req)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub id: String,
    /// `[3, H, W]` RGB in `[0, 1]`.
    pub image: TensorPayload,
}

impl DecodeResponse {
    pub fn into_image(self, request: &DecodeRequest) -> Result<Grid, BackendError> {
        if self.id != request.id {
            return Err(BackendError::IdMismatch {
                expected: request.id.clone(),
                got: self.id,
            });
        }
        let image = decode_tensor(&self.image)?;
        if image.channels() != 3 {
            return Err(BackendError::ShapeMismatch(format!("decoded image has {} channels", image.channels())));
        }
        Ok(image)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    #[serde(default)]
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// A guidance image shared by every view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidanceImage {
    pub handle: String,
    pub png: Vec<u8>,
}

impl Txt2ImgResponse {
    pub fn into_image(self) -> Result<GuidanceImage, BackendError> {
        let png = B64
            .decode(self.png.as_bytes())
            .map_err(|e| BackendError::BadBase64(e.to_string()))?;
        Ok(GuidanceImage {
            handle: self.handle,
            png,
        })
    }
}

/// Everything the pipeline needs from a diffusion service.
pub trait DiffusionService: crate::diffusion::Denoiser + crate::codec::LatentDecoder {
    /// Generates (or fetches from cache) the shared guidance image for `prompt`.
    fn txt2img(&self, prompt: &str) -> Result<GuidanceImage, BackendError>;
    /// Uploads a user image and returns its handle.
    fn register_image(&self, png: &[u8]) -> Result<String, BackendError>;
}

/// Fetches the guidance image for the base prompt.
pub fn fetch_guidance_image<S: DiffusionService + ?Sized>(service: &S, prompt: &str) -> Result<GuidanceImage, BackendError> {
    service.txt2img(prompt)
}

pub(crate) fn b64_encode(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub(crate) fn b64_decode(text: &str) -> Result<Vec<u8>, BackendError> {
    B64.decode(text.as_bytes()).map_err(|e| BackendError::BadBase64(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_value_payload() {
        let g = Grid::filled(1, 1, 1, 0.5);
        let p = encode_tensor(&g).unwrap();
        assert_eq!(p.shape, vec![1, 1, 1]);
        assert_eq!(B64.decode(&p.data).unwrap(), 0.5f32.to_le_bytes().to_vec());
        assert_eq!(decode_tensor(&p).unwrap(), g);
    }

    #[test]
    fn layout_is_channel_planar() {
        let g = Grid::from_vec(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = encode_tensor(&g).unwrap();
        assert_eq!(p.shape, vec![2, 1, 2]);
        let floats: Vec<f32> = B64
            .decode(&p.data)
            .unwrap()
            .chunks(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        assert_eq!(floats, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn malformed_payloads() {
        let p = TensorPayload {
            shape: vec![2, 2],
            dtype: DTYPE_F32.into(),
            data: B64.encode([0u8; 4]),
        };
        assert!(matches!(decode_tensor(&p), Err(BackendError::LengthMismatch { expected: 16, actual: 4, .. })));
        let p = TensorPayload {
            shape: vec![1, 2, 2],
            dtype: DTYPE_F32.into(),
            data: "@@not base64@@".into(),
        };
        assert!(matches!(decode_tensor(&p), Err(BackendError::BadBase64(_))));
        let p = TensorPayload {
            shape: vec![4],
            dtype: DTYPE_F32.into(),
            data: B64.encode([0u8; 16]),
        };
        assert!(matches!(decode_tensor(&p), Err(BackendError::BadRank(1))));
        let p = TensorPayload {
            shape: vec![1, 1, 1],
            dtype: DTYPE_F32.into(),
            data: B64.encode(f32::NAN.to_le_bytes()),
        };
        assert!(matches!(decode_tensor(&p), Err(BackendError::NonFinite)));
        let p = TensorPayload {
            shape: vec![1, 1, 1],
            dtype: "f16".into(),
            data: B64.encode([0u8; 2]),
        };
        assert!(matches!(decode_tensor(&p), Err(BackendError::BadDtype(_))));
        assert!(matches!(
            encode_tensor(&Grid::filled(1, 1, 1, f64::INFINITY)),
            Err(BackendError::NonFinite)
        ));
    }

    #[test]
    fn request_ids_are_content_hashes() {
        let latent = Grid::filled(2, 2, 4, 0.25);
        let cond = ViewConditioning {
            prompt: "a chair, from front view".into(),
            depth_png: vec![1, 2, 3],
            ..ViewConditioning::bare(0)
        };
        let a = DenoiseRequest::new(&latent, 500, &cond, false).unwrap();
        let b = DenoiseRequest::new(&latent, 500, &ViewConditioning { view: 5, ..cond.clone() }, false).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert!(a.id_is_consistent());
        let c = DenoiseRequest::new(&latent, 499, &cond, false).unwrap();
        assert_ne!(a.id, c.id);
    }

    proptest! {
        #[test]
        fn f32_grids_round_trip_bitwise(w in 1usize..6, h in 1usize..6, c in 1usize..5, seed in any::<u32>()) {
            let data: Vec<f64> = (0..w * h * c)
                .map(|i| f32::from_bits((seed.wrapping_add(i as u32).wrapping_mul(2654435761)) & 0x3fff_ffff) as f64)
                .collect();
            let g = Grid::from_vec(w, h, c, data).unwrap();
            let p = encode_tensor(&g).unwrap();
            let back = decode_tensor(&p).unwrap();
            prop_assert_eq!(back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            g.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(encode_tensor(&back).unwrap(), p);
        }
    }
}
