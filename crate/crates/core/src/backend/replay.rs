//! Recorded request/response fixtures.
//!
//! A fixture directory holds pairs `NNNN-<kind>.request.json` /
//! `NNNN-<kind>.response.json`, where `kind` is `denoise`, `txt2img`,
//! `decode` or `register_image`. Replay matches requests by their canonical
//! JSON, so a replayed run must issue exactly the recorded requests.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{
    b64_encode, BackendError, DecodeRequest, DecodeResponse, DenoiseRequest, DenoiseResponse, DiffusionService,
    GuidanceImage, RegisterImageRequest, RegisterImageResponse, Txt2ImgRequest, Txt2ImgResponse,
};
use crate::codec::{CodecError, LatentDecoder};
use crate::diffusion::{Denoiser, DenoiserOutput, DiffusionError, ViewConditioning};
use crate::grid::Grid;

const REQUEST_SUFFIX: &str = ".request.json";
const RESPONSE_SUFFIX: &str = ".response.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BackendError + '_ {
    move |source| BackendError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn canonical(bytes: &[u8]) -> Result<String, serde_json::Error> {
    let value: serde_json::Value = serde_json::from_slice(bytes)?;
    serde_json::to_string(&value)
}

fn pretty(bytes: &[u8]) -> Result<Vec<u8>, serde_json::Error> {
    let value: serde_json::Value = serde_json::from_slice(bytes)?;
    let mut out = serde_json::to_vec_pretty(&value)?;
    out.push(b'\n');
    Ok(out)
}

/// Writes exchanges into a fixture directory.
#[derive(Debug)]
pub struct Recorder {
    dir: PathBuf,
    next: AtomicUsize,
}

impl Recorder {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self {
            dir,
            next: AtomicUsize::new(0),
        })
    }

    pub fn record(&self, kind: &str, request: &[u8], response: &[u8]) -> Result<(), BackendError> {
        let n = self.next.fetch_add(1, Ordering::SeqCst);
        for (suffix, body) in [(REQUEST_SUFFIX, request), (RESPONSE_SUFFIX, response)] {
            let path = self.dir.join(format!("{n:04}-{kind}{suffix}"));
            let text = pretty(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
            std::fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Serves recorded responses offline.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    responses: HashMap<(String, String), String>,
    served: Mutex<Vec<String>>,
}

impl ReplayBackend {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let dir = dir.as_ref();
        let mut responses = HashMap::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for req_path in entries {
            let Some(name) = req_path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(stem) = name.strip_suffix(REQUEST_SUFFIX) else {
                continue;
            };
            let fixture_err = |message: String| BackendError::Fixture {
                path: req_path.display().to_string(),
                message,
            };
            let kind = stem
                .split_once('-')
                .map(|(_, k)| k.to_string())
                .ok_or_else(|| fixture_err("file name lacks NNNN-<kind>".into()))?;
            let resp_path = dir.join(format!("{stem}{RESPONSE_SUFFIX}"));
            let request = std::fs::read(&req_path).map_err(io_err(&req_path))?;
            let response = std::fs::read_to_string(&resp_path).map_err(io_err(&resp_path))?;
            let key = canonical(&request).map_err(|e| fixture_err(e.to_string()))?;
            responses.insert((kind, key), response);
        }
        if responses.is_empty() {
            return Err(BackendError::Fixture {
                path: dir.display().to_string(),
                message: "no request/response pairs".into(),
            });
        }
        Ok(Self {
            responses,
            served: Mutex::new(Vec::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Kinds of the requests served so far, in order.
    pub fn served(&self) -> Vec<String> {
        self.served.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn lookup<B: Serialize, R: DeserializeOwned>(&self, kind: &str, body: &B) -> Result<R, BackendError> {
        let bytes = serde_json::to_vec(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let key = canonical(&bytes).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let text = self
            .responses
            .get(&(kind.to_string(), key))
            .ok_or_else(|| BackendError::ReplayMiss {
                kind: kind.into(),
                key: summarize(body),
            })?;
        self.served.lock().unwrap_or_else(|e| e.into_inner()).push(kind.into());
        serde_json::from_str(text).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

fn summarize<B: Serialize>(body: &B) -> String {
    match serde_json::to_value(body) {
        Ok(serde_json::Value::Object(map)) => map
            .get("id")
            .or_else(|| map.get("prompt"))
            .map(|v| v.to_string())
            .unwrap_or_else(|| "<unkeyed>".into()),
        _ => "<unkeyed>".into(),
    }
}

impl Denoiser for ReplayBackend {
    fn query(&self, latent: &Grid, timestep: usize, cond: &ViewConditioning) -> Result<DenoiserOutput, DiffusionError> {
        let req = DenoiseRequest::new(latent, timestep, cond, false)?;
        let resp: DenoiseResponse = self.lookup("denoise", &req)?;
        Ok(resp.into_output(&req, latent)?)
    }
}

impl LatentDecoder for ReplayBackend {
    fn decode(&self, latent: &Grid) -> Result<Grid, CodecError> {
        let req = DecodeRequest::new(latent).map_err(CodecError::from)?;
        let resp: DecodeResponse = self.lookup("decode", &req)?;
        Ok(resp.into_image(&req)?)
    }
}

impl DiffusionService for ReplayBackend {
    fn txt2img(&self, prompt: &str) -> Result<GuidanceImage, BackendError> {
        let resp: Txt2ImgResponse = self.lookup(
            "txt2img",
            &Txt2ImgRequest {
                prompt: prompt.into(),
            },
        )?;
        resp.into_image()
    }

    fn register_image(&self, png: &[u8]) -> Result<String, BackendError> {
        let resp: RegisterImageResponse =
            self.lookup("register_image", &RegisterImageRequest { png: b64_encode(png) })?;
        Ok(resp.handle)
    }
}
