use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::replay::Recorder;
use super::{
    b64_encode, BackendError, DecodeRequest, DecodeResponse, DenoiseRequest, DenoiseResponse, DiffusionService,
    ErrorBody, GuidanceImage, HealthResponse, RegisterImageRequest, RegisterImageResponse, Txt2ImgRequest,
    Txt2ImgResponse,
};
use crate::codec::{CodecError, LatentDecoder};
use crate::diffusion::{Denoiser, DenoiserOutput, DiffusionError, ViewConditioning};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`.
    pub endpoint: String,
    /// Per-request timeout.
    pub timeout_ms: u64,
    /// Extra attempts after a transport failure or 5xx answer.
    pub retries: u32,
    /// Maximum concurrent in-flight requests.
    pub max_in_flight: usize,
    pub cfg_server_side: bool,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            ..Self::default()
        }
    }
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000".into(),
            timeout_ms: 120_000,
            retries: 2,
            max_in_flight: 8,
            cfg_server_side: false,
        }
    }
}

struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Blocking HTTP client for the diffusion service.
pub struct RemoteDenoiser {
    config: ClientConfig,
    agent: ureq::Agent,
    slots: Slots,
    recorder: Option<Recorder>,
}

impl std::fmt::Debug for RemoteDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteDenoiser").field("config", &self.config).finish()
    }
}

impl RemoteDenoiser {
    /// Builds the client and probes `/health`.
    pub fn connect(config: ClientConfig) -> Result<Self, BackendError> {
        let client = Self::new_unchecked(config);
        let health = client.health()?;
        if health.status != "ok" {
            return Err(BackendError::Protocol(format!("service reports status {:?}", health.status)));
        }
        Ok(client)
    }

    /// Builds the client without contacting the service.
    pub fn new_unchecked(config: ClientConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        Self {
            slots: Slots::new(config.max_in_flight),
            config,
            agent,
            recorder: None,
        }
    }

    /// Records every exchange into a replay fixture directory.
    pub fn with_recorder(mut self, recorder: Recorder) -> Self {
        self.recorder = Some(recorder);
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.endpoint.trim_end_matches('/'))
    }

    pub fn health(&self) -> Result<HealthResponse, BackendError> {
        let url = self.url("/health");
        let text = self.with_retries(&url, || self.agent.get(&url).call())?;
        parse(&text)
    }

    fn with_retries(
        &self,
        url: &str,
        send: impl Fn() -> Result<ureq::Response, ureq::Error>,
    ) -> Result<String, BackendError> {
        let _slot = self.slots.acquire();
        let mut last = None;
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
                log::warn!("retrying {url} (attempt {})", attempt + 1);
            }
            match send() {
                Ok(resp) => {
                    return resp.into_string().map_err(|e| BackendError::Transport {
                        url: url.into(),
                        message: e.to_string(),
                    })
                }
                Err(ureq::Error::Status(status, resp)) => {
                    let body = resp.into_string().unwrap_or_default();
                    let message = serde_json::from_str::<ErrorBody>(&body).map(|b| b.error).unwrap_or(body);
                    let err = BackendError::Status {
                        url: url.into(),
                        status,
                        message,
                    };
                    if status < 500 {
                        return Err(err);
                    }
                    last = Some(err);
                }
                Err(ureq::Error::Transport(t)) => {
                    last = Some(BackendError::Transport {
                        url: url.into(),
                        message: t.to_string(),
                    })
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, kind: &str, body: &B) -> Result<R, BackendError> {
        let url = self.url(path);
        let bytes = serde_json::to_vec(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let text = self.with_retries(&url, || {
            self.agent
                .post(&url)
                .set("Content-Type", "application/json")
                .send_bytes(&bytes)
        })?;
        if let Some(rec) = &self.recorder {
            rec.record(kind, &bytes, text.as_bytes())?;
        }
        parse(&text)
    }

    pub fn denoise(&self, request: &DenoiseRequest) -> Result<DenoiseResponse, BackendError> {
        self.post("/denoise", "denoise", request)
    }

    pub fn decode_latent(&self, latent: &Grid) -> Result<Grid, BackendError> {
        let req = DecodeRequest::new(latent)?;
        let resp: DecodeResponse = self.post("/decode", "decode", &req)?;
        resp.into_image(&req)
    }
}

fn parse<R: DeserializeOwned>(text: &str) -> Result<R, BackendError> {
    serde_json::from_str(text).map_err(|e| BackendError::Protocol(e.to_string()))
}

impl Denoiser for RemoteDenoiser {
    fn query(&self, latent: &Grid, timestep: usize, cond: &ViewConditioning) -> Result<DenoiserOutput, DiffusionError> {
        let req = DenoiseRequest::new(latent, timestep, cond, self.config.cfg_server_side)?;
        Ok(self.denoise(&req)?.into_output(&req, latent)?)
    }
}

impl LatentDecoder for RemoteDenoiser {
    fn decode(&self, latent: &Grid) -> Result<Grid, CodecError> {
        Ok(self.decode_latent(latent)?)
    }
}

impl DiffusionService for RemoteDenoiser {
    fn txt2img(&self, prompt: &str) -> Result<GuidanceImage, BackendError> {
        let resp: Txt2ImgResponse = self.post(
            "/txt2img",
            "txt2img",
            &Txt2ImgRequest {
                prompt: prompt.into(),
            },
        )?;
        resp.into_image()
    }

    fn register_image(&self, png: &[u8]) -> Result<String, BackendError> {
        let resp: RegisterImageResponse = self.post(
            "/register_image",
            "register_image",
            &RegisterImageRequest { png: b64_encode(png) },
        )?;
        Ok(resp.handle)
    }
}
