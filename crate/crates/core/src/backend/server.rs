//! In-process HTTP service speaking the backend protocol on loopback.
//!
//! It backs the client tests, the replay fixtures and toy runs of the text and
//! image modes. Behavior comes from a [`ServiceHandler`].

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{
    b64_decode, b64_encode, decode_tensor, encode_tensor, DecodeRequest, DecodeResponse, DenoiseRequest,
    DenoiseResponse, ErrorBody, HealthResponse, RegisterImageRequest, RegisterImageResponse, Txt2ImgRequest,
    Txt2ImgResponse,
};
use crate::diffusion::NoiseSchedule;
use crate::grid::Grid;
use crate::imageio;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandlerError {
    pub status: u16,
    pub message: String,
}

impl HandlerError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: 400,
            message: message.into(),
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: 404,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            status: 500,
            message: message.into(),
        }
    }
}

pub trait ServiceHandler: Send + Sync + 'static {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse, HandlerError>;

    fn txt2img(&self, _req: &Txt2ImgRequest) -> Result<Txt2ImgResponse, HandlerError> {
        Err(HandlerError::not_found("txt2img not supported"))
    }

    fn register_image(&self, _req: &RegisterImageRequest) -> Result<RegisterImageResponse, HandlerError> {
        Err(HandlerError::not_found("register_image not supported"))
    }

    fn decode(&self, _req: &DecodeRequest) -> Result<DecodeResponse, HandlerError> {
        Err(HandlerError::not_found("decode not supported"))
    }
}

/// A running loopback server. Stops when dropped.
pub struct LoopbackServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    log: Arc<Mutex<Vec<String>>>,
    workers: Vec<JoinHandle<()>>,
}

impl LoopbackServer {
    /// Binds an ephemeral loopback port and serves with `workers` threads.
    pub fn start(handler: impl ServiceHandler, workers: usize) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("server bound to a non-IP address"))?;
        let server = Arc::new(server);
        let handler: Arc<dyn ServiceHandler> = Arc::new(handler);
        let stop = Arc::new(AtomicBool::new(false));
        let log = Arc::new(Mutex::new(Vec::new()));
        let workers = (0..workers.max(1))
            .map(|_| {
                let (server, handler, stop, log) = (server.clone(), handler.clone(), stop.clone(), log.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        match server.recv_timeout(Duration::from_millis(20)) {
                            Ok(Some(rq)) => serve(rq, handler.as_ref(), &log),
                            Ok(None) => {}
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(Self {
            addr,
            stop,
            log,
            workers,
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// `"METHOD /path"` of every request received, in arrival order.
    pub fn request_log(&self) -> Vec<String> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn serve(mut rq: tiny_http::Request, handler: &dyn ServiceHandler, log: &Mutex<Vec<String>>) {
    let method = rq.method().to_string();
    let url = rq.url().to_string();
    log.lock().unwrap_or_else(|e| e.into_inner()).push(format!("{method} {url}"));
    let mut body = Vec::new();
    let result = match rq.as_reader().read_to_end(&mut body) {
        Err(e) => Err(HandlerError::bad_request(e.to_string())),
        Ok(_) => match (method.as_str(), url.as_str()) {
            ("GET", "/health") => to_json(&HealthResponse {
                status: "ok".into(),
                model: Some("loopback".into()),
            }),
            ("POST", "/denoise") => call(&body, |r| handler.denoise(r)),
            ("POST", "/txt2img") => call(&body, |r| handler.txt2img(r)),
            ("POST", "/register_image") => call(&body, |r| handler.register_image(r)),
            ("POST", "/decode") => call(&body, |r| handler.decode(r)),
            _ => Err(HandlerError::not_found(format!("no route for {method} {url}"))),
        },
    };
    let (status, text) = match result {
        Ok(text) => (200, text),
        Err(e) => (
            e.status,
            serde_json::to_string(&ErrorBody { error: e.message }).unwrap_or_default(),
        ),
    };
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = rq.respond(
        tiny_http::Response::from_string(text)
            .with_status_code(status)
            .with_header(header),
    );
}

fn call<Q: DeserializeOwned, R: Serialize>(
    body: &[u8],
    f: impl FnOnce(&Q) -> Result<R, HandlerError>,
) -> Result<String, HandlerError> {
    let req: Q = serde_json::from_slice(body).map_err(|e| HandlerError::bad_request(e.to_string()))?;
    to_json(&f(&req)?)
}

fn to_json<R: Serialize>(r: &R) -> Result<String, HandlerError> {
    serde_json::to_string(r).map_err(|e| HandlerError::internal(e.to_string()))
}

/// Scripted denoise behavior for protocol tests.
#[derive(Debug, Clone, PartialEq)]
pub enum EchoHandler {
    /// `ε = 0`.
    Zero,
    /// `ε_cond = k·x`, `ε_uncond = 0`.
    Scale(f64),
    /// NaN payloads.
    Nan,
    /// Tensors one row too short.
    WrongShape,
    /// Sleeps, then answers like `Zero`.
    Delay(Duration),
    /// Always fails with 503.
    Unavailable,
}

impl ServiceHandler for EchoHandler {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse, HandlerError> {
        let x = decode_tensor(&req.latent).map_err(|e| HandlerError::bad_request(e.to_string()))?;
        let (w, h, c) = x.shape();
        let enc = |g: &Grid| encode_tensor(g).map_err(|e| HandlerError::internal(e.to_string()));
        let (cond, uncond) = match self {
            Self::Zero => (enc(&Grid::zeros(w, h, c))?, enc(&Grid::zeros(w, h, c))?),
            Self::Scale(k) => (enc(&x.axpby(*k, &x, 0.0))?, enc(&Grid::zeros(w, h, c))?),
            Self::Nan => {
                let mut p = enc(&Grid::zeros(w, h, c))?;
                let nan: Vec<u8> = (0..w * h * c).flat_map(|_| f32::NAN.to_le_bytes()).collect();
                p.data = b64_encode(&nan);
                (p.clone(), p)
            }
            Self::WrongShape => {
                let g = Grid::zeros(w, h.saturating_sub(1).max(1), c);
                (enc(&g)?, enc(&g)?)
            }
            Self::Delay(d) => {
                std::thread::sleep(*d);
                (enc(&Grid::zeros(w, h, c))?, enc(&Grid::zeros(w, h, c))?)
            }
            Self::Unavailable => return Err(HandlerError { status: 503, message: "warming up".into() }),
        };
        Ok(DenoiseResponse {
            id: req.id.clone(),
            eps_cond: cond,
            eps_uncond: uncond,
        })
    }
}

/// Deterministic stand-in for a real diffusion service.
///
/// Every prompt or guidance image maps to a solid color; denoising steers each
/// latent toward that color (latent channel `k` holds color component `k % 3`)
/// and `/decode` upsamples the first three channels by `pixel_factor`, or
/// pixel-shuffles when the latent has exactly `3·f²` channels.
#[derive(Debug)]
pub struct ToyServiceHandler {
    schedule: NoiseSchedule,
    pixel_factor: usize,
    seed: u64,
    images: Mutex<HashMap<String, [f64; 3]>>,
}

impl ToyServiceHandler {
    pub fn new(schedule: NoiseSchedule, pixel_factor: usize, seed: u64) -> Self {
        Self {
            schedule,
            pixel_factor: pixel_factor.max(1),
            seed,
            images: Mutex::new(HashMap::new()),
        }
    }

    /// Color a prompt (without direction suffix) maps to.
    pub fn prompt_color(&self, prompt: &str) -> [f64; 3] {
        let base = strip_direction_suffix(prompt);
        let digest = Sha256::digest(format!("{}:{base}", self.seed));
        [0, 1, 2].map(|i| 0.15 + 0.7 * digest[i] as f64 / 255.0)
    }

    fn remember(&self, handle: &str, color: [f64; 3]) {
        self.images
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(handle.to_string(), color);
    }
}

/// Removes a trailing `", from <label> view"`.
pub fn strip_direction_suffix(prompt: &str) -> &str {
    match prompt.rfind(", from ") {
        Some(i) if prompt.ends_with(" view") => &prompt[..i],
        _ => prompt,
    }
}

fn handle_of(bytes: &[u8]) -> String {
    let digest = format!("{:x}", Sha256::digest(bytes));
    format!("img-{}", &digest[..16])
}

impl ServiceHandler for ToyServiceHandler {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse, HandlerError> {
        let x = decode_tensor(&req.latent).map_err(|e| HandlerError::bad_request(e.to_string()))?;
        if req.timestep == 0 || req.timestep > self.schedule.train_steps() {
            return Err(HandlerError::bad_request(format!("timestep {} out of range", req.timestep)));
        }
        if !req.depth_png.is_empty() {
            let png = b64_decode(&req.depth_png).map_err(|e| HandlerError::bad_request(e.to_string()))?;
            imageio::decode_png(&png).map_err(|e| HandlerError::bad_request(format!("depth png: {e}")))?;
        }
        let color = match &req.image_guidance_id {
            Some(h) if req.image_scale > 0.0 => *self
                .images
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .get(h)
                .ok_or_else(|| HandlerError::not_found(format!("unknown image handle {h}")))?,
            _ => self.prompt_color(&req.prompt),
        };
        let ab = self.schedule.alpha_bar(req.timestep);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut eps = x.clone();
        for p in 0..eps.pixel_count() {
            for (k, v) in eps.pixel_mut(p).iter_mut().enumerate() {
                *v = (*v - a * color[k % 3]) / b;
            }
        }
        let payload = encode_tensor(&eps).map_err(|e| HandlerError::internal(e.to_string()))?;
        Ok(DenoiseResponse {
            id: req.id.clone(),
            eps_cond: payload.clone(),
            eps_uncond: payload,
        })
    }

    fn txt2img(&self, req: &Txt2ImgRequest) -> Result<Txt2ImgResponse, HandlerError> {
        if req.prompt.trim().is_empty() {
            return Err(HandlerError::bad_request("empty prompt"));
        }
        let color = self.prompt_color(&req.prompt);
        let mut img = Grid::zeros(64, 64, 3);
        for p in 0..img.pixel_count() {
            img.pixel_mut(p).copy_from_slice(&color);
        }
        let png = imageio::rgb8_png_bytes(&img).map_err(|e| HandlerError::internal(e.to_string()))?;
        let handle = handle_of(&png);
        self.remember(&handle, color);
        Ok(Txt2ImgResponse {
            handle,
            png: b64_encode(&png),
        })
    }

    fn register_image(&self, req: &RegisterImageRequest) -> Result<RegisterImageResponse, HandlerError> {
        let png = b64_decode(&req.png).map_err(|e| HandlerError::bad_request(e.to_string()))?;
        let img = imageio::decode_rgb(&png).map_err(|e| HandlerError::bad_request(e.to_string()))?;
        let mut mean = [0.0; 3];
        for p in 0..img.pixel_count() {
            for (m, v) in mean.iter_mut().zip(img.pixel(p)) {
                *m += v / img.pixel_count() as f64;
            }
        }
        let handle = handle_of(&png);
        self.remember(&handle, mean);
        Ok(RegisterImageResponse { handle })
    }

    fn decode(&self, req: &DecodeRequest) -> Result<DecodeResponse, HandlerError> {
        let x = decode_tensor(&req.latent).map_err(|e| HandlerError::bad_request(e.to_string()))?;
        let f = self.pixel_factor;
        let image = if x.channels() == 3 * f * f {
            x.pixel_shuffle(f).expect("channel count checked")
        } else if x.channels() >= 3 {
            let mut img = Grid::zeros(x.width() * f, x.height() * f, 3);
            for y in 0..img.height() {
                for xx in 0..img.width() {
                    let src = &x.at(xx / f, y / f)[..3];
                    img.pixel_mut(y * img.width() + xx).copy_from_slice(src);
                }
            }
            img
        } else {
            return Err(HandlerError::bad_request(format!("{} latent channels", x.channels())));
        };
        Ok(DecodeResponse {
            id: req.id.clone(),
            image: encode_tensor(&image).map_err(|e| HandlerError::internal(e.to_string()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_stripping() {
        assert_eq!(strip_direction_suffix("a chair, from front view"), "a chair");
        assert_eq!(strip_direction_suffix("a chair"), "a chair");
        assert_eq!(strip_direction_suffix("from here, from back view"), "from here");
    }
}
