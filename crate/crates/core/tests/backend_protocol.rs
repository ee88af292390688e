use std::net::TcpListener;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use texsync::backend::{
    encode_tensor, BackendError, ClientConfig, DenoiseRequest, DiffusionService, EchoHandler, LoopbackServer,
    Recorder, RemoteDenoiser, ReplayBackend, ToyServiceHandler,
};
use texsync::camera::{ViewSchedule, DEFAULT_DISTANCE, DEFAULT_FOV_Y};
use texsync::diffusion::{
    standard_normal_grid, sync_sample, view_rng, Denoiser, DiffusionError, NoiseSchedule, SyncParams,
    ViewConditioning,
};
use texsync::geometry::uv_sphere;
use texsync::grid::Grid;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay")
}

/// Grid whose values survive the f32 wire format unchanged.
fn f32_grid(w: usize, h: usize, c: usize, seed: u64) -> Grid {
    let g = standard_normal_grid(w, h, c, &mut ChaCha8Rng::seed_from_u64(seed));
    let data = g.as_slice().iter().map(|v| *v as f32 as f64).collect();
    Grid::from_vec(w, h, c, data).unwrap()
}

fn client(server: &LoopbackServer) -> RemoteDenoiser {
    RemoteDenoiser::connect(ClientConfig::new(server.endpoint())).expect("health probe")
}

#[test]
fn loopback_round_trip_is_bitwise() {
    let server = LoopbackServer::start(EchoHandler::Scale(1.0), 2).unwrap();
    let remote = client(&server);
    let x = f32_grid(16, 12, 4, 1);
    let out = remote.query(&x, 500, &ViewConditioning::bare(0)).unwrap();
    assert_eq!(out.eps_cond, x);
    assert_eq!(out.eps_uncond, Grid::zeros(16, 12, 4));
}

#[test]
fn identical_inputs_give_identical_request_bytes() {
    let x = f32_grid(8, 8, 4, 2);
    let mut cond = ViewConditioning::bare(3);
    cond.prompt = "a vase, from side view".into();
    let a = serde_json::to_vec(&DenoiseRequest::new(&x, 100, &cond, false).unwrap()).unwrap();
    let b = serde_json::to_vec(&DenoiseRequest::new(&x, 100, &cond, false).unwrap()).unwrap();
    assert_eq!(a, b);
    cond.prompt = "a vase, from back view".into();
    let c = serde_json::to_vec(&DenoiseRequest::new(&x, 100, &cond, false).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_echo_degenerates_to_ddim_rescaling() {
    let server = LoopbackServer::start(EchoHandler::Zero, 4).unwrap();
    let remote = client(&server);
    let sched = NoiseSchedule::default_with_steps(10).unwrap();
    let mesh = {
        let m = uv_sphere(16, 8);
        m.transformed(&m.unit_sphere_transform())
    };
    let views = ViewSchedule::eight_views(DEFAULT_DISTANCE, DEFAULT_FOV_Y, 8).unwrap();
    let cond: Vec<_> = (0..8).map(ViewConditioning::bare).collect();
    let params = SyncParams {
        warp_steps: 0,
        latent_channels: 4,
        atlas_width: 32,
        atlas_height: 32,
        divergence_bound: None,
        seed: 13,
        ..SyncParams::default()
    };
    let out = sync_sample(&mesh, views.poses(), &sched, &remote, &cond, &params).unwrap();

    // With zero noise prediction each step maps x_t to sqrt(ab_prev / ab_t) x_t,
    // so the whole trajectory is x_T / sqrt(ab_T) with ab_0 = 1.
    let gain = 1.0 / sched.alpha_bar(sched.ddim_steps()[0]).sqrt();
    for (v, got) in out.views.iter().enumerate() {
        let start = standard_normal_grid(8, 8, 4, &mut view_rng(13, v));
        let expected = start.axpby(gain, &start, 0.0);
        let rel = got.distance(&expected) / expected.distance(&Grid::zeros(8, 8, 4));
        assert!(rel < 1e-12, "view {v}: relative error {rel}");
    }
}

#[test]
fn nan_response_is_rejected() {
    let server = LoopbackServer::start(EchoHandler::Nan, 1).unwrap();
    let err = client(&server).query(&f32_grid(4, 4, 4, 3), 10, &ViewConditioning::bare(0));
    assert!(matches!(err, Err(DiffusionError::DenoiserUnavailable(_)) | Err(DiffusionError::ShapeMismatch(_))), "{err:?}");
    let direct = client(&server)
        .denoise(&DenoiseRequest::new(&f32_grid(4, 4, 4, 3), 10, &ViewConditioning::bare(0), false).unwrap())
        .and_then(|r| {
            let req = DenoiseRequest::new(&f32_grid(4, 4, 4, 3), 10, &ViewConditioning::bare(0), false)?;
            r.into_output(&req, &f32_grid(4, 4, 4, 3))
        });
    assert!(matches!(direct, Err(BackendError::NonFinite)), "{direct:?}");
}

#[test]
fn wrong_shape_response_is_rejected() {
    let server = LoopbackServer::start(EchoHandler::WrongShape, 1).unwrap();
    let err = client(&server).query(&f32_grid(4, 4, 4, 4), 10, &ViewConditioning::bare(0));
    assert!(matches!(err, Err(DiffusionError::ShapeMismatch(_))), "{err:?}");
}

#[test]
fn concurrent_queries_match_by_id() {
    let server = LoopbackServer::start(EchoHandler::Scale(2.0), 8).unwrap();
    let remote = client(&server);
    let latents: Vec<Grid> = (0..8).map(|i| f32_grid(8, 8, 4, 100 + i)).collect();
    let outputs: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = latents
            .iter()
            .enumerate()
            .map(|(v, x)| {
                let remote = &remote;
                s.spawn(move || remote.query(x, 700, &ViewConditioning::bare(v)).unwrap())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (x, out) in latents.iter().zip(&outputs) {
        assert_eq!(out.eps_cond, x.axpby(2.0, x, 0.0));
    }
    assert_eq!(server.request_log().iter().filter(|l| *l == "POST /denoise").count(), 8);
}

#[test]
fn unreachable_endpoint_fails_within_timeout() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = ClientConfig {
        timeout_ms: 500,
        retries: 1,
        ..ClientConfig::new(format!("http://127.0.0.1:{port}"))
    };
    let start = Instant::now();
    let err = RemoteDenoiser::connect(cfg).unwrap_err();
    assert!(matches!(err, BackendError::Transport { .. }), "{err:?}");
    assert!(start.elapsed() < Duration::from_secs(3));
}

#[test]
fn slow_server_times_out() {
    let server = LoopbackServer::start(EchoHandler::Delay(Duration::from_millis(1500)), 2).unwrap();
    let remote = RemoteDenoiser::connect(ClientConfig {
        timeout_ms: 200,
        retries: 1,
        ..ClientConfig::new(server.endpoint())
    })
    .unwrap();
    let start = Instant::now();
    assert!(remote.query(&f32_grid(4, 4, 4, 5), 10, &ViewConditioning::bare(0)).is_err());
    assert!(start.elapsed() < Duration::from_millis(1200), "{:?}", start.elapsed());
}

#[test]
fn server_errors_are_retried_then_reported() {
    let server = LoopbackServer::start(EchoHandler::Unavailable, 1).unwrap();
    let remote = RemoteDenoiser::connect(ClientConfig {
        retries: 2,
        ..ClientConfig::new(server.endpoint())
    })
    .unwrap();
    let req = DenoiseRequest::new(&f32_grid(4, 4, 4, 6), 10, &ViewConditioning::bare(0), false).unwrap();
    let err = remote.denoise(&req).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 503, .. }), "{err:?}");
    assert_eq!(server.request_log().iter().filter(|l| *l == "POST /denoise").count(), 3);
}

#[test]
fn txt2img_is_deterministic_per_prompt() {
    let sched = NoiseSchedule::default_with_steps(30).unwrap();
    let server = LoopbackServer::start(ToyServiceHandler::new(sched, 8, 1), 2).unwrap();
    let remote = client(&server);
    let a = remote.txt2img("a red kettle").unwrap();
    let b = remote.txt2img("a red kettle").unwrap();
    let c = remote.txt2img("a blue kettle").unwrap();
    assert_eq!(a, b);
    assert_ne!(a.handle, c.handle);
    assert!(texsync::imageio::decode_png(&a.png).is_ok());
}

#[test]
fn toy_service_rejects_unknown_handles_and_bad_depth() {
    let sched = NoiseSchedule::default_with_steps(30).unwrap();
    let server = LoopbackServer::start(ToyServiceHandler::new(sched, 8, 1), 1).unwrap();
    let remote = client(&server);
    let x = f32_grid(4, 4, 4, 7);
    let mut cond = ViewConditioning::bare(0);
    cond.image_guidance = Some("img-0000000000000000".into());
    cond.image_scale = 0.6;
    let err = remote.denoise(&DenoiseRequest::new(&x, 10, &cond, false).unwrap()).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 404, .. }), "{err:?}");

    let mut cond = ViewConditioning::bare(0);
    cond.depth_png = vec![1, 2, 3];
    let err = remote.denoise(&DenoiseRequest::new(&x, 10, &cond, false).unwrap()).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 400, .. }), "{err:?}");
}

#[test]
fn zero_image_scale_ignores_the_guidance_image() {
    let sched = NoiseSchedule::default_with_steps(30).unwrap();
    let server = LoopbackServer::start(ToyServiceHandler::new(sched, 8, 1), 1).unwrap();
    let remote = client(&server);
    let h1 = remote.txt2img("stone").unwrap().handle;
    let h2 = remote.txt2img("moss").unwrap().handle;
    let x = f32_grid(4, 4, 4, 8);
    let query = |handle: &str, scale: f64| {
        let mut cond = ViewConditioning::bare(0);
        cond.prompt = "a statue".into();
        cond.image_guidance = Some(handle.into());
        cond.image_scale = scale;
        remote.query(&x, 400, &cond).unwrap()
    };
    assert_eq!(query(&h1, 0.0), query(&h2, 0.0));
    assert_ne!(query(&h1, 0.6), query(&h2, 0.6));
}

#[test]
fn recorded_exchanges_replay_offline() {
    let sched = NoiseSchedule::default_with_steps(30).unwrap();
    let server = LoopbackServer::start(ToyServiceHandler::new(sched, 8, 1), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let remote = client(&server).with_recorder(Recorder::new(dir.path()).unwrap());
    let x = f32_grid(8, 8, 4, 9);
    let live_image = remote.txt2img("a brass lamp").unwrap();
    let live = remote.query(&x, 300, &ViewConditioning::bare(2)).unwrap();
    let live_decoded = texsync::codec::LatentDecoder::decode(&remote, &x).unwrap();
    drop(server);

    let replay = ReplayBackend::load(dir.path()).unwrap();
    assert_eq!(replay.len(), 3);
    assert_eq!(replay.txt2img("a brass lamp").unwrap(), live_image);
    assert_eq!(replay.query(&x, 300, &ViewConditioning::bare(2)).unwrap(), live);
    assert_eq!(texsync::codec::LatentDecoder::decode(&replay, &x).unwrap(), live_decoded);
    assert!(replay.query(&x, 301, &ViewConditioning::bare(2)).is_err());
    assert!(matches!(replay.txt2img("something else"), Err(BackendError::ReplayMiss { .. })));
}

#[test]
fn bundled_fixture_loads_and_validates() {
    let replay = ReplayBackend::load(fixtures()).unwrap();
    assert_eq!(replay.len(), 41);
    for entry in std::fs::read_dir(fixtures()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if name.ends_with("-denoise.request.json") {
            let req: DenoiseRequest = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
            assert!(req.id_is_consistent(), "{name}");
            assert_eq!(req.latent.shape.len(), 3);
        }
    }
}

#[test]
fn encoded_payload_size_matches_shape() {
    let p = encode_tensor(&f32_grid(3, 2, 5, 10)).unwrap();
    assert_eq!(p.shape, vec![5, 2, 3]);
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD.decode(&p.data).unwrap();
    assert_eq!(bytes.len(), 4 * 30);
}
