//! Text-to-texture over the HTTP protocol against the built-in toy service,
//! optionally recording the exchange as a replay fixture.
//!
//! `cargo run --example remote_denoiser -- [out_dir] [record_dir]`

use std::path::PathBuf;

use texsync::backend::{ClientConfig, LoopbackServer, Recorder, RemoteDenoiser, ToyServiceHandler};
use texsync::config::{Mode, RunConfig};
use texsync::diffusion::NoiseSchedule;
use texsync::pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("texsync-remote"));
    let record = args.next().map(PathBuf::from);

    let cfg = small_text_config(out);
    let sched = NoiseSchedule::linear(cfg.train_steps, cfg.beta_start, cfg.beta_end, cfg.ddim_count)?;
    let server = LoopbackServer::start(
        ToyServiceHandler::new(sched, cfg.pixel_view_size / cfg.latent_size, 11),
        4,
    )?;
    let mut client = RemoteDenoiser::connect(ClientConfig::new(server.endpoint()))?;
    if let Some(dir) = &record {
        client = client.with_recorder(Recorder::new(dir)?);
    }

    let artifacts = pipeline::run_with(&cfg, Some(&client))?;
    let log = server.request_log();
    for endpoint in ["POST /txt2img", "POST /denoise", "POST /decode"] {
        println!("{endpoint:>14}: {} calls", log.iter().filter(|l| *l == endpoint).count());
    }
    println!("guidance handle {:?}", artifacts.report.guidance_handle);
    println!("texture at {}", artifacts.report.outputs.texture.display());
    if let Some(dir) = record {
        println!("fixture recorded in {}", dir.display());
    }
    Ok(())
}

/// A deliberately small run so the recorded fixture stays compact.
pub fn small_text_config(out: PathBuf) -> RunConfig {
    RunConfig {
        mesh: Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/cube.obj")),
        mode: Mode::Text,
        prompt: Some("a painted wooden crate".into()),
        endpoint: Some("unused".into()),
        ddim_count: 4,
        warp_steps: 3,
        latent_size: 16,
        latent_atlas_size: 64,
        pixel_view_size: 64,
        pixel_atlas_size: 128,
        seed: 5,
        out,
        ..RunConfig::default()
    }
}
