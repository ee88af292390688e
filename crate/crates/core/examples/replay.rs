//! Offline text-to-texture run served entirely from recorded fixtures.
//!
//! `cargo run --example replay -- [fixture_dir] [out_dir]`
//!
//! The default fixture was recorded by `remote_denoiser`; the run config
//! here must match the recording exactly.

use std::path::PathBuf;

use texsync::backend::ReplayBackend;
use texsync::config::{Mode, RunConfig};
use texsync::pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let fixtures = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("texsync-replay"));

    let backend = ReplayBackend::load(&fixtures)?;
    println!("{} recorded exchanges", backend.len());
    let cfg = RunConfig {
        mesh: Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/cube.obj")),
        mode: Mode::Text,
        prompt: Some("a painted wooden crate".into()),
        endpoint: Some(format!("replay:{}", fixtures.display())),
        ddim_count: 4,
        warp_steps: 3,
        latent_size: 16,
        latent_atlas_size: 64,
        pixel_view_size: 64,
        pixel_atlas_size: 128,
        seed: 5,
        out,
        ..RunConfig::default()
    };
    let report = pipeline::run_with(&cfg, Some(&backend))?.report;
    let served = backend.served();
    println!(
        "served {} denoise, {} decode, {} txt2img",
        served.iter().filter(|k| *k == "denoise").count(),
        served.iter().filter(|k| *k == "decode").count(),
        served.iter().filter(|k| *k == "txt2img").count()
    );
    println!("texture at {}", report.outputs.texture.display());
    Ok(())
}
