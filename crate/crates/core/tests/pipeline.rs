use std::path::{Path, PathBuf};
use std::process::Command;

use texsync::backend::{ClientConfig, LoopbackServer, RemoteDenoiser, ToyServiceHandler};
use texsync::config::{Mode, RunConfig};
use texsync::diffusion::NoiseSchedule;
use texsync::geometry::load_obj;
use texsync::grid::Grid;
use texsync::imageio;
use texsync::pipeline::{self, RunReport, Stage};

fn asset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

fn small_toy(out: &Path) -> RunConfig {
    RunConfig {
        mesh: Some(asset("sphere.obj")),
        mode: Mode::Toy,
        ddim_count: 6,
        warp_steps: 4,
        latent_size: 16,
        latent_atlas_size: 64,
        pixel_view_size: 128,
        pixel_atlas_size: 256,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn small_remote(mode: Mode, out: &Path) -> RunConfig {
    RunConfig {
        mesh: Some(asset("cube.obj")),
        mode,
        prompt: Some("a painted wooden crate".into()),
        endpoint: Some("unused".into()),
        ddim_count: 4,
        warp_steps: 3,
        latent_size: 16,
        latent_atlas_size: 64,
        pixel_view_size: 64,
        pixel_atlas_size: 128,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn toy_server(cfg: &RunConfig) -> LoopbackServer {
    let sched = NoiseSchedule::linear(cfg.train_steps, cfg.beta_start, cfg.beta_end, cfg.ddim_count).unwrap();
    LoopbackServer::start(ToyServiceHandler::new(sched, cfg.pixel_view_size / cfg.latent_size, 3), 4).unwrap()
}

#[test]
fn toy_run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_toy(dir.path());
    let report = pipeline::run(&cfg).unwrap();

    for name in ["texture.png", "mesh.obj", "mesh.mtl", "report.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    assert_eq!(report.outputs.views.len(), 8);
    assert_eq!(report.outputs.depth.len(), 8);
    for p in report.outputs.views.iter().chain(&report.outputs.depth) {
        let png = imageio::decode_png(&std::fs::read(p).unwrap()).unwrap();
        assert_eq!((png.width, png.height), (128, 128));
    }
    let texture = imageio::decode_png(&std::fs::read(&report.outputs.texture).unwrap()).unwrap();
    assert_eq!((texture.width, texture.height), (256, 256));

    let parsed: RunReport = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(parsed.config, cfg);
    assert_eq!(parsed.steps.len(), 6);
    assert_eq!(parsed.steps.iter().filter(|s| s.warped).count(), 4);
    let stages: Vec<Stage> = parsed.timings.iter().map(|t| t.stage).collect();
    assert!(stages.contains(&Stage::Sampling) && stages.contains(&Stage::Bake));
    let toy = parsed.toy.unwrap();
    assert!(toy.psnr_vs_oracle_db >= 30.0, "{toy:?}");
    assert!(parsed.coverage.visible_fraction > 0.3 && parsed.coverage.visible_fraction <= 1.0);
    let mtl = std::fs::read_to_string(dir.path().join("mesh.mtl")).unwrap();
    assert!(mtl.contains("map_Kd texture.png"));
}

#[test]
fn echoed_config_reproduces_the_texture() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline::run(&small_toy(a.path())).unwrap();
    let echoed = RunConfig {
        out: b.path().to_path_buf(),
        ..first.config.clone()
    };
    pipeline::run(&echoed).unwrap();
    assert_eq!(
        std::fs::read(a.path().join("texture.png")).unwrap(),
        std::fs::read(b.path().join("texture.png")).unwrap()
    );
}

#[test]
fn exported_mesh_keeps_source_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        orientation: "x,z,-y".parse().unwrap(),
        ..small_toy(dir.path())
    };
    let report = pipeline::run(&cfg).unwrap();
    let source = load_obj(asset("sphere.obj")).unwrap();
    let exported = load_obj(&report.outputs.obj).unwrap();
    assert_eq!(source.faces.len(), exported.faces.len());
    for (a, b) in source.positions.iter().zip(&exported.positions) {
        assert!((a - b).norm() < 1e-12);
    }
    for (a, b) in source.uvs.iter().zip(&exported.uvs) {
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }
}

#[test]
fn text_mode_without_endpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let cfg = RunConfig {
        endpoint: None,
        ..small_remote(Mode::Text, &out)
    };
    let err = pipeline::run(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    assert!(!out.exists());
}

#[test]
fn text_mode_fetches_one_shared_guidance_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_remote(Mode::Text, dir.path());
    let server = toy_server(&cfg);
    let remote = RemoteDenoiser::connect(ClientConfig::new(server.endpoint())).unwrap();
    let artifacts = pipeline::run_with(&cfg, Some(&remote)).unwrap();
    let log = server.request_log();
    assert_eq!(log.iter().filter(|l| *l == "POST /txt2img").count(), 1);
    assert_eq!(log.iter().filter(|l| *l == "POST /denoise").count(), 4 * 8);
    assert_eq!(log.iter().filter(|l| *l == "POST /decode").count(), 8);
    let report = artifacts.report;
    assert!(report.guidance_handle.is_some());
    assert!(report.outputs.guidance_image.as_ref().unwrap().is_file());
    assert!(report.prompts[3].ends_with(", from front view"));
    assert!(report.prompts[0].ends_with(", from back view"));
}

#[test]
fn image_mode_issues_no_txt2img() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("guide.png");
    imageio::write_file(&image, &imageio::rgb8_png_bytes(&Grid::filled(32, 32, 3, 0.4)).unwrap()).unwrap();
    let cfg = RunConfig {
        image: Some(image),
        ..small_remote(Mode::Image, &dir.path().join("out"))
    };
    let server = toy_server(&cfg);
    let remote = RemoteDenoiser::connect(ClientConfig::new(server.endpoint())).unwrap();
    let report = pipeline::run_with(&cfg, Some(&remote)).unwrap().report;
    let log = server.request_log();
    assert!(!log.iter().any(|l| l.ends_with("/txt2img")), "{log:?}");
    assert_eq!(log.iter().filter(|l| *l == "POST /register_image").count(), 1);
    assert!(report.guidance_handle.is_some());
}

#[test]
fn replay_endpoint_runs_offline() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/replay");
    let cfg = RunConfig {
        endpoint: Some(format!("replay:{}", fixtures.display())),
        seed: 5,
        ..small_remote(Mode::Text, dir.path())
    };
    let report = pipeline::run(&cfg).unwrap();
    assert!(report.outputs.texture.is_file());

    let other_seed = RunConfig {
        seed: 6,
        out: dir.path().join("miss"),
        ..cfg
    };
    let err = pipeline::run(&other_seed).unwrap_err();
    assert_eq!(err.stage, Stage::Sampling);
}

#[test]
fn errors_carry_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        mesh: Some(dir.path().join("missing.obj")),
        ..small_toy(dir.path())
    };
    let err = pipeline::run(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::LoadMesh);
    assert!(err.to_string().starts_with("load_mesh stage failed"));
}

fn texsync() -> Command {
    Command::new(env!("CARGO_BIN_EXE_texsync"))
}

#[test]
fn cli_runs_toy_mode_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let status = texsync()
        .arg(format!("--mesh={}", asset("sphere.obj").display()))
        .args(["--mode", "toy", "--ddim-count=5", "--warp_steps=3", "--latent-size=16"])
        .args(["--pixel-view-size=64", "--latent-atlas-size=64", "--pixel-atlas-size=128"])
        .arg(format!("--out={}", dir.path().display()))
        .arg("direction_bins.front_max=40")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report: RunReport = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.config.ddim_count, 5);
    assert_eq!(report.config.direction_bins.front_max, 40.0);
}

#[test]
fn cli_reports_config_problems() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_file = dir.path().join("run.toml");
    std::fs::write(&cfg_file, "mesh = \"m.obj\"\nddim_count = 10\n").unwrap();
    let out = texsync().arg("--config").arg(&cfg_file).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_steps"));

    std::fs::write(&cfg_file, "mesh = \"m.obj\"\ncolour = 3\n").unwrap();
    let out = texsync().arg("--config").arg(&cfg_file).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    std::fs::write(&cfg_file, "").unwrap();
    let out = texsync()
        .arg("--config")
        .arg(&cfg_file)
        .args(["--mesh", "m.obj", "--print-config"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let effective: RunConfig = toml::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(
        (effective.ddim_count, effective.warp_steps, effective.cfg_scale, effective.image_scale),
        (30, 24, 12.0, 0.6)
    );

    let out = texsync().args(["--mesh", "m.obj", "--mode", "text", "--prompt", "a cup"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("endpoint"));
}
