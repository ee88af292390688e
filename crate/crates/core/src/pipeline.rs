//! End-to-end texturing run: load, orient, normalize, sample, decode, bake,
//! export.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::{backproject, TextureAtlas};
use crate::backend::{ClientConfig, DiffusionService, Recorder, RemoteDenoiser, ReplayBackend};
use crate::camera::ViewSchedule;
use crate::codec::{LatentDecoder, PixelShuffleCodec};
use crate::config::{Mode, RunConfig};
use crate::diffusion::{sync_sample, Denoiser, NoiseSchedule, StepRecord, SyncParams, ToyDenoiser, ViewConditioning};
use crate::geometry::{self, MaterialRef, Mesh, Similarity};
use crate::grid::Grid;
use crate::guidance;
use crate::imageio;
use crate::raster::{rasterize_all, sample_atlas, Filter, RasterFrame, RasterOptions};

/// Reported PSNR for numerically identical inputs.
pub const PSNR_CEILING_DB: f64 = 200.0;

pub const TEXTURE_FILE: &str = "texture.png";
pub const OBJ_FILE: &str = "mesh.obj";
pub const MTL_FILE: &str = "mesh.mtl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    LoadMesh,
    Orient,
    Schedule,
    Rasterize,
    Connect,
    Guidance,
    Sampling,
    Decode,
    Bake,
    Export,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from));
        f.write_str(s.as_deref().unwrap_or("?"))
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            source: Box::new(e),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    /// Chart texels of the pixel atlas, including the dilation margin.
    pub chart_texels: usize,
    /// Chart texels written directly by at least one view.
    pub visible_texels: usize,
    pub visible_fraction: f64,
    pub foreground_pixels: Vec<usize>,
    /// Latent-atlas coverage at the first synchronized step.
    pub latent_atlas_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub texture: PathBuf,
    pub obj: PathBuf,
    pub mtl: PathBuf,
    pub views: Vec<PathBuf>,
    pub depth: Vec<PathBuf>,
    pub report: PathBuf,
    pub guidance_image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMetrics {
    /// Baked texture vs. the same bake applied to exact target renders, on
    /// texels visible from at least one view.
    pub psnr_vs_oracle_db: f64,
    /// Baked texture vs. the target texture itself on the same texels.
    pub psnr_vs_target_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub timings: Vec<StageTiming>,
    pub total_seconds: f64,
    pub coverage: CoverageStats,
    pub outputs: OutputPaths,
    pub prompts: Vec<String>,
    pub guidance_handle: Option<String>,
    pub normalization: Similarity,
    pub latent_channels: usize,
    pub steps: Vec<StepRecord>,
    pub toy: Option<ToyMetrics>,
    /// Effective configuration; rerunning it reproduces the run.
    pub config: RunConfig,
}

/// Result of a run kept in memory for callers that inspect more than files.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub texture: TextureAtlas,
    pub texture_png: Vec<u8>,
}

/// `n×n` RGB checkerboard with `cells` squares per side.
pub fn checkerboard(size: usize, cells: usize) -> Grid {
    let a = [0.92, 0.78, 0.20];
    let b = [0.10, 0.25, 0.60];
    let mut g = Grid::zeros(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let parity = (x * cells / size + y * cells / size) % 2;
            g.pixel_mut(y * size + x).copy_from_slice(if parity == 0 { &a } else { &b });
        }
    }
    g
}

/// PSNR for values in `[0, 1]` over the texels where `mask` is set.
pub fn masked_psnr(a: &TextureAtlas, b: &TextureAtlas, mask: &[bool]) -> f64 {
    let c = a.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for (t, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for k in 0..c {
            let d = a.value(t)[k].clamp(0.0, 1.0) - b.value(t)[k].clamp(0.0, 1.0);
            sum += d * d;
        }
        n += c;
    }
    if n == 0 {
        return 0.0;
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return PSNR_CEILING_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CEILING_DB)
}

/// Bakes pixel-space views into an atlas. Returns the filled atlas and the
/// mask of texels written directly by some view.
pub fn bake(
    template: &TextureAtlas,
    frames: &[RasterFrame],
    views: &[Grid],
    weight_exponent: f64,
) -> Result<(TextureAtlas, Vec<bool>), crate::atlas::AtlasError> {
    let scatters = frames
        .par_iter()
        .zip(views.par_iter())
        .map(|(f, g)| backproject(f, g, weight_exponent, template.width(), template.height()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut atlas = template.cleared();
    atlas.aggregate(&scatters)?;
    let visible: Vec<bool> = atlas
        .valid()
        .iter()
        .zip(atlas.chart_mask())
        .map(|(v, c)| *v && *c)
        .collect();
    atlas.voronoi_fill()?;
    Ok((atlas, visible))
}

#[derive(Debug, Error)]
#[error("{0}")]
struct Message(String);

fn msg(m: impl Into<String>) -> Box<dyn std::error::Error + Send + Sync> {
    Box::new(Message(m.into()))
}

/// Opens the service named by the config's endpoint.
pub fn connect_service(cfg: &RunConfig) -> Result<Box<dyn DiffusionService>, PipelineError> {
    let endpoint = cfg.endpoint.as_deref().ok_or_else(|| PipelineError {
        stage: Stage::Config,
        source: msg("no endpoint configured"),
    })?;
    if let Some(dir) = endpoint.strip_prefix("replay:") {
        return Ok(Box::new(ReplayBackend::load(dir).at(Stage::Connect)?));
    }
    let client = RemoteDenoiser::connect(ClientConfig {
        endpoint: endpoint.into(),
        timeout_ms: cfg.timeout_ms,
        retries: cfg.retries,
        max_in_flight: cfg.max_in_flight,
        cfg_server_side: false,
    })
    .at(Stage::Connect)?;
    let client = if cfg.record {
        client.with_recorder(Recorder::new(cfg.out.join("replay")).at(Stage::Connect)?)
    } else {
        client
    };
    Ok(Box::new(client))
}

/// Runs the configured pipeline, connecting to a service if the mode needs one.
pub fn run(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    cfg.validate().at(Stage::Config)?;
    let service = match cfg.mode {
        Mode::Toy => None,
        Mode::Text | Mode::Image => Some(connect_service(cfg)?),
    };
    Ok(run_with(cfg, service.as_deref())?.report)
}

/// Runs with an explicit service (ignored in toy mode).
pub fn run_with(cfg: &RunConfig, service: Option<&dyn DiffusionService>) -> Result<RunArtifacts, PipelineError> {
    cfg.validate().at(Stage::Config)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .at(Stage::Config)?;
    pool.install(|| run_inner(cfg, service))
}

struct Clock {
    start: Instant,
    last: Instant,
    timings: Vec<StageTiming>,
}

impl Clock {
    fn new() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            timings: Vec::new(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        let seconds = (now - self.last).as_secs_f64();
        log::info!("{stage}: {seconds:.3}s");
        self.timings.push(StageTiming { stage, seconds });
        self.last = now;
    }
}

fn run_inner(cfg: &RunConfig, service: Option<&dyn DiffusionService>) -> Result<RunArtifacts, PipelineError> {
    let mut clock = Clock::new();
    let mesh_path = cfg.mesh.as_ref().expect("validated");
    let source_mesh = geometry::load_obj(mesh_path).at(Stage::LoadMesh)?;
    clock.lap(Stage::LoadMesh);

    let oriented = geometry::apply_orientation(&source_mesh, &cfg.orientation);
    let normalization = oriented.unit_sphere_transform();
    let mesh = oriented.transformed(&normalization);
    clock.lap(Stage::Orient);

    let schedule = ViewSchedule::from_angles(&cfg.view_angles(), cfg.camera_distance, cfg.fov_y, cfg.pixel_view_size)
        .at(Stage::Schedule)?;
    let noise = NoiseSchedule::linear(cfg.train_steps, cfg.beta_start, cfg.beta_end, cfg.ddim_count)
        .at(Stage::Schedule)?;
    let base_prompt = cfg.prompt.clone().unwrap_or_default();
    let prompts = if base_prompt.trim().is_empty() {
        Vec::new()
    } else {
        guidance::direction_prompts(&base_prompt, schedule.poses(), &cfg.direction_bins).at(Stage::Schedule)?
    };
    clock.lap(Stage::Schedule);

    let opts = RasterOptions {
        cull_backfaces: cfg.cull_backfaces,
    };
    let pixel_frames = rasterize_all(&mesh, schedule.poses(), opts).at(Stage::Rasterize)?;
    let depth_pngs = pixel_frames
        .par_iter()
        .map(|f| f.depth_png_bytes())
        .collect::<Result<Vec<_>, _>>()
        .at(Stage::Rasterize)?;
    clock.lap(Stage::Rasterize);

    let views = schedule.len();
    let mut conditioning: Vec<ViewConditioning> = (0..views)
        .map(|v| ViewConditioning {
            view: v,
            prompt: prompts.get(v).cloned().unwrap_or_default(),
            negative_prompt: cfg.negative_prompt.clone(),
            depth_png: depth_pngs[v].clone(),
            image_guidance: None,
            image_scale: cfg.image_scale,
            cfg_scale: cfg.cfg_scale,
        })
        .collect();

    let mut guidance_png = None;
    let mut guidance_handle = None;
    let toy;
    let denoiser: &dyn Denoiser;
    let decoder: &dyn LatentDecoder;
    let latent_channels;
    let toy_state;
    match cfg.mode {
        Mode::Toy => {
            let codec = PixelShuffleCodec::for_sizes(cfg.pixel_view_size, cfg.latent_size).at(Stage::Guidance)?;
            let target = TextureAtlas::from_grid(&checkerboard(cfg.toy_texture_size, cfg.toy_checker_cells));
            let target_views = pixel_frames
                .par_iter()
                .map(|f| sample_atlas(&target, f, Filter::Bilinear))
                .collect::<Result<Vec<_>, _>>()
                .at(Stage::Guidance)?;
            let target_latents = target_views
                .iter()
                .map(|g| codec.encode(g))
                .collect::<Result<Vec<_>, _>>()
                .at(Stage::Guidance)?;
            latent_channels = codec.latent_channels();
            toy_state = Some((codec, ToyDenoiser::new(target_latents, &noise), target, target_views));
            let (codec, toy_denoiser, _, _) = toy_state.as_ref().expect("just set");
            denoiser = toy_denoiser;
            decoder = codec;
            toy = true;
        }
        Mode::Text | Mode::Image => {
            let service = service.ok_or_else(|| PipelineError {
                stage: Stage::Connect,
                source: msg(format!("{} mode needs a diffusion service", cfg.mode)),
            })?;
            let handle = if cfg.mode == Mode::Text {
                let image = crate::backend::fetch_guidance_image(service, base_prompt.trim()).at(Stage::Guidance)?;
                guidance_png = Some(image.png);
                image.handle
            } else {
                let path = cfg.image.as_ref().expect("validated");
                let png = imageio::read_file(path).at(Stage::Guidance)?;
                imageio::decode_png(&png).at(Stage::Guidance)?;
                let handle = service.register_image(&png).at(Stage::Guidance)?;
                guidance_png = Some(png);
                handle
            };
            for c in &mut conditioning {
                c.image_guidance = Some(handle.clone());
            }
            guidance_handle = Some(handle);
            latent_channels = cfg.latent_channels;
            toy_state = None;
            denoiser = service;
            decoder = service;
            toy = false;
        }
    }
    clock.lap(Stage::Guidance);

    let latent_poses: Vec<_> = schedule.with_size(cfg.latent_size).poses().to_vec();
    let params = SyncParams {
        warp_steps: cfg.warp_steps,
        cfg_scale: cfg.cfg_scale,
        eta: cfg.eta,
        seed: cfg.seed,
        latent_channels,
        atlas_width: cfg.latent_atlas_size,
        atlas_height: cfg.latent_atlas_size,
        weight_exponent: cfg.weight_exponent,
        dilation_margin: cfg.dilation_margin,
        renoise: cfg.renoise,
        cull_backfaces: cfg.cull_backfaces,
        divergence_bound: (cfg.divergence_bound > 0.0).then_some(cfg.divergence_bound),
    };
    let sampled = sync_sample(&mesh, &latent_poses, &noise, denoiser, &conditioning, &params).at(Stage::Sampling)?;
    clock.lap(Stage::Sampling);

    let decoded = sampled
        .views
        .par_iter()
        .map(|latent| decoder.decode(latent))
        .collect::<Result<Vec<_>, _>>()
        .at(Stage::Decode)?;
    for img in &decoded {
        if img.width() != cfg.pixel_view_size || img.height() != cfg.pixel_view_size {
            return Err(PipelineError {
                stage: Stage::Decode,
                source: msg(format!(
                    "decoded view is {}x{}, expected {}",
                    img.width(),
                    img.height(),
                    cfg.pixel_view_size
                )),
            });
        }
    }
    clock.lap(Stage::Decode);

    let mut template = TextureAtlas::for_mesh(&mesh, cfg.pixel_atlas_size, cfg.pixel_atlas_size, 3);
    template.dilate_chart_mask(cfg.dilation_margin);
    let (texture, visible) = bake(&template, &pixel_frames, &decoded, cfg.weight_exponent).at(Stage::Bake)?;
    let toy_metrics = match (&toy_state, toy) {
        (Some((_, _, target, target_views)), true) => {
            let (oracle, _) = bake(&template, &pixel_frames, target_views, cfg.weight_exponent).at(Stage::Bake)?;
            let mut reference = template.cleared();
            for t in 0..reference.texel_count() {
                let (i, j) = (t % reference.width(), t / reference.width());
                let uv = crate::atlas::texel_center_uv(i, j, reference.width(), reference.height());
                let v = bilinear_uv(target, uv);
                reference.set_texel(t, &v, 1.0);
            }
            Some(ToyMetrics {
                psnr_vs_oracle_db: masked_psnr(&texture, &oracle, &visible),
                psnr_vs_target_db: masked_psnr(&texture, &reference, &visible),
            })
        }
        _ => None,
    };
    clock.lap(Stage::Bake);

    let texture_png = texture.png_bytes().at(Stage::Export)?;
    let outputs = export(
        cfg,
        &source_mesh,
        &texture_png,
        &decoded,
        &depth_pngs,
        guidance_png.as_deref(),
    )?;
    clock.lap(Stage::Export);

    let visible_texels = visible.iter().filter(|v| **v).count();
    let chart_texels = template.chart_count();
    let report = RunReport {
        mode: cfg.mode,
        timings: clock.timings.clone(),
        total_seconds: clock.start.elapsed().as_secs_f64(),
        coverage: CoverageStats {
            chart_texels,
            visible_texels,
            visible_fraction: visible_texels as f64 / chart_texels.max(1) as f64,
            foreground_pixels: pixel_frames.iter().map(|f| f.foreground_count()).collect(),
            latent_atlas_coverage: sampled.steps.iter().find_map(|s| s.atlas_coverage),
        },
        outputs,
        prompts,
        guidance_handle,
        normalization,
        latent_channels,
        steps: sampled.steps,
        toy: toy_metrics,
        config: cfg.clone(),
    };
    let report_path = cfg.out.join(REPORT_FILE);
    let json = serde_json::to_vec_pretty(&report).at(Stage::Export)?;
    imageio::write_file(&report_path, &json).at(Stage::Export)?;
    Ok(RunArtifacts {
        report,
        texture,
        texture_png,
    })
}

/// Bilinear lookup in a fully valid atlas at `uv`.
fn bilinear_uv(atlas: &TextureAtlas, uv: [f64; 2]) -> Vec<f64> {
    let (w, h) = (atlas.width(), atlas.height());
    let x = (uv[0] * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let y = ((1.0 - uv[1]) * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    (0..atlas.channels())
        .map(|k| {
            let at = |i: usize, j: usize| atlas.value(j * w + i)[k];
            let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
            let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
        .collect()
}

fn export(
    cfg: &RunConfig,
    source_mesh: &Mesh,
    texture_png: &[u8],
    views: &[Grid],
    depth_pngs: &[Vec<u8>],
    guidance_png: Option<&[u8]>,
) -> Result<OutputPaths, PipelineError> {
    let out = &cfg.out;
    let mkdir = |p: &Path| std::fs::create_dir_all(p).at(Stage::Export);
    mkdir(out)?;
    mkdir(&out.join("views"))?;
    mkdir(&out.join("depth"))?;
    let texture = out.join(TEXTURE_FILE);
    imageio::write_file(&texture, texture_png).at(Stage::Export)?;
    let obj = out.join(OBJ_FILE);
    let mtl = out.join(MTL_FILE);
    geometry::export_obj(
        source_mesh,
        &obj,
        Some(&MaterialRef {
            mtl_file: MTL_FILE,
            texture_file: TEXTURE_FILE,
        }),
    )
    .at(Stage::Export)?;
    let mut view_paths = Vec::new();
    let mut depth_paths = Vec::new();
    for (i, (img, depth)) in views.iter().zip(depth_pngs).enumerate() {
        let vp = out.join("views").join(format!("view_{i:02}.png"));
        imageio::write_file(&vp, &imageio::rgb8_png_bytes(img).at(Stage::Export)?).at(Stage::Export)?;
        let dp = out.join("depth").join(format!("view_{i:02}.png"));
        imageio::write_file(&dp, depth).at(Stage::Export)?;
        view_paths.push(vp);
        depth_paths.push(dp);
    }
    let guidance_image = match guidance_png {
        Some(png) => {
            let p = out.join("guidance.png");
            imageio::write_file(&p, png).at(Stage::Export)?;
            Some(p)
        }
        None => None,
    };
    Ok(OutputPaths {
        texture,
        obj,
        mtl,
        views: view_paths,
        depth: depth_paths,
        report: out.join(REPORT_FILE),
        guidance_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_cells() {
        let g = checkerboard(8, 2);
        assert_eq!(g.at(0, 0), g.at(3, 3));
        assert_ne!(g.at(0, 0), g.at(4, 0));
        assert_eq!(g.at(0, 0), g.at(4, 4));
    }

    #[test]
    fn psnr_of_known_error() {
        let a = TextureAtlas::from_grid(&Grid::filled(2, 2, 3, 0.5));
        let b = TextureAtlas::from_grid(&Grid::filled(2, 2, 3, 0.6));
        let mask = vec![true; 4];
        assert!((masked_psnr(&a, &b, &mask) - 20.0).abs() < 1e-9);
        assert_eq!(masked_psnr(&a, &a, &mask), PSNR_CEILING_DB);
    }
}
