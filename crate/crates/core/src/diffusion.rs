//! Noise schedule, DDIM stepping, classifier-free guidance and the
//! synchronized multi-view sampling loop.
//!
//! Noising follows the closed form `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε` with
//! `ᾱ_t = ∏_{s≤t}(1−β_s)` and the boundary `ᾱ₀ = 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atlas::{backproject, AtlasError, TextureAtlas};
use crate::camera::CameraPose;
use crate::geometry::Mesh;
use crate::grid::Grid;
use crate::raster::{rasterize_all, sample_atlas, Filter, RasterError, RasterFrame, RasterOptions};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    BadRange(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep order violated: t={t}, t_prev={t_prev}")]
    BadTimestepOrder { t: usize, t_prev: usize },
    #[error("timestep {0} outside the schedule")]
    BadTimestep(usize),
    #[error("denoiser unavailable: {0}")]
    DenoiserUnavailable(String),
    #[error("denoiser has no conditioning for view {0}")]
    UnknownView(usize),
    #[error("latent of view {view} diverged at step {step} (max |x| = {max_abs})")]
    Diverged { step: usize, view: usize, max_abs: f64 },
    #[error("sampling configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Atlas(#[from] AtlasError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    train_steps: usize,
    /// `betas[t-1] = β_t`.
    betas: Vec<f64>,
    /// `alpha_bar[t] = ᾱ_t` for `t ∈ [0, T]`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
    /// Strictly decreasing DDIM timesteps.
    ddim_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear β ramp over `train_steps` with `ddim_count` evenly strided
    /// sampling steps ending at `t = 1`.
    pub fn linear(
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        ddim_count: usize,
    ) -> Result<Self, DiffusionError> {
        if ddim_count == 0 || ddim_count > train_steps {
            return Err(DiffusionError::BadRange(format!(
                "need train_steps ({train_steps}) >= ddim_count ({ddim_count}) >= 1"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::BadRange(format!(
                "need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
            )));
        }
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| {
                if train_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(train_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let stride = train_steps / ddim_count;
        let ddim_steps = (0..ddim_count).rev().map(|i| i * stride + 1).collect();
        Ok(Self {
            train_steps,
            betas,
            alpha_bar,
            ddim_steps,
        })
    }

    /// T = 1000, β ∈ [1e-4, 0.02].
    pub fn default_with_steps(ddim_count: usize) -> Result<Self, DiffusionError> {
        Self::linear(1000, 1e-4, 0.02, ddim_count)
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn ddim_steps(&self) -> &[usize] {
        &self.ddim_steps
    }

    /// `(t, t_prev)` for every DDIM step; the last pair ends at `t_prev = 0`.
    pub fn step_pairs(&self) -> Vec<(usize, usize)> {
        self.ddim_steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.ddim_steps.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.train_steps {
            return Err(DiffusionError::BadTimestep(t));
        }
        Ok(())
    }
}

fn check_shapes(a: &Grid, b: &Grid, what: &str) -> Result<(), DiffusionError> {
    if !a.same_shape(b) {
        return Err(DiffusionError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Closed-form forward noising to timestep `t`.
pub fn add_noise(x0: &Grid, eps: &Grid, t: usize, sched: &NoiseSchedule) -> Result<Grid, DiffusionError> {
    check_shapes(x0, eps, "add_noise")?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    Ok(x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// One DDIM update from `t` to `t_prev`. Returns `(x_prev, x0_pred)`.
///
/// `σ = η·√((1−ᾱ_prev)/(1−ᾱ_t)·(1−ᾱ_t/ᾱ_prev))`; the stochastic term is only
/// drawn from `rng` when `σ > 0`.
pub fn ddim_step<R: rand::Rng + ?Sized>(
    x_t: &Grid,
    eps_hat: &Grid,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<(Grid, Grid), DiffusionError> {
    check_shapes(x_t, eps_hat, "ddim_step")?;
    if t <= t_prev {
        return Err(DiffusionError::BadTimestepOrder { t, t_prev });
    }
    sched.check_t(t)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(DiffusionError::BadRange(format!("eta {eta} outside [0, 1]")));
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let x0_pred = x_t.axpby(1.0 / ab_t.sqrt(), eps_hat, -(1.0 - ab_t).sqrt() / ab_t.sqrt());
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut x_prev = x0_pred.axpby(ab_prev.sqrt(), eps_hat, dir);
    if sigma > 0.0 {
        for v in x_prev.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
    Ok((x_prev, x0_pred))
}

/// Conditional and unconditional noise predictions for one latent.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_cond: Grid,
    pub eps_uncond: Grid,
}

/// `ε_uncond + scale·(ε_cond − ε_uncond)`.
pub fn cfg_combine(out: &DenoiserOutput, scale: f64) -> Result<Grid, DiffusionError> {
    check_shapes(&out.eps_cond, &out.eps_uncond, "cfg_combine")?;
    Ok(out.eps_uncond.axpby(1.0 - scale, &out.eps_cond, scale))
}

/// Everything a denoiser may condition one view on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewConditioning {
    pub view: usize,
    /// Prompt with its direction suffix.
    pub prompt: String,
    pub negative_prompt: String,
    /// 16-bit depth PNG of the view.
    #[serde(skip)]
    pub depth_png: Vec<u8>,
    /// Handle of the shared guidance image, if any.
    pub image_guidance: Option<String>,
    pub image_scale: f64,
    pub cfg_scale: f64,
}

impl ViewConditioning {
    pub fn bare(view: usize) -> Self {
        Self {
            view,
            ..Default::default()
        }
    }
}

/// A noise predictor `ε_θ(x_t, y, d, t)`.
pub trait Denoiser: Sync {
    fn query(
        &self,
        latent: &Grid,
        timestep: usize,
        cond: &ViewConditioning,
    ) -> Result<DenoiserOutput, DiffusionError>;

    /// Whether `query` may be called from several threads at once. When false
    /// the sampling loop queries views one at a time.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Stateless oracle denoiser that predicts exactly the noise separating the
/// query from a fixed per-view target, so DDIM converges to the target.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    targets: Vec<Grid>,
    alpha_bar: Vec<f64>,
}

impl ToyDenoiser {
    pub fn new(targets: Vec<Grid>, sched: &NoiseSchedule) -> Self {
        Self {
            targets,
            alpha_bar: sched.alpha_bar.clone(),
        }
    }

    pub fn targets(&self) -> &[Grid] {
        &self.targets
    }
}

impl Denoiser for ToyDenoiser {
    fn query(&self, latent: &Grid, timestep: usize, cond: &ViewConditioning) -> Result<DenoiserOutput, DiffusionError> {
        let target = self
            .targets
            .get(cond.view)
            .ok_or(DiffusionError::UnknownView(cond.view))?;
        check_shapes(latent, target, "toy denoiser")?;
        let ab = *self
            .alpha_bar
            .get(timestep)
            .ok_or(DiffusionError::BadTimestep(timestep))?;
        if timestep == 0 {
            return Err(DiffusionError::BadTimestep(0));
        }
        let eps = latent.axpby(1.0 / (1.0 - ab).sqrt(), target, -ab.sqrt() / (1.0 - ab).sqrt());
        Ok(DenoiserOutput {
            eps_uncond: eps.clone(),
            eps_cond: eps,
        })
    }
}

/// Unit-normal initial latent for `view`, drawn from its own stream of the
/// seeded generator so views are independent of evaluation order.
pub fn view_rng(seed: u64, view: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(view as u64);
    rng
}

pub fn standard_normal_grid<R: rand::Rng + ?Sized>(
    width: usize,
    height: usize,
    channels: usize,
    rng: &mut R,
) -> Grid {
    let data = (0..width * height * channels)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Grid::from_vec(width, height, channels, data).expect("sized to shape")
}

/// Queries the denoiser and applies CFG and one DDIM update for one view.
#[allow(clippy::too_many_arguments)]
fn denoise_step<D: Denoiser + ?Sized, R: rand::Rng>(
    denoiser: &D,
    x: &Grid,
    cond: &ViewConditioning,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    cfg_scale: f64,
    eta: f64,
    rng: &mut R,
) -> Result<StepResult, DiffusionError> {
    let out = denoiser.query(x, t, cond)?;
    if !out.eps_cond.same_shape(x) || !out.eps_uncond.same_shape(x) {
        return Err(DiffusionError::ShapeMismatch(format!(
            "denoiser returned {:?}/{:?} for latent {:?}",
            out.eps_cond.shape(),
            out.eps_uncond.shape(),
            x.shape()
        )));
    }
    let eps = cfg_combine(&out, cfg_scale)?;
    let (x_prev, x0) = ddim_step(x, &eps, t, t_prev, sched, eta, rng)?;
    Ok(StepResult { x_prev, x0, eps })
}

struct StepResult {
    x_prev: Grid,
    x0: Grid,
    eps: Grid,
}

/// Plain single-view DDIM sampling from `x_start` over the whole schedule.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_start: Grid,
    cond: &ViewConditioning,
    sched: &NoiseSchedule,
    cfg_scale: f64,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Grid, DiffusionError> {
    let mut x = x_start;
    for (t, t_prev) in sched.step_pairs() {
        x = denoise_step(denoiser, &x, cond, t, t_prev, sched, cfg_scale, eta, rng)?.x_prev;
    }
    Ok(x)
}

/// Noise used to bring warped `x₀` back to `t_prev`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renoise {
    /// Reuse the step's guided noise prediction (keeps the DDIM update intact).
    PredictedNoise,
    /// Draw fresh unit-normal noise from the view's generator.
    FreshNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncParams {
    /// The first `warp_steps` DDIM steps synchronize views through the atlas.
    pub warp_steps: usize,
    pub cfg_scale: f64,
    pub eta: f64,
    pub seed: u64,
    pub latent_channels: usize,
    pub atlas_width: usize,
    pub atlas_height: usize,
    pub weight_exponent: f64,
    pub dilation_margin: usize,
    pub renoise: Renoise,
    pub cull_backfaces: bool,
    /// Abort when any latent leaves `[-bound, bound]`; `None` disables the check.
    pub divergence_bound: Option<f64>,
}

impl Default for SyncParams {
    fn default() -> Self {
        Self {
            warp_steps: 24,
            cfg_scale: 12.0,
            eta: 0.0,
            seed: 0,
            latent_channels: 4,
            atlas_width: 256,
            atlas_height: 256,
            weight_exponent: 2.0,
            dilation_margin: 4,
            renoise: Renoise::PredictedNoise,
            cull_backfaces: true,
            divergence_bound: Some(10.0),
        }
    }
}

/// Per-step trace of the sampling loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub warped: bool,
    /// Largest `|x|` over all views after the step.
    pub max_abs: f64,
    /// Fraction of latent-atlas chart texels written directly by some view.
    pub atlas_coverage: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SyncOutput {
    /// Final per-view clean latents.
    pub views: Vec<Grid>,
    /// Latent atlas aggregated and filled from the final views.
    pub atlas: TextureAtlas,
    /// Latent-resolution frames used for warping.
    pub frames: Vec<RasterFrame>,
    pub steps: Vec<StepRecord>,
}

struct ViewState {
    x: Grid,
    rng: ChaCha8Rng,
}

/// Shared latent atlas for `frames`: backproject each view, aggregate in view
/// order and fill.
pub fn bake_views(
    template: &TextureAtlas,
    frames: &[RasterFrame],
    views: &[Grid],
    weight_exponent: f64,
) -> Result<TextureAtlas, DiffusionError> {
    let scatters = frames
        .par_iter()
        .zip(views.par_iter())
        .map(|(f, g)| backproject(f, g, weight_exponent, template.width(), template.height()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut atlas = template.cleared();
    atlas.aggregate(&scatters)?;
    atlas.voronoi_fill()?;
    Ok(atlas)
}

/// Synchronized multi-view DDIM sampling.
///
/// Each view starts from independent seeded noise. At every step each view is
/// denoised independently (CFG, then DDIM). During the first `warp_steps`
/// steps the views' `x₀` predictions are back-projected into one shared latent
/// atlas, aggregated, filled, sampled back, and re-noised to `t_prev`,
/// replacing the foreground latents; background latents are left alone.
pub fn sync_sample<D: Denoiser + ?Sized>(
    mesh: &Mesh,
    poses: &[CameraPose],
    sched: &NoiseSchedule,
    denoiser: &D,
    conditioning: &[ViewConditioning],
    params: &SyncParams,
) -> Result<SyncOutput, DiffusionError> {
    if params.warp_steps > sched.ddim_steps().len() {
        return Err(DiffusionError::Config(format!(
            "warp_steps {} exceeds {} DDIM steps",
            params.warp_steps,
            sched.ddim_steps().len()
        )));
    }
    if conditioning.len() != poses.len() {
        return Err(DiffusionError::Config(format!(
            "{} conditioning entries for {} views",
            conditioning.len(),
            poses.len()
        )));
    }
    let frames = rasterize_all(
        mesh,
        poses,
        RasterOptions {
            cull_backfaces: params.cull_backfaces,
        },
    )?;
    let mut template = TextureAtlas::for_mesh(mesh, params.atlas_width, params.atlas_height, params.latent_channels);
    template.dilate_chart_mask(params.dilation_margin);

    let mut states: Vec<ViewState> = poses
        .iter()
        .enumerate()
        .map(|(v, pose)| {
            let mut rng = view_rng(params.seed, v);
            let x = standard_normal_grid(pose.image_size, pose.image_size, params.latent_channels, &mut rng);
            ViewState { x, rng }
        })
        .collect();

    let mut steps = Vec::new();
    for (i, (t, t_prev)) in sched.step_pairs().into_iter().enumerate() {
        let step = |(state, cond): (&mut ViewState, &ViewConditioning)| {
            denoise_step(
                denoiser,
                &state.x,
                cond,
                t,
                t_prev,
                sched,
                params.cfg_scale,
                params.eta,
                &mut state.rng,
            )
        };
        let results: Vec<StepResult> = if denoiser.concurrent() {
            states
                .par_iter_mut()
                .zip(conditioning.par_iter())
                .map(step)
                .collect::<Result<_, _>>()?
        } else {
            states
                .iter_mut()
                .zip(conditioning.iter())
                .map(step)
                .collect::<Result<_, _>>()?
        };

        let warped = i < params.warp_steps;
        let mut coverage = None;
        if warped {
            let x0s: Vec<Grid> = results.iter().map(|r| r.x0.clone()).collect();
            let scatters = frames
                .par_iter()
                .zip(x0s.par_iter())
                .map(|(f, g)| backproject(f, g, params.weight_exponent, template.width(), template.height()))
                .collect::<Result<Vec<_>, _>>()?;
            let mut atlas = template.cleared();
            atlas.aggregate(&scatters)?;
            coverage = Some(atlas.chart_coverage());
            atlas.voronoi_fill()?;

            let ab_prev = sched.alpha_bar(t_prev);
            let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            states
                .par_iter_mut()
                .zip(results.into_par_iter())
                .zip(frames.par_iter())
                .try_for_each(|((state, res), frame)| -> Result<(), DiffusionError> {
                    let synced = sample_atlas(&atlas, frame, Filter::Nearest)?;
                    let noise = match params.renoise {
                        Renoise::PredictedNoise => res.eps,
                        Renoise::FreshNoise => standard_normal_grid(
                            synced.width(),
                            synced.height(),
                            synced.channels(),
                            &mut state.rng,
                        ),
                    };
                    let mut x = res.x_prev;
                    for p in 0..frame.pixel_count() {
                        if !frame.is_foreground(p) {
                            continue;
                        }
                        let (s, e) = (synced.pixel(p), noise.pixel(p));
                        for (k, dst) in x.pixel_mut(p).iter_mut().enumerate() {
                            *dst = a * s[k] + b * e[k];
                        }
                    }
                    state.x = x;
                    Ok(())
                })?;
        } else {
            for (state, res) in states.iter_mut().zip(results) {
                state.x = res.x_prev;
            }
        }

        let mut max_abs = 0.0_f64;
        for (v, state) in states.iter().enumerate() {
            let m = state.x.max_abs();
            let finite = state.x.is_finite();
            if !finite || params.divergence_bound.is_some_and(|bound| m > bound) {
                return Err(DiffusionError::Diverged {
                    step: i,
                    view: v,
                    max_abs: if finite { m } else { f64::NAN },
                });
            }
            max_abs = max_abs.max(m);
        }
        log::debug!("step {i}: t={t} -> {t_prev}, warped={warped}, max|x|={max_abs:.3}");
        steps.push(StepRecord {
            t,
            t_prev,
            warped,
            max_abs,
            atlas_coverage: coverage,
        });
    }

    let views: Vec<Grid> = states.into_iter().map(|s| s.x).collect();
    let atlas = bake_views(&template, &frames, &views, params.weight_exponent)?;
    Ok(SyncOutput {
        views,
        atlas,
        frames,
        steps,
    })
}
