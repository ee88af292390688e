//! Run configuration: a TOML file, then `key=value` overrides, then defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::Renoise;
use crate::geometry::OrientationRemap;
use crate::guidance::DirectionBins;
use crate::raster::MIN_FRAME_SIZE;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    Type { key: String, message: String },
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
    #[error("override {0:?} is not of the form key=value")]
    MalformedOverride(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// In-process toy denoiser reconstructing a checkerboard texture.
    Toy,
    /// Text-to-texture through a diffusion service.
    Text,
    /// Image-to-texture through a diffusion service with a user image.
    Image,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Toy => "toy",
            Mode::Text => "text",
            Mode::Image => "image",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Input OBJ with UVs.
    pub mesh: Option<PathBuf>,
    /// Signed axis remap applied before normalization, e.g. `"x,z,-y"`.
    pub orientation: OrientationRemap,
    pub mode: Mode,
    pub prompt: Option<String>,
    pub negative_prompt: String,
    /// Guidance image for image mode.
    pub image: Option<PathBuf>,
    /// Service base URL, or `replay:<dir>` for a recorded fixture.
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    /// Record every service exchange under `<out>/replay`.
    pub record: bool,
    /// `(azimuth, elevation)` pairs in degrees; the eight-view orbit if unset.
    pub views: Option<Vec<[f64; 2]>>,
    pub camera_distance: f64,
    pub fov_y: f64,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_count: usize,
    pub warp_steps: usize,
    pub cfg_scale: f64,
    pub image_scale: f64,
    pub eta: f64,
    pub renoise: Renoise,
    pub latent_size: usize,
    /// Latent channels in service modes; toy mode derives its own.
    pub latent_channels: usize,
    pub latent_atlas_size: usize,
    pub pixel_view_size: usize,
    pub pixel_atlas_size: usize,
    pub weight_exponent: f64,
    pub dilation_margin: usize,
    pub cull_backfaces: bool,
    pub direction_bins: DirectionBins,
    /// Toy target texture side and checker cells per side.
    pub toy_texture_size: usize,
    pub toy_checker_cells: usize,
    pub seed: u64,
    /// Worker threads; all cores if unset.
    pub workers: Option<usize>,
    /// Abort when a latent leaves `[-bound, bound]`; `0` disables the check.
    pub divergence_bound: f64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mesh: None,
            orientation: OrientationRemap::IDENTITY,
            mode: Mode::Toy,
            prompt: None,
            negative_prompt: String::new(),
            image: None,
            endpoint: None,
            timeout_ms: 120_000,
            retries: 2,
            max_in_flight: 8,
            record: false,
            views: None,
            camera_distance: crate::camera::DEFAULT_DISTANCE,
            fov_y: crate::camera::DEFAULT_FOV_Y,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_count: 30,
            warp_steps: 24,
            cfg_scale: 12.0,
            image_scale: 0.6,
            eta: 0.0,
            renoise: Renoise::PredictedNoise,
            latent_size: 64,
            latent_channels: 4,
            latent_atlas_size: 256,
            pixel_view_size: 512,
            pixel_atlas_size: 1024,
            weight_exponent: 2.0,
            dilation_margin: 4,
            cull_backfaces: true,
            direction_bins: DirectionBins::default(),
            toy_texture_size: 256,
            toy_checker_cells: 8,
            seed: 0,
            workers: None,
            divergence_bound: 10.0,
            out: PathBuf::from("out"),
        }
    }
}

/// Every top-level key accepted in files and overrides.
pub const KEYS: &[&str] = &[
    "mesh",
    "orientation",
    "mode",
    "prompt",
    "negative_prompt",
    "image",
    "endpoint",
    "timeout_ms",
    "retries",
    "max_in_flight",
    "record",
    "views",
    "camera_distance",
    "fov_y",
    "train_steps",
    "beta_start",
    "beta_end",
    "ddim_count",
    "warp_steps",
    "cfg_scale",
    "image_scale",
    "eta",
    "renoise",
    "latent_size",
    "latent_channels",
    "latent_atlas_size",
    "pixel_view_size",
    "pixel_atlas_size",
    "weight_exponent",
    "dilation_margin",
    "cull_backfaces",
    "direction_bins",
    "toy_texture_size",
    "toy_checker_cells",
    "seed",
    "workers",
    "divergence_bound",
    "out",
];

/// Canonical key spelling: dashes become underscores.
pub fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_")
}

/// Parses an override value as a TOML value, falling back to a plain string.
pub fn parse_value(text: &str) -> toml::Value {
    let text = text.trim();
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

/// Keys whose values are always taken verbatim as strings.
const STRING_KEYS: &[&str] = &[
    "mesh",
    "orientation",
    "mode",
    "prompt",
    "negative_prompt",
    "image",
    "endpoint",
    "renoise",
    "out",
];

/// Parses the value for `key`, keeping string-typed keys verbatim so a
/// prompt such as `1984` stays text.
pub fn parse_value_for(key: &str, text: &str) -> toml::Value {
    if STRING_KEYS.contains(&key) {
        toml::Value::String(text.into())
    } else {
        parse_value(text)
    }
}

/// Splits `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, toml::Value), ConfigError> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| ConfigError::MalformedOverride(arg.into()))?;
    let key = normalize_key(k);
    if key.is_empty() {
        return Err(ConfigError::MalformedOverride(arg.into()));
    }
    let value = parse_value_for(&key, v);
    Ok((key, value))
}

impl RunConfig {
    /// Builds a config from an optional TOML document and ordered overrides.
    /// Later overrides win; dotted keys such as `direction_bins.top_min`
    /// address nested tables.
    pub fn from_sources(document: Option<&str>, overrides: &[(String, toml::Value)]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = match document {
            Some(text) => toml::from_str(text).map_err(|e| ConfigError::File {
                path: "<document>".into(),
                message: e.to_string(),
            })?,
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            insert_dotted(&mut table, key, value.clone())?;
        }
        Self::from_table(table)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, toml::Value)]) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_sources(Some(&text), overrides).map_err(|e| match e {
            ConfigError::File { message, .. } => ConfigError::File {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        for key in table.keys() {
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let mut cfg = Self::default();
        // Fields are deserialized one at a time so errors name their key.
        let mut merged = toml::Table::try_from(&cfg).expect("defaults serialize");
        for (key, value) in table {
            let probe = toml::Table::from_iter([(key.clone(), value.clone())]);
            let single: Result<Self, _> = probe.try_into();
            if let Err(e) = single {
                let message = e.message().to_string();
                if let Some(field) = message
                    .strip_prefix("unknown field `")
                    .and_then(|m| m.split('`').next())
                {
                    return Err(ConfigError::UnknownKey(format!("{key}.{field}")));
                }
                return Err(ConfigError::Type { key, message });
            }
            merged.insert(key, value);
        }
        cfg = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Type {
            key: "<config>".into(),
            message: e.message().to_string(),
        })?;
        Ok(cfg)
    }

    /// Checks cross-field invariants and mode requirements.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.warp_steps > self.ddim_count {
            return bad(format!(
                "warp_steps ({}) must not exceed ddim_count ({})",
                self.warp_steps, self.ddim_count
            ));
        }
        if self.ddim_count == 0 || self.ddim_count > self.train_steps {
            return bad(format!(
                "ddim_count must be in [1, train_steps = {}], got {}",
                self.train_steps, self.ddim_count
            ));
        }
        if self.mesh.is_none() {
            return bad("`mesh` is required".into());
        }
        for (name, v) in [
            ("latent_size", self.latent_size),
            ("pixel_view_size", self.pixel_view_size),
            ("latent_atlas_size", self.latent_atlas_size),
            ("pixel_atlas_size", self.pixel_atlas_size),
        ] {
            if v < MIN_FRAME_SIZE {
                return bad(format!("{name} must be at least {MIN_FRAME_SIZE}, got {v}"));
            }
        }
        if !(self.image_scale >= 0.0) {
            return bad(format!("image_scale must be non-negative, got {}", self.image_scale));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must be in [0, 1], got {}", self.eta));
        }
        if !(self.divergence_bound >= 0.0) {
            return bad("divergence_bound must be non-negative".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        if self.weight_exponent < 0.0 {
            return bad("weight_exponent must be non-negative".into());
        }
        match self.mode {
            Mode::Toy => {
                if self.pixel_view_size % self.latent_size != 0 {
                    return bad(format!(
                        "toy mode needs pixel_view_size ({}) divisible by latent_size ({})",
                        self.pixel_view_size, self.latent_size
                    ));
                }
                if self.toy_checker_cells == 0 || self.toy_texture_size < self.toy_checker_cells {
                    return bad("toy_checker_cells must be in [1, toy_texture_size]".into());
                }
            }
            Mode::Text | Mode::Image => {
                if self.endpoint.is_none() {
                    return bad(format!("{} mode requires `endpoint`", self.mode));
                }
                if self.mode == Mode::Text && self.prompt.as_deref().map_or(true, |p| p.trim().is_empty()) {
                    return bad("text mode requires a non-empty `prompt`".into());
                }
                if self.mode == Mode::Image && self.image.is_none() {
                    return bad("image mode requires `image`".into());
                }
                if self.latent_channels == 0 {
                    return bad("latent_channels must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// `(azimuth, elevation)` list in effect.
    pub fn view_angles(&self) -> Vec<(f64, f64)> {
        match &self.views {
            Some(v) => v.iter().map(|[a, e]| (*a, *e)).collect(),
            None => crate::camera::EIGHT_VIEW_ANGLES.to_vec(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn insert_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(ConfigError::Type {
                    key: key.into(),
                    message: format!("`{part}` is not a table"),
                })
            }
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[&str]) -> Vec<(String, toml::Value)> {
        pairs.iter().map(|p| parse_override(p).unwrap()).collect()
    }

    #[test]
    fn defaults_match_the_reference_settings() {
        let cfg = RunConfig::from_sources(Some(""), &ov(&["mesh=a.obj", "mode=toy"])).unwrap();
        assert_eq!((cfg.ddim_count, cfg.warp_steps), (30, 24));
        assert_eq!((cfg.cfg_scale, cfg.image_scale), (12.0, 0.6));
        assert_eq!(cfg.mesh, Some(PathBuf::from("a.obj")));
        cfg.validate().unwrap();
    }

    #[test]
    fn keys_list_covers_every_field() {
        let full = RunConfig {
            mesh: Some("m".into()),
            prompt: Some("p".into()),
            image: Some("i".into()),
            endpoint: Some("e".into()),
            views: Some(vec![[0.0, 0.0]]),
            workers: Some(1),
            ..RunConfig::default()
        };
        let table = toml::Table::try_from(&full).unwrap();
        let mut keys: Vec<&str> = table.keys().map(String::as_str).collect();
        let mut expect = KEYS.to_vec();
        keys.sort();
        expect.sort();
        assert_eq!(keys, expect);
    }

    #[test]
    fn warp_steps_may_not_exceed_ddim_count() {
        let cfg = RunConfig::from_sources(None, &ov(&["mesh=a.obj", "ddim_count=10", "warp_steps=24"])).unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(m)) if m.contains("warp_steps")));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_sources(None, &ov(&["warp_stepz=3"])).unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "warp_stepz"));
        assert!(err.to_string().contains("warp_stepz"));
        let err = RunConfig::from_sources(Some("[direction_bins]\nfront = 3.0\n"), &[]).unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "direction_bins.front"), "{err}");
    }

    #[test]
    fn type_errors_name_their_key() {
        let err = RunConfig::from_sources(None, &ov(&["ddim_count=many"])).unwrap_err();
        assert!(matches!(&err, ConfigError::Type { key, .. } if key == "ddim_count"), "{err}");
        let err = RunConfig::from_sources(None, &ov(&["orientation=x,x,z"])).unwrap_err();
        assert!(matches!(&err, ConfigError::Type { key, .. } if key == "orientation"), "{err}");
    }

    #[test]
    fn overrides_beat_the_file() {
        let doc = "mesh = \"a.obj\"\nseed = 5\ncfg_scale = 7.5\n[direction_bins]\ntop_min = 70.0\n";
        let cfg = RunConfig::from_sources(Some(doc), &ov(&["seed=9", "--fov-y=50", "direction_bins.front_max=30"])).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.cfg_scale, 7.5);
        assert_eq!(cfg.fov_y, 50.0);
        assert_eq!(cfg.direction_bins.top_min, 70.0);
        assert_eq!(cfg.direction_bins.front_max, 30.0);
        assert_eq!(cfg.orientation, OrientationRemap::IDENTITY);
    }

    #[test]
    fn values_parse_as_toml_or_strings() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("0.5"), toml::Value::Float(0.5));
        assert_eq!(parse_value("true"), toml::Value::Boolean(true));
        assert_eq!(parse_value("a wooden chair"), toml::Value::String("a wooden chair".into()));
        assert_eq!(parse_value("\"quoted\""), toml::Value::String("quoted".into()));
        let views = RunConfig::from_sources(None, &ov(&["views=[[0, 0], [90, 15]]"])).unwrap();
        assert_eq!(views.view_angles(), vec![(0.0, 0.0), (90.0, 15.0)]);
        let remap = RunConfig::from_sources(None, &ov(&["orientation=x,z,-y"])).unwrap();
        assert_eq!(remap.orientation.to_string(), "x,z,-y");
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn mode_requirements() {
        let text = RunConfig::from_sources(None, &ov(&["mesh=a.obj", "mode=text", "prompt=a chair"])).unwrap();
        assert!(matches!(text.validate(), Err(ConfigError::Invalid(m)) if m.contains("endpoint")));
        let image = RunConfig::from_sources(None, &ov(&["mesh=a.obj", "mode=image", "endpoint=http://x"])).unwrap();
        assert!(matches!(image.validate(), Err(ConfigError::Invalid(m)) if m.contains("image")));
        let cfg = RunConfig::from_sources(None, &ov(&["mesh=a.obj", "pixel_view_size=500"])).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            mesh: Some("m.obj".into()),
            views: Some(vec![[10.0, 5.0]]),
            ..RunConfig::default()
        };
        let back = RunConfig::from_sources(Some(&cfg.to_toml()), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
