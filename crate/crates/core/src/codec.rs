//! Latent ↔ image conversion.

use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("decoder unavailable: {0}")]
    Unavailable(String),
}

/// Turns a view latent into an RGB image in `[0, 1]`.
pub trait LatentDecoder: Sync {
    fn decode(&self, latent: &Grid) -> Result<Grid, CodecError>;
}

/// Lossless space-to-depth codec used by toy mode: an `f·S` RGB image maps to
/// an `S×S` latent with `3·f²` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelShuffleCodec {
    factor: usize,
}

impl PixelShuffleCodec {
    pub fn new(factor: usize) -> Result<Self, CodecError> {
        if factor == 0 {
            return Err(CodecError::ShapeMismatch("factor must be positive".into()));
        }
        Ok(Self { factor })
    }

    /// Codec mapping `pixel_size` images to `latent_size` latents.
    pub fn for_sizes(pixel_size: usize, latent_size: usize) -> Result<Self, CodecError> {
        if latent_size == 0 || pixel_size % latent_size != 0 {
            return Err(CodecError::ShapeMismatch(format!(
                "pixel size {pixel_size} is not a multiple of latent size {latent_size}"
            )));
        }
        Self::new(pixel_size / latent_size)
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }

    pub fn encode(&self, image: &Grid) -> Result<Grid, CodecError> {
        if image.channels() != 3 {
            return Err(CodecError::ShapeMismatch(format!("{} image channels, expected 3", image.channels())));
        }
        image.pixel_unshuffle(self.factor).ok_or_else(|| {
            CodecError::ShapeMismatch(format!(
                "{}x{} image is not divisible by {}",
                image.width(),
                image.height(),
                self.factor
            ))
        })
    }
}

impl LatentDecoder for PixelShuffleCodec {
    fn decode(&self, latent: &Grid) -> Result<Grid, CodecError> {
        if latent.channels() != self.latent_channels() {
            return Err(CodecError::ShapeMismatch(format!(
                "{} latent channels, expected {}",
                latent.channels(),
                self.latent_channels()
            )));
        }
        Ok(latent.pixel_shuffle(self.factor).expect("channel count checked"))
    }
}
