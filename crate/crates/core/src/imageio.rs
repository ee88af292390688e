//! PNG encode/decode helpers shared by the atlas, raster and pipeline modules.

use std::fs::File;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use thiserror::Error;

use crate::grid::Grid;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png encoding failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decoding failed: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
}

/// `[0, 1] → [0, 255]`, clamped, rounding half up.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn encode(
    out: impl Write,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    text: &[(&str, &str)],
    data: &[u8],
) -> Result<(), ImageError> {
    let mut enc = png::Encoder::new(out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string())?;
    }
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

/// Encodes a 3-channel grid as 8-bit RGB PNG bytes.
pub fn rgb8_png_bytes(grid: &Grid) -> Result<Vec<u8>, ImageError> {
    if grid.channels() != 3 {
        return Err(ImageError::Unsupported(format!("{} channels, expected 3", grid.channels())));
    }
    let data: Vec<u8> = grid.as_slice().iter().map(|&v| quantize_u8(v)).collect();
    let mut buf = Vec::new();
    encode(
        &mut buf,
        grid.width(),
        grid.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &[],
        &data,
    )?;
    Ok(buf)
}

/// Encodes 16-bit grayscale samples with optional text metadata.
pub fn gray16_png_bytes(
    width: usize,
    height: usize,
    samples: &[u16],
    text: &[(&str, &str)],
) -> Result<Vec<u8>, ImageError> {
    let data: Vec<u8> = samples.iter().flat_map(|s| s.to_be_bytes()).collect();
    let mut buf = Vec::new();
    encode(
        &mut buf,
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        text,
        &data,
    )?;
    Ok(buf)
}

/// Encodes 8-bit grayscale samples.
pub fn gray8_png_bytes(width: usize, height: usize, samples: &[u8]) -> Result<Vec<u8>, ImageError> {
    let mut buf = Vec::new();
    encode(
        &mut buf,
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &[],
        samples,
    )?;
    Ok(buf)
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), ImageError> {
    let path = path.as_ref();
    let io = |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = BufWriter::new(File::create(path).map_err(io)?);
    f.write_all(bytes).map_err(io)?;
    f.flush().map_err(io)
}

/// A decoded PNG: raw samples widened to `u16` plus layout.
#[derive(Debug, Clone)]
pub struct DecodedPng {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bit_depth: u8,
    pub samples: Vec<u16>,
    pub text: Vec<(String, String)>,
}

pub fn decode_png(bytes: &[u8]) -> Result<DecodedPng, ImageError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    let channels = frame.color_type.samples();
    let bit_depth = match frame.bit_depth {
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => 16,
        other => return Err(ImageError::Unsupported(format!("bit depth {other:?}"))),
    };
    let data = &buf[..frame.buffer_size()];
    let samples = if bit_depth == 16 {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    Ok(DecodedPng {
        width: frame.width as usize,
        height: frame.height as usize,
        channels,
        bit_depth,
        samples,
        text,
    })
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>, ImageError> {
    let path = path.as_ref();
    std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Decodes an 8- or 16-bit PNG into an RGB grid with values in `[0, 1]`.
/// Gray is replicated, alpha dropped.
pub fn decode_rgb(bytes: &[u8]) -> Result<Grid, ImageError> {
    let img = decode_png(bytes)?;
    let scale = if img.bit_depth == 16 { 65535.0 } else { 255.0 };
    let mut grid = Grid::zeros(img.width, img.height, 3);
    for i in 0..img.width * img.height {
        let px = &img.samples[i * img.channels..(i + 1) * img.channels];
        let rgb = match img.channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        };
        for (dst, s) in grid.pixel_mut(i).iter_mut().zip(rgb) {
            *dst = s as f64 / scale;
        }
    }
    Ok(grid)
}
