//! PNG helpers. Every image that crosses a gateway or lands on disk is PNG.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage};

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn decode(bytes: &[u8]) -> Result<DynamicImage, ImageIoError> {
    image::load_from_memory(bytes).map_err(|e| ImageIoError::Decode(e.to_string()))
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, ImageIoError> {
    Ok(decode(bytes)?.to_rgb8())
}

pub fn encode_png(image: &DynamicImage) -> Result<Vec<u8>, ImageIoError> {
    let mut out = Cursor::new(Vec::new());
    image
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ImageIoError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn encode_rgb_png(image: &RgbImage) -> Result<Vec<u8>, ImageIoError> {
    encode_png(&DynamicImage::ImageRgb8(image.clone()))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, ImageIoError> {
    std::fs::read(path).map_err(|source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ImageIoError> {
    let io = |source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(|source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    })
}
