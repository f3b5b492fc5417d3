//! PNG <-> tensor conversion. Images are `3 x H x W` tensors with values in
//! [0, 1]; PNG is the only raster format the pipeline accepts.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PngError {
    #[error("png decode failed: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
    #[error("image tensor must be 3 x H x W, got {shape:?}")]
    BadShape { shape: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Decode PNG bytes into a `3 x H x W` tensor in [0, 1].
pub fn decode_png<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>, PngError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or_default()];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(PngError::Unsupported(format!(
            "bit depth {:?}, only 8-bit supported",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        other => {
            return Err(PngError::Unsupported(format!("color type {other:?}")));
        }
    };
    let mut data = vec![S::zero(); 3 * h * w];
    let scale = 1.0 / 255.0;
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * channels;
            let (r, g, b) = match channels {
                1 => (pixels[base], pixels[base], pixels[base]),
                _ => (pixels[base], pixels[base + 1], pixels[base + 2]),
            };
            data[y * w + x] = S::from_f64_lossy(r as f64 * scale);
            data[h * w + y * w + x] = S::from_f64_lossy(g as f64 * scale);
            data[2 * h * w + y * w + x] = S::from_f64_lossy(b as f64 * scale);
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Encode a `3 x H x W` tensor in [0, 1] as 8-bit RGB PNG bytes.
pub fn encode_png<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>, PngError> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(PngError::BadShape {
            shape: image.shape().to_vec(),
        });
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut pixels = vec![0u8; h * w * 3];
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[c * h * w + y * w + x].to_f64_lossy().clamp(0.0, 1.0);
                pixels[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(&pixels)?;
    }
    Ok(out)
}

pub fn write_png<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<(), PngError> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_png<S: Scalar>(path: &Path) -> Result<Tensor<S>, PngError> {
    let bytes = std::fs::read(path)?;
    decode_png(&bytes)
}
