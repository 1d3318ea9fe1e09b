//! 8-bit lossless raster IO for patch images and masks.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use super::DataError;

fn decode(path: &Path) -> Result<DynamicImage, DataError> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => DataError::Io { path: path.to_path_buf(), source },
        other => DataError::Decode { path: path.to_path_buf(), reason: other.to_string() },
    })
}

/// Decodes an image into channel-major values in `[0, 1]`.
///
/// Returns `(channels, height, width, values)`. Grayscale inputs keep one
/// channel, anything with colour becomes RGB (alpha is dropped).
pub fn read_image(path: &Path) -> Result<(usize, usize, usize, Vec<f32>), DataError> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Ok((1, h, w, g.into_raw().iter().map(|&v| v as f32 / 255.0).collect())),
        DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            Ok((1, h, w, g.into_raw().iter().map(|&v| v as f32 / 255.0).collect()))
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let g = img.to_luma16();
            Ok((1, h, w, g.into_raw().iter().map(|&v| v as f32 / 65535.0).collect()))
        }
        other => {
            let rgb = other.to_rgb8();
            let n = h * w;
            let mut out = vec![0.0f32; 3 * n];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    out[c * n + i] = px.0[c] as f32 / 255.0;
                }
            }
            Ok((3, h, w, out))
        }
    }
}

/// Decodes a mask; any nonzero pixel (in any colour channel) becomes 1.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| u8::from(v != 0)).collect(),
        other => other
            .to_rgba16()
            .pixels()
            .map(|p| u8::from(p.0[..3].iter().any(|&v| v != 0)))
            .collect(),
    };
    Ok((h, w, mask))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(img: DynamicImage, path: &Path) -> Result<(), DataError> {
    img.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => DataError::Io { path: path.to_path_buf(), source },
        other => DataError::Decode { path: path.to_path_buf(), reason: other.to_string() },
    })
}

/// Writes channel-major `[0, 1]` values as an 8-bit PNG.
pub fn write_image(path: &Path, channels: usize, height: usize, width: usize, values: &[f32]) -> Result<(), DataError> {
    let n = height * width;
    assert_eq!(values.len(), channels * n, "image buffer size");
    let img = match channels {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(width as u32, height as u32, values.iter().map(|&v| quantize(v)).collect())
                .expect("buffer size checked"),
        ),
        3 => {
            let mut raw = Vec::with_capacity(3 * n);
            for i in 0..n {
                for c in 0..3 {
                    raw.push(quantize(values[c * n + i]));
                }
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(width as u32, height as u32, raw).expect("buffer size checked"))
        }
        c => panic!("unsupported channel count {c}"),
    };
    save(img, path)
}

/// Writes a binary mask as 8-bit grayscale (0 healthy, 255 defect).
pub fn write_mask(path: &Path, height: usize, width: usize, mask: &[u8]) -> Result<(), DataError> {
    let raw = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, raw).expect("mask buffer size");
    save(DynamicImage::ImageLuma8(img), path)
}
