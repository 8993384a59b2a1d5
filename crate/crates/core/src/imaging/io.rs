//! File-format boundary: PNG (8/16-bit) and JPEG decoding, PNG (8-bit) encoding.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// Loads a PNG or JPEG file into a float image.
///
/// Grayscale sources (with or without alpha) become single-channel tensors,
/// everything else becomes RGB; alpha is dropped. 8-bit samples are scaled by
/// 1/255, 16-bit by 1/65535.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        Some(other) => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("{other:?} is not supported, use PNG or JPEG"),
            })
        }
        None => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "unrecognized image format, use PNG or JPEG".to_string(),
            })
        }
    }
    let decoded = reader.decode().map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        source: e,
    })?;
    decoded_to_tensor(decoded)
}

fn decoded_to_tensor(decoded: DynamicImage) -> Result<ImageTensor> {
    let grayscale = matches!(
        decoded,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let sixteen_bit = matches!(
        decoded,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data = match (grayscale, sixteen_bit) {
        (true, false) => {
            let buf = decoded.to_luma8();
            Array3::from_shape_fn((h, w, 1), |(i, j, _)| {
                buf.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0
            })
        }
        (true, true) => {
            let buf = decoded.to_luma16();
            Array3::from_shape_fn((h, w, 1), |(i, j, _)| {
                buf.get_pixel(j as u32, i as u32).0[0] as f64 / 65535.0
            })
        }
        (false, false) => {
            let buf = decoded.to_rgb8();
            Array3::from_shape_fn((h, w, 3), |(i, j, k)| {
                buf.get_pixel(j as u32, i as u32).0[k] as f64 / 255.0
            })
        }
        (false, true) => {
            let buf = decoded.to_rgb16();
            Array3::from_shape_fn((h, w, 3), |(i, j, k)| {
                buf.get_pixel(j as u32, i as u32).0[k] as f64 / 65535.0
            })
        }
    };
    ImageTensor::from_array(data)
}

/// Writes an 8-bit PNG. The path must carry a `.png` extension.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "only .png output is supported".to_string(),
        });
    }
    let quant = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let (h, w) = (img.height() as u32, img.width() as u32);
    let result = if img.channels() == 1 {
        let buf = image::GrayImage::from_fn(w, h, |x, y| {
            image::Luma([quant(img.get(y as usize, x as usize, 0))])
        });
        buf.save_with_format(path, ImageFormat::Png)
    } else {
        let buf = image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb(std::array::from_fn(|k| {
                quant(img.get(y as usize, x as usize, k))
            }))
        });
        buf.save_with_format(path, ImageFormat::Png)
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Codec {
            path: path.to_path_buf(),
            source: other,
        },
    })
}
