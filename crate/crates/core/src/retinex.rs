//! Retinex image model: a picture is the pixelwise product of a smooth,
//! shared illumination map and a detail-carrying reflectance map.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// Stabilizer added to the illumination denominator so black pixels divide
/// cleanly. Also bounds the reconstruction error of a decompose/recompose
/// round trip by `RETINEX_EPSILON` per pixel.
pub const RETINEX_EPSILON: f64 = 1e-4;

/// Result of [`decompose`]: `illumination` is single-channel, `reflectance`
/// has the channel count of the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct RetinexDecomposition {
    pub illumination: ImageTensor,
    pub reflectance: ImageTensor,
}

/// Splits an image into illumination and reflectance.
///
/// Illumination is the per-pixel channel maximum; reflectance is the image
/// divided by `illumination + RETINEX_EPSILON`, so it always lands in `[0, 1)`.
pub fn decompose(img: &ImageTensor) -> Result<RetinexDecomposition> {
    let (h, w, c) = img.data().dim();
    let src = img.data();
    let mut illum = Array3::zeros((h, w, 1));
    let mut refl = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let mut m = 0.0f64;
            for k in 0..c {
                m = m.max(src[(i, j, k)]);
            }
            illum[(i, j, 0)] = m;
            for k in 0..c {
                refl[(i, j, k)] = src[(i, j, k)] / (m + RETINEX_EPSILON);
            }
        }
    }
    Ok(RetinexDecomposition {
        illumination: ImageTensor::from_array(illum)?,
        reflectance: ImageTensor::from_array(refl)?,
    })
}

/// Pixelwise product of illumination and reflectance, clipped to `[0, 1]`.
///
/// The illumination map must be single-channel and match the reflectance
/// spatially; it is broadcast across reflectance channels.
pub fn recompose(illumination: &ImageTensor, reflectance: &ImageTensor) -> Result<ImageTensor> {
    if illumination.channels() != 1 {
        return Err(Error::shape(format!(
            "illumination must be single-channel, got {}",
            illumination.channels()
        )));
    }
    if (illumination.height(), illumination.width()) != (reflectance.height(), reflectance.width()) {
        return Err(Error::shape(format!(
            "illumination {}x{} does not match reflectance {}x{}",
            illumination.height(),
            illumination.width(),
            reflectance.height(),
            reflectance.width()
        )));
    }
    let (h, w, c) = reflectance.data().dim();
    let data = Array3::from_shape_fn((h, w, c), |(i, j, k)| {
        illumination.get(i, j, 0) * reflectance.get(i, j, k)
    });
    ImageTensor::from_array_clamped(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_oracle() {
        // Pixel (0.2, 0.4, 0.1): illumination 0.4, reflectance v / 0.4001.
        let img = ImageTensor::from_fn(1, 1, 3, |_, _, k| [0.2, 0.4, 0.1][k]).unwrap();
        let d = decompose(&img).unwrap();
        assert_eq!(d.illumination.get(0, 0, 0), 0.4);
        for (k, v) in [0.2, 0.4, 0.1].into_iter().enumerate() {
            assert!((d.reflectance.get(0, 0, k) - v / 0.4001).abs() < 1e-12);
        }
    }

    #[test]
    fn black_pixels_divide_cleanly() {
        let img = ImageTensor::constant(4, 4, 3, 0.0).unwrap();
        let d = decompose(&img).unwrap();
        assert_eq!(d.illumination.get(1, 1, 0), 0.0);
        assert_eq!(d.reflectance.get(1, 1, 2), 0.0);
    }

    #[test]
    fn white_image_reflectance_just_under_one() {
        let img = ImageTensor::constant(2, 2, 3, 1.0).unwrap();
        let d = decompose(&img).unwrap();
        let v = d.reflectance.get(0, 0, 0);
        assert!((v - 1.0 / (1.0 + RETINEX_EPSILON)).abs() < 1e-12);
        assert!(v < 1.0);
    }

    #[test]
    fn round_trip_error_is_bounded_by_epsilon() {
        let img = ImageTensor::from_fn(9, 7, 3, |i, j, k| {
            (((i * 13 + j * 5 + k * 3) % 17) as f64 / 16.0).powi(2)
        })
        .unwrap();
        let d = decompose(&img).unwrap();
        let back = recompose(&d.illumination, &d.reflectance).unwrap();
        // x * m / (m + eps) differs from x by x * eps / (m + eps) <= eps.
        assert!(img.max_abs_diff(&back).unwrap() <= RETINEX_EPSILON);
    }

    #[test]
    fn grayscale_illumination_equals_source() {
        let img = ImageTensor::from_fn(5, 5, 1, |i, j, _| ((i * j) % 4) as f64 / 3.0).unwrap();
        let d = decompose(&img).unwrap();
        assert!(img.max_abs_diff(&d.illumination).unwrap() < 1e-12);
    }

    #[test]
    fn recompose_validates_shapes() {
        let illum3 = ImageTensor::constant(4, 4, 3, 0.5).unwrap();
        let refl = ImageTensor::constant(4, 4, 3, 0.5).unwrap();
        assert!(recompose(&illum3, &refl).is_err());
        let illum_small = ImageTensor::constant(2, 4, 1, 0.5).unwrap();
        assert!(recompose(&illum_small, &refl).is_err());
    }

    #[test]
    fn recompose_broadcasts_illumination() {
        let illum = ImageTensor::constant(2, 2, 1, 0.5).unwrap();
        let refl = ImageTensor::from_fn(2, 2, 3, |_, _, k| [0.2, 0.6, 1.0][k]).unwrap();
        let out = recompose(&illum, &refl).unwrap();
        assert!((out.get(0, 0, 0) - 0.1).abs() < 1e-12);
        assert!((out.get(1, 1, 1) - 0.3).abs() < 1e-12);
        assert!((out.get(0, 1, 2) - 0.5).abs() < 1e-12);
    }
}
