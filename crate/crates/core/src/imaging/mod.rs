//! Image container and pixel-level utilities.
//!
//! Images are dense `(height, width, channels)` tensors of `f64` in `[0, 1]`
//! with 1 (grayscale) or 3 (RGB) channels. All pipeline code operates on this
//! representation; 8/16-bit integer formats exist only at the file boundary.

mod gradient;
mod io;
mod metrics;

pub use gradient::{spatial_gradient, GradientField, GradientKind};
pub use io::{load_image, save_image};
pub use metrics::{metric_report, psnr, ssim, MetricReport, PSNR_IDENTICAL_DB};

use ndarray::{Array3, ArrayD, IxDyn, Zip};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Dense floating-point image, `(h, w, c)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wraps an array, validating shape and value range.
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::shape(format!("image must be non-empty, got {h}x{w}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("image must have 1 or 3 channels, got {c}")));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "image values must be finite and within [0, 1], found {v}"
                )));
            }
        }
        Ok(ImageTensor { data })
    }

    /// Wraps an array after clamping values into `[0, 1]`.
    ///
    /// Non-finite values are still rejected: they indicate a computation bug,
    /// not an out-of-gamut pixel.
    pub fn from_array_clamped(mut data: Array3<f64>) -> Result<Self> {
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::invalid("image values must be finite".to_string()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Self::from_array(data)
    }

    /// Builds an image by evaluating `f(row, col, channel)`.
    pub fn from_fn(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        Self::from_array(Array3::from_shape_fn((h, w, c), |(i, j, k)| f(i, j, k)))
    }

    /// Constant-valued image.
    pub fn constant(h: usize, w: usize, c: usize, value: f64) -> Result<Self> {
        Self::from_array(Array3::from_elem((h, w, c), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row, col, channel)]
    }

    /// Largest absolute per-pixel difference against another image.
    pub fn max_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::shape(format!(
                "cannot compare images of shapes {:?} and {:?}",
                self.data.dim(),
                other.data.dim()
            )));
        }
        let mut worst = 0.0f64;
        Zip::from(&self.data).and(&other.data).for_each(|&a, &b| {
            worst = worst.max((a - b).abs());
        });
        Ok(worst)
    }

    /// Rec. 601 luma; identity for single-channel images.
    pub fn to_luma(&self) -> ImageTensor {
        if self.channels() == 1 {
            return self.clone();
        }
        let (h, w, _) = self.data.dim();
        let data = Array3::from_shape_fn((h, w, 1), |(i, j, _)| {
            0.299 * self.data[(i, j, 0)] + 0.587 * self.data[(i, j, 1)] + 0.114 * self.data[(i, j, 2)]
        });
        ImageTensor { data }
    }

    /// Grayscale-to-RGB by channel replication; identity for RGB images.
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels() == 3 {
            return self.clone();
        }
        let (h, w, _) = self.data.dim();
        let data = Array3::from_shape_fn((h, w, 3), |(i, j, _)| self.data[(i, j, 0)]);
        ImageTensor { data }
    }

    /// Pads on the bottom/right with edge replication so both sides become
    /// multiples of `multiple`. Returns the padded image and the original size.
    pub fn pad_to_multiple(&self, multiple: usize) -> Result<(ImageTensor, (usize, usize))> {
        if multiple == 0 {
            return Err(Error::invalid("padding multiple must be positive"));
        }
        let (h, w, c) = self.data.dim();
        let ph = h.div_ceil(multiple) * multiple;
        let pw = w.div_ceil(multiple) * multiple;
        if (ph, pw) == (h, w) {
            return Ok((self.clone(), (h, w)));
        }
        let data = Array3::from_shape_fn((ph, pw, c), |(i, j, k)| {
            self.data[(i.min(h - 1), j.min(w - 1), k)]
        });
        Ok((ImageTensor { data }, (h, w)))
    }

    /// Top-left crop back to `(h, w)` after padding.
    pub fn crop(&self, h: usize, w: usize) -> Result<ImageTensor> {
        let (sh, sw, c) = self.data.dim();
        if h == 0 || w == 0 || h > sh || w > sw {
            return Err(Error::shape(format!(
                "cannot crop {sh}x{sw} image to {h}x{w}"
            )));
        }
        let data = Array3::from_shape_fn((h, w, c), |(i, j, k)| self.data[(i, j, k)]);
        Ok(ImageTensor { data })
    }

    /// Bilinear resize to `(h, w)` with corner-aligned sampling.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Result<ImageTensor> {
        if h == 0 || w == 0 {
            return Err(Error::shape("resize target must be non-empty".to_string()));
        }
        let (sh, sw, c) = self.data.dim();
        let scale = |dst: usize, out: usize, src: usize| -> (usize, usize, f64) {
            if out == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let t = dst as f64 * (src - 1) as f64 / (out - 1) as f64;
            let lo = (t.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, t - lo as f64)
        };
        let data = Array3::from_shape_fn((h, w, c), |(i, j, k)| {
            let (i0, i1, fi) = scale(i, h, sh);
            let (j0, j1, fj) = scale(j, w, sw);
            let top = self.data[(i0, j0, k)] * (1.0 - fj) + self.data[(i0, j1, k)] * fj;
            let bot = self.data[(i1, j0, k)] * (1.0 - fj) + self.data[(i1, j1, k)] * fj;
            top * (1.0 - fi) + bot * fi
        });
        ImageTensor::from_array_clamped(data)
    }
}

/// Converts an image to the `[c, h, w]` layout the network graphs use.
pub fn to_chw<F: Scalar>(img: &ImageTensor) -> ArrayD<F> {
    let (h, w, c) = img.data().dim();
    ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |idx| {
        F::from_f64(img.get(idx[1], idx[2], idx[0]))
    })
}

/// Reads a `[c, h, w]` graph tensor back into an image, clamping to `[0, 1]`.
pub fn from_chw<F: Scalar>(arr: &ArrayD<F>) -> Result<ImageTensor> {
    let d = arr.shape();
    if d.len() != 3 {
        return Err(Error::shape(format!(
            "expected [c,h,w] tensor, got {d:?}"
        )));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let data = Array3::from_shape_fn((h, w, c), |(i, j, k)| arr[[k, i, j]].to_f64());
    ImageTensor::from_array_clamped(data)
}
