//! Spatial gradients of images, used by the edge-preservation loss.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::imaging::ImageTensor;

/// Finite-difference scheme for [`spatial_gradient`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientKind {
    /// `d[i,j] = x[i,j+1] - x[i,j]` (and the row analogue); the last
    /// column/row is zero. This is the scheme the loss is defined on.
    #[default]
    Forward,
    /// 3x3 Sobel operator with edge replication.
    Sobel,
}

/// Per-channel horizontal (`dx`) and vertical (`dy`) derivative planes,
/// same shape as the source image. Values are signed and unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub dx: Array3<f64>,
    pub dy: Array3<f64>,
}

impl GradientField {
    /// Sum of squared entries over both planes, divided by the number of
    /// entries in one plane. Useful as a smoothness statistic.
    pub fn mean_square_magnitude(&self) -> f64 {
        let n = self.dx.len() as f64;
        let sum: f64 = self.dx.iter().map(|v| v * v).sum::<f64>()
            + self.dy.iter().map(|v| v * v).sum::<f64>();
        sum / n
    }
}

/// Computes image derivatives with the requested scheme.
pub fn spatial_gradient(img: &ImageTensor, kind: GradientKind) -> GradientField {
    match kind {
        GradientKind::Forward => forward_diff(img),
        GradientKind::Sobel => sobel(img),
    }
}

fn forward_diff(img: &ImageTensor) -> GradientField {
    let (h, w, c) = img.data().dim();
    let src = img.data();
    let mut dx = Array3::zeros((h, w, c));
    let mut dy = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                if j + 1 < w {
                    dx[(i, j, k)] = src[(i, j + 1, k)] - src[(i, j, k)];
                }
                if i + 1 < h {
                    dy[(i, j, k)] = src[(i + 1, j, k)] - src[(i, j, k)];
                }
            }
        }
    }
    GradientField { dx, dy }
}

fn sobel(img: &ImageTensor) -> GradientField {
    let (h, w, c) = img.data().dim();
    let src = img.data();
    // Edge-replicated fetch keeps the output the same size as the input.
    let at = |i: isize, j: isize, k: usize| -> f64 {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        src[(i, j, k)]
    };
    let mut dx = Array3::zeros((h, w, c));
    let mut dy = Array3::zeros((h, w, c));
    for i in 0..h as isize {
        for j in 0..w as isize {
            for k in 0..c {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        let v = at(i + di, j + dj, k);
                        // Separable weights: smooth across, difference along.
                        let smooth = |d: isize| if d == 0 { 2.0 } else { 1.0 };
                        gx += v * dj as f64 * smooth(di);
                        gy += v * di as f64 * smooth(dj);
                    }
                }
                dx[(i as usize, j as usize, k)] = gx;
                dy[(i as usize, j as usize, k)] = gy;
            }
        }
    }
    GradientField { dx, dy }
}
