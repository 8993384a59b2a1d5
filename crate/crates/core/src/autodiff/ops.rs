//! Operation set for the tape. Each op computes its value eagerly at
//! construction and stores just enough to run its adjoint later.
//!
//! Shape conventions: feature maps are `[channels, height, width]`, matrices
//! `[rows, cols]`, vectors `[dim]`, scalars zero-dimensional.

use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};

use super::{reshape_arr, Backward, GradSink, Graph, Scalar, Var};

fn scalar_arr<F: Scalar>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn grad_scalar<F: Scalar>(grad_out: &ArrayD<F>) -> F {
    debug_assert_eq!(grad_out.len(), 1);
    *grad_out.iter().next().expect("scalar gradient")
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

struct AddOp;

impl<F: Scalar> Backward<F> for AddOp {
    fn backward(
        &self,
        _values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        sink.add(parents[0], grad_out.clone());
        sink.add(parents[1], grad_out.clone());
    }
}

struct SubOp;

impl<F: Scalar> Backward<F> for SubOp {
    fn backward(
        &self,
        _values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        sink.add(parents[0], grad_out.clone());
        sink.add(parents[1], grad_out.mapv(|g| -g));
    }
}

struct MulOp;

impl<F: Scalar> Backward<F> for MulOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let a = &values[parents[0].0];
        let b = &values[parents[1].0];
        if sink.wanted(parents[0]) {
            sink.add(parents[0], grad_out * b);
        }
        if sink.wanted(parents[1]) {
            sink.add(parents[1], grad_out * a);
        }
    }
}

struct ScaleOp<F> {
    k: F,
}

impl<F: Scalar> Backward<F> for ScaleOp<F> {
    fn backward(
        &self,
        _values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        sink.add(parents[0], grad_out.mapv(|g| g * self.k));
    }
}

/// Shift by a constant: gradient passes through unchanged.
struct ShiftOp;

impl<F: Scalar> Backward<F> for ShiftOp {
    fn backward(
        &self,
        _values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        sink.add(parents[0], grad_out.clone());
    }
}

struct SqrOp;

impl<F: Scalar> Backward<F> for SqrOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let two = F::from_f64(2.0);
        let x = &values[parents[0].0];
        let mut g = grad_out * x;
        g.mapv_inplace(|v| v * two);
        sink.add(parents[0], g);
    }
}

/// Unary map whose derivative can be written from the input and output
/// values alone. Covers all the activation functions.
struct PointwiseOp<F> {
    dfdx: fn(F, F) -> F,
}

impl<F: Scalar> Backward<F> for PointwiseOp<F> {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let x = &values[parents[0].0];
        let y = &values[out];
        let mut g = grad_out.clone();
        ndarray::Zip::from(&mut g).and(x).and(y).for_each(|g, &x, &y| {
            *g = *g * (self.dfdx)(x, y);
        });
        sink.add(parents[0], g);
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val<F: Scalar>(x: F) -> F {
    let k = F::from_f64(GELU_K);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = k * (x + a * x * x * x);
    half * x * (F::ONE + u.tanh())
}

fn gelu_dfdx<F: Scalar>(x: F, _y: F) -> F {
    let k = F::from_f64(GELU_K);
    let a3 = F::from_f64(3.0 * GELU_A);
    let half = F::from_f64(0.5);
    let u = k * (x + F::from_f64(GELU_A) * x * x * x);
    let t = u.tanh();
    half * (F::ONE + t) + half * x * (F::ONE - t * t) * k * (F::ONE + a3 * x * x)
}

// ---------------------------------------------------------------------------
// Matrix products

struct MatmulOp {
    ta: bool,
    tb: bool,
}

fn as2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 value")
}

impl<F: Scalar> Backward<F> for MatmulOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let a = as2(&values[parents[0].0]);
        let b = as2(&values[parents[1].0]);
        let g = as2(grad_out);
        let (ga, gb) = match (self.ta, self.tb) {
            // C = A B: dA = G B^T, dB = A^T G
            (false, false) => (g.dot(&b.t()), a.t().dot(&g)),
            // C = A^T B: dA = B G^T, dB = A G
            (true, false) => (b.dot(&g.t()), a.dot(&g)),
            // C = A B^T: dA = G B, dB = G^T A
            (false, true) => (g.dot(&b), g.t().dot(&a)),
            (true, true) => unreachable!("double-transposed product is never built"),
        };
        sink.add(parents[0], ga.into_dyn());
        sink.add(parents[1], gb.into_dyn());
    }
}

struct AddBiasRowsOp;

impl<F: Scalar> Backward<F> for AddBiasRowsOp {
    fn backward(
        &self,
        _values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        sink.add(parents[0], grad_out.clone());
        let g = as2(grad_out);
        sink.add(parents[1], g.sum_axis(Axis(1)).into_dyn());
    }
}

struct ReshapeOp {
    from: Vec<usize>,
}

impl<F: Scalar> Backward<F> for ReshapeOp {
    fn backward(
        &self,
        _values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        sink.add(parents[0], reshape_arr(grad_out.clone(), &self.from));
    }
}

// ---------------------------------------------------------------------------
// Softmax and normalization

/// Softmax along `axis`; the remaining axes index independent distributions.
struct SoftmaxOp {
    axis: usize,
}

impl<F: Scalar> Backward<F> for SoftmaxOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let y = &values[out];
        // dx = y * (g - sum(g * y)) along the softmax axis.
        let gy = grad_out * y;
        let dot = gy.sum_axis(Axis(self.axis)).insert_axis(Axis(self.axis));
        let mut dx = grad_out.clone();
        dx -= &dot; // broadcasts over the softmax axis
        dx *= y;
        sink.add(parents[0], dx);
    }
}

fn softmax_axis<F: Scalar>(x: &ArrayD<F>, axis: usize) -> ArrayD<F> {
    let mut y = x.clone();
    for mut lane in y.lanes_mut(Axis(axis)) {
        let mut m = F::from_f64(f64::NEG_INFINITY);
        for &v in lane.iter() {
            m = m.maximum(v);
        }
        let mut sum = F::ZERO;
        for v in lane.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-position normalization over the channel axis of a `[c, h, w]` map,
/// with learned per-channel gain and bias.
struct LayerNormOp;

impl<F: Scalar> Backward<F> for LayerNormOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let x = values[parents[0].0]
            .view()
            .into_dimensionality::<Ix3>()
            .expect("rank-3 value");
        let gain = values[parents[1].0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("rank-1 gain");
        let g = grad_out.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x.dim();
        let cf = F::from_f64(c as f64);
        let eps = F::from_f64(LAYER_NORM_EPS);

        let mut dx = ndarray::Array3::<F>::zeros((c, h, w));
        let mut dgain = ndarray::Array1::<F>::zeros(c);
        let mut dbias = ndarray::Array1::<F>::zeros(c);
        for i in 0..h {
            for j in 0..w {
                let mut mean = F::ZERO;
                for k in 0..c {
                    mean += x[(k, i, j)];
                }
                mean = mean / cf;
                let mut var = F::ZERO;
                for k in 0..c {
                    let d = x[(k, i, j)] - mean;
                    var += d * d;
                }
                var = var / cf;
                let inv_std = F::ONE / (var + eps).sqrt();
                // d = dL/dxhat; dx = (d - mean(d) - xhat * mean(d * xhat)) / std
                let mut mean_d = F::ZERO;
                let mut mean_dxhat = F::ZERO;
                for k in 0..c {
                    let xhat = (x[(k, i, j)] - mean) * inv_std;
                    let d = g[(k, i, j)] * gain[k];
                    mean_d += d;
                    mean_dxhat += d * xhat;
                    dgain[k] += g[(k, i, j)] * xhat;
                    dbias[k] += g[(k, i, j)];
                }
                mean_d = mean_d / cf;
                mean_dxhat = mean_dxhat / cf;
                for k in 0..c {
                    let xhat = (x[(k, i, j)] - mean) * inv_std;
                    let d = g[(k, i, j)] * gain[k];
                    dx[(k, i, j)] = (d - mean_d - xhat * mean_dxhat) * inv_std;
                }
            }
        }
        sink.add(parents[0], dx.into_dyn());
        sink.add(parents[1], dgain.into_dyn());
        sink.add(parents[2], dbias.into_dyn());
    }
}

// ---------------------------------------------------------------------------
// Convolution

fn conv_out_side(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

fn im2col<F: Scalar>(
    x: &ArrayD<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (ci, h, w) = {
        let d = x.shape();
        (d[0], d[1], d[2])
    };
    let oh = conv_out_side(h, kh, stride, pad);
    let ow = conv_out_side(w, kw, stride, pad);
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<F>::zeros((ci * kh * kw, oh * ow));
    {
        let cs = cols.as_slice_mut().unwrap();
        for c in 0..ci {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = ((c * kh + ki) * kw + kj) * (oh * ow);
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xrow = (c * h + ii as usize) * w;
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cs[row + oi * ow + oj] = xs[xrow + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(
    cols: &Array2<F>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let oh = conv_out_side(h, kh, stride, pad);
    let ow = conv_out_side(w, kw, stride, pad);
    let mut x = ArrayD::<F>::zeros(IxDyn(&[ci, h, w]));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("standard layout");
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * (oh * ow);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = (c * h + ii as usize) * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        xs[xrow + jj as usize] += cs[row + oi * ow + oj];
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution of a `[ci, h, w]` map with `[co, ci, kh, kw]` kernels.
/// Forward runs as one matrix product against the unfolded input, which is
/// cached for the weight-gradient product in the backward pass.
struct Conv2dOp<F: Scalar> {
    stride: usize,
    pad: usize,
    cols: Array2<F>,
    has_bias: bool,
}

impl<F: Scalar> Backward<F> for Conv2dOp<F> {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let x = &values[parents[0].0];
        let wshape = values[parents[1].0].shape().to_vec();
        let (co, ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let spatial = grad_out.len() / co;
        let g2 = grad_out
            .to_shape((co, spatial))
            .expect("contiguous gradient");

        if self.has_bias {
            sink.add(parents[2], g2.sum_axis(Axis(1)).into_dyn());
        }
        if sink.wanted(parents[1]) {
            let gw = g2.dot(&self.cols.t());
            sink.add(parents[1], reshape_arr(gw.into_dyn(), &wshape));
        }
        if sink.wanted(parents[0]) {
            let wmat = values[parents[1].0]
                .to_shape((co, ci * kh * kw))
                .expect("contiguous kernel");
            let gcols = wmat.t().dot(&g2);
            sink.add(
                parents[0],
                col2im(&gcols, ci, h, w, kh, kw, self.stride, self.pad),
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Resampling

struct AvgPool2Op;

impl<F: Scalar> Backward<F> for AvgPool2Op {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let d = values[parents[0].0].shape();
        let (c, h, w) = (d[0], d[1], d[2]);
        let quarter = F::from_f64(0.25);
        let mut dx = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
        let g = grad_out.view().into_dimensionality::<Ix3>().unwrap();
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[[k, i, j]] = g[(k, i / 2, j / 2)] * quarter;
                }
            }
        }
        sink.add(parents[0], dx);
    }
}

struct UpsampleNearest2Op;

impl<F: Scalar> Backward<F> for UpsampleNearest2Op {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let d = values[parents[0].0].shape();
        let (c, h, w) = (d[0], d[1], d[2]);
        let g = grad_out.view().into_dimensionality::<Ix3>().unwrap();
        let mut dx = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
        for k in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dx[[k, i / 2, j / 2]] += g[(k, i, j)];
                }
            }
        }
        sink.add(parents[0], dx);
    }
}

/// Corner-aligned bilinear resize to a fixed target size. The sampling
/// tables are shared by forward and backward so the adjoint is exact.
struct ResizeBilinearOp<F> {
    rows: Vec<(usize, usize, F)>,
    cols: Vec<(usize, usize, F)>,
    src_shape: Vec<usize>,
}

fn resize_table<F: Scalar>(out: usize, src: usize) -> Vec<(usize, usize, F)> {
    (0..out)
        .map(|dst| {
            if out == 1 || src == 1 {
                return (0usize, 0usize, F::ZERO);
            }
            let t = dst as f64 * (src - 1) as f64 / (out - 1) as f64;
            let lo = (t.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, F::from_f64(t - lo as f64))
        })
        .collect()
}

impl<F: Scalar> Backward<F> for ResizeBilinearOp<F> {
    fn backward(
        &self,
        _values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let g = grad_out.view().into_dimensionality::<Ix3>().unwrap();
        let mut dx = ArrayD::<F>::zeros(IxDyn(&self.src_shape));
        let c = self.src_shape[0];
        for k in 0..c {
            for (i, &(i0, i1, fi)) in self.rows.iter().enumerate() {
                for (j, &(j0, j1, fj)) in self.cols.iter().enumerate() {
                    let gv = g[(k, i, j)];
                    dx[[k, i0, j0]] += gv * (F::ONE - fi) * (F::ONE - fj);
                    dx[[k, i0, j1]] += gv * (F::ONE - fi) * fj;
                    dx[[k, i1, j0]] += gv * fi * (F::ONE - fj);
                    dx[[k, i1, j1]] += gv * fi * fj;
                }
            }
        }
        sink.add(parents[0], dx);
    }
}

// ---------------------------------------------------------------------------
// Structure ops

struct ConcatChannelsOp {
    split: usize,
}

impl<F: Scalar> Backward<F> for ConcatChannelsOp {
    fn backward(
        &self,
        _values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let head = grad_out
            .slice_axis(Axis(0), Slice::from(0..self.split))
            .to_owned();
        let tail = grad_out
            .slice_axis(Axis(0), Slice::from(self.split..))
            .to_owned();
        sink.add(parents[0], head);
        sink.add(parents[1], tail);
    }
}

/// Multiply a `[c, h, w]` map by a `[1, h, w]` map, broadcast over channels.
struct MulBcastChannelOp;

impl<F: Scalar> Backward<F> for MulBcastChannelOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let x = values[parents[0].0]
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let m = values[parents[1].0]
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let g = grad_out.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = x.dim();
        if sink.wanted(parents[0]) {
            let mut dx = ndarray::Array3::<F>::zeros((c, h, w));
            for k in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        dx[(k, i, j)] = g[(k, i, j)] * m[(0, i, j)];
                    }
                }
            }
            sink.add(parents[0], dx.into_dyn());
        }
        if sink.wanted(parents[1]) {
            let mut dm = ndarray::Array3::<F>::zeros((1, h, w));
            for k in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        dm[(0, i, j)] += g[(k, i, j)] * x[(k, i, j)];
                    }
                }
            }
            sink.add(parents[1], dm.into_dyn());
        }
    }
}

/// Edge-replicating 1-pixel spatial pad of a `[c, h, w]` map.
struct PadReplicate1Op;

impl<F: Scalar> Backward<F> for PadReplicate1Op {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let d = values[parents[0].0].shape();
        let (c, h, w) = (d[0], d[1], d[2]);
        let g = grad_out.view().into_dimensionality::<Ix3>().unwrap();
        // Adjoint of replication: each padded cell feeds the clamped source.
        let mut dx = ndarray::Array3::<F>::zeros((c, h, w));
        for k in 0..c {
            for i in 0..h + 2 {
                let si = i.saturating_sub(1).min(h - 1);
                for j in 0..w + 2 {
                    let sj = j.saturating_sub(1).min(w - 1);
                    dx[(k, si, sj)] += g[(k, i, j)];
                }
            }
        }
        sink.add(parents[0], dx.into_dyn());
    }
}

struct SliceChannelsOp {
    start: usize,
    end: usize,
}

impl<F: Scalar> Backward<F> for SliceChannelsOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let mut dx = ArrayD::<F>::zeros(values[parents[0].0].raw_dim());
        dx.slice_axis_mut(Axis(0), Slice::from(self.start..self.end))
            .assign(grad_out);
        sink.add(parents[0], dx);
    }
}

// ---------------------------------------------------------------------------
// Vector ops and reductions

const L2_FLOOR: f64 = 1e-12;

struct L2NormalizeOp<F> {
    norm: F,
}

impl<F: Scalar> Backward<F> for L2NormalizeOp<F> {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let y = &values[out];
        // dx = (g - y <y, g>) / ||x||
        let mut dot = F::ZERO;
        for (&yv, &gv) in y.iter().zip(grad_out.iter()) {
            dot += yv * gv;
        }
        let mut dx = grad_out.clone();
        ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
            *d = (*d - yv * dot) / self.norm;
        });
        sink.add(parents[0], dx);
    }
}

struct DotVecOp;

impl<F: Scalar> Backward<F> for DotVecOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let g = grad_scalar(grad_out);
        let a = &values[parents[0].0];
        let b = &values[parents[1].0];
        sink.add(parents[0], b.mapv(|v| v * g));
        sink.add(parents[1], a.mapv(|v| v * g));
    }
}

struct SumAllOp;

impl<F: Scalar> Backward<F> for SumAllOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let g = grad_scalar(grad_out);
        let shape = values[parents[0].0].raw_dim();
        sink.add(parents[0], ArrayD::from_elem(shape, g));
    }
}

struct MeanAllOp;

impl<F: Scalar> Backward<F> for MeanAllOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let shape = values[parents[0].0].raw_dim();
        let n = F::from_f64(values[parents[0].0].len() as f64);
        let g = grad_scalar(grad_out) / n;
        sink.add(parents[0], ArrayD::from_elem(shape, g));
    }
}

// ---------------------------------------------------------------------------
// Spatial finite differences

/// Forward difference along an image axis (1 = rows/vertical, 2 = cols/
/// horizontal); the final line along that axis is zero.
struct FwdDiffOp {
    axis: usize,
}

impl<F: Scalar> Backward<F> for FwdDiffOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let d = values[parents[0].0].shape();
        let (c, h, w) = (d[0], d[1], d[2]);
        let g = grad_out.view().into_dimensionality::<Ix3>().unwrap();
        let mut dx = ndarray::Array3::<F>::zeros((c, h, w));
        let limit = if self.axis == 1 { h - 1 } else { w - 1 };
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let along = if self.axis == 1 { i } else { j };
                    if along >= limit {
                        continue;
                    }
                    let gv = g[(k, i, j)];
                    dx[(k, i, j)] -= gv;
                    if self.axis == 1 {
                        dx[(k, i + 1, j)] += gv;
                    } else {
                        dx[(k, i, j + 1)] += gv;
                    }
                }
            }
        }
        sink.add(parents[0], dx.into_dyn());
    }
}

// ---------------------------------------------------------------------------
// Power and log

/// Clamp distance from zero used when differentiating `x^p` and `ln x`
/// near the singular point.
const POW_DELTA: f64 = 1e-4;

/// Elementwise `x^p` with `0^p` defined as 0. Derivatives clamp the base to
/// `POW_DELTA` so gradients stay finite on black pixels.
struct PowElemOp;

impl<F: Scalar> Backward<F> for PowElemOp {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let x = &values[parents[0].0];
        let p = &values[parents[1].0];
        let y = &values[out];
        let delta = F::from_f64(POW_DELTA);
        let mut dx = grad_out.clone();
        let mut dp = grad_out.clone();
        for (((dxv, dpv), (&xv, &pv)), &yv) in dx
            .iter_mut()
            .zip(dp.iter_mut())
            .zip(x.iter().zip(p.iter()))
            .zip(y.iter())
        {
            if xv <= F::ZERO {
                *dxv = F::ZERO;
                *dpv = F::ZERO;
            } else {
                let xc = xv.maximum(delta);
                *dxv = *dxv * pv * xc.powf(pv - F::ONE);
                *dpv = *dpv * yv * xc.ln();
            }
        }
        sink.add(parents[0], dx);
        sink.add(parents[1], dp);
    }
}

/// `ln(max(x, floor))`; gradient is zero in the clamped region.
struct LnFlooredOp<F> {
    floor: F,
}

impl<F: Scalar> Backward<F> for LnFlooredOp<F> {
    fn backward(
        &self,
        values: &[ArrayD<F>],
        _out: usize,
        parents: &[Var],
        grad_out: &ArrayD<F>,
        sink: &mut GradSink<'_, F>,
    ) {
        let x = &values[parents[0].0];
        let mut dx = grad_out.clone();
        ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
            *d = if xv > self.floor { *d / xv } else { F::ZERO };
        });
        sink.add(parents[0], dx);
    }
}

// ---------------------------------------------------------------------------
// Graph construction methods

impl<F: Scalar> Graph<F> {
    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what} needs matching shapes"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push_op(v, Box::new(AddOp), vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push_op(v, Box::new(SubOp), vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push_op(v, Box::new(MulOp), vec![a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = F::from_f64(k);
        let v = self.value(a).mapv(|x| x * k);
        self.push_op(v, Box::new(ScaleOp { k }), vec![a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let k = F::from_f64(k);
        let v = self.value(a).mapv(|x| x + k);
        self.push_op(v, Box::new(ShiftOp), vec![a])
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push_op(v, Box::new(SqrOp), vec![a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_val);
        self.push_op(v, Box::new(PointwiseOp { dfdx: gelu_dfdx }), vec![a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| F::ONE / (F::ONE + (-x).exp()));
        fn d<F: Scalar>(_x: F, y: F) -> F {
            y * (F::ONE - y)
        }
        self.push_op(v, Box::new(PointwiseOp { dfdx: d::<F> }), vec![a])
    }

    pub fn tanh_act(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        fn d<F: Scalar>(_x: F, y: F) -> F {
            F::ONE - y * y
        }
        self.push_op(v, Box::new(PointwiseOp { dfdx: d::<F> }), vec![a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = F::from_f64(slope);
        let v = self.value(a).mapv(|x| if x > F::ZERO { x } else { x * s });
        struct LeakyOp<F> {
            s: F,
        }
        impl<F: Scalar> Backward<F> for LeakyOp<F> {
            fn backward(
                &self,
                values: &[ArrayD<F>],
                _out: usize,
                parents: &[Var],
                grad_out: &ArrayD<F>,
                sink: &mut GradSink<'_, F>,
            ) {
                let x = &values[parents[0].0];
                let mut g = grad_out.clone();
                ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
                    if x <= F::ZERO {
                        *g = *g * self.s;
                    }
                });
                sink.add(parents[0], g);
            }
        }
        self.push_op(v, Box::new(LeakyOp { s }), vec![a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b)));
        self.push_op(
            v.into_dyn(),
            Box::new(MatmulOp { ta: false, tb: false }),
            vec![a, b],
        )
    }

    /// `a^T b` without materializing the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).t().dot(&as2(self.value(b)));
        self.push_op(
            v.into_dyn(),
            Box::new(MatmulOp { ta: true, tb: false }),
            vec![a, b],
        )
    }

    /// `a b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b)).t());
        self.push_op(
            v.into_dyn(),
            Box::new(MatmulOp { ta: false, tb: true }),
            vec![a, b],
        )
    }

    /// Adds `bias[i]` to every entry of row `i`.
    pub fn add_bias_rows(&mut self, x: Var, bias: Var) -> Var {
        let xv = as2(self.value(x));
        let bv = self.value(bias);
        assert_eq!(xv.dim().0, bv.len(), "bias length must match rows");
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let v = &xv + &b1.insert_axis(Axis(1));
        self.push_op(v.into_dyn(), Box::new(AddBiasRowsOp), vec![x, bias])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let from = self.shape(x).to_vec();
        let v = reshape_arr(self.value(x).clone(), shape);
        self.push_op(v, Box::new(ReshapeOp { from }), vec![x])
    }

    /// Softmax across each row of a `[m, n]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        assert_eq!(self.shape(x).len(), 2, "softmax_rows expects a matrix");
        let v = softmax_axis(self.value(x), 1);
        self.push_op(v, Box::new(SoftmaxOp { axis: 1 }), vec![x])
    }

    /// Softmax across channels at every spatial position of `[k, h, w]`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        assert_eq!(self.shape(x).len(), 3, "softmax_channels expects [k,h,w]");
        let v = softmax_axis(self.value(x), 0);
        self.push_op(v, Box::new(SoftmaxOp { axis: 0 }), vec![x])
    }

    pub fn layer_norm_channels(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let d = self.shape(x).to_vec();
        assert_eq!(d.len(), 3, "layer_norm expects [c,h,w]");
        assert_eq!(self.shape(gain), &[d[0]], "gain must be per-channel");
        assert_eq!(self.shape(bias), &[d[0]], "bias must be per-channel");
        let (c, h, w) = (d[0], d[1], d[2]);
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let gv = self.value(gain).view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        let cf = F::from_f64(c as f64);
        let eps = F::from_f64(LAYER_NORM_EPS);
        let mut y = ndarray::Array3::<F>::zeros((c, h, w));
        for i in 0..h {
            for j in 0..w {
                let mut mean = F::ZERO;
                for k in 0..c {
                    mean += xv[(k, i, j)];
                }
                mean = mean / cf;
                let mut var = F::ZERO;
                for k in 0..c {
                    let dlt = xv[(k, i, j)] - mean;
                    var += dlt * dlt;
                }
                var = var / cf;
                let inv_std = F::ONE / (var + eps).sqrt();
                for k in 0..c {
                    y[(k, i, j)] = gv[k] * (xv[(k, i, j)] - mean) * inv_std + bv[k];
                }
            }
        }
        self.push_op(y.into_dyn(), Box::new(LayerNormOp), vec![x, gain, bias])
    }

    /// Convolution with square padding; `bias` holds one value per output
    /// channel when present.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xd = self.shape(x).to_vec();
        let wd = self.shape(w).to_vec();
        assert_eq!(xd.len(), 3, "conv input must be [ci,h,w]");
        assert_eq!(wd.len(), 4, "conv kernel must be [co,ci,kh,kw]");
        assert_eq!(xd[0], wd[1], "conv channel mismatch");
        assert!(stride >= 1, "conv stride must be at least 1");
        let (co, kh, kw) = (wd[0], wd[2], wd[3]);
        let oh = conv_out_side(xd[1], kh, stride, pad);
        let ow = conv_out_side(xd[2], kw, stride, pad);
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[co], "conv bias must be per-channel");
        }

        let cols = im2col(self.value(x), kh, kw, stride, pad);
        let wmat = self.value(w).to_shape((co, wd[1] * kh * kw)).unwrap();
        let mut out2 = wmat.dot(&cols);
        if let Some(b) = bias {
            let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
            out2 += &bv.insert_axis(Axis(1));
        }
        let v = reshape_arr(out2.into_dyn(), &[co, oh, ow]);
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push_op(
            v,
            Box::new(Conv2dOp {
                stride,
                pad,
                cols,
                has_bias: bias.is_some(),
            }),
            parents,
        )
    }

    /// 2x2 mean pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let d = self.shape(x).to_vec();
        assert_eq!(d.len(), 3, "avg_pool2 expects [c,h,w]");
        assert!(
            d[1] % 2 == 0 && d[2] % 2 == 0,
            "avg_pool2 needs even spatial dims, got {}x{}",
            d[1],
            d[2]
        );
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (d[0], d[1] / 2, d[2] / 2);
        let quarter = F::from_f64(0.25);
        let mut y = ndarray::Array3::<F>::zeros((c, h, w));
        for k in 0..c {
            for i in 0..h {
                for j in 0..w {
                    y[(k, i, j)] = (xv[(k, 2 * i, 2 * j)]
                        + xv[(k, 2 * i, 2 * j + 1)]
                        + xv[(k, 2 * i + 1, 2 * j)]
                        + xv[(k, 2 * i + 1, 2 * j + 1)])
                        * quarter;
                }
            }
        }
        self.push_op(y.into_dyn(), Box::new(AvgPool2Op), vec![x])
    }

    /// Doubles both spatial dims by pixel replication.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let d = self.shape(x).to_vec();
        assert_eq!(d.len(), 3, "upsample expects [c,h,w]");
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (d[0], d[1], d[2]);
        let y = ndarray::Array3::<F>::from_shape_fn((c, 2 * h, 2 * w), |(k, i, j)| {
            xv[(k, i / 2, j / 2)]
        });
        self.push_op(y.into_dyn(), Box::new(UpsampleNearest2Op), vec![x])
    }

    /// Corner-aligned bilinear resize of `[c, h, w]` to `[c, out_h, out_w]`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let d = self.shape(x).to_vec();
        assert_eq!(d.len(), 3, "resize expects [c,h,w]");
        assert!(out_h > 0 && out_w > 0, "resize target must be non-empty");
        let rows = resize_table::<F>(out_h, d[1]);
        let cols = resize_table::<F>(out_w, d[2]);
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let y = ndarray::Array3::<F>::from_shape_fn((d[0], out_h, out_w), |(k, i, j)| {
            let (i0, i1, fi) = rows[i];
            let (j0, j1, fj) = cols[j];
            let top = xv[(k, i0, j0)] * (F::ONE - fj) + xv[(k, i0, j1)] * fj;
            let bot = xv[(k, i1, j0)] * (F::ONE - fj) + xv[(k, i1, j1)] * fj;
            top * (F::ONE - fi) + bot * fi
        });
        self.push_op(
            y.into_dyn(),
            Box::new(ResizeBilinearOp {
                rows,
                cols,
                src_shape: d,
            }),
            vec![x],
        )
    }

    /// Stacks `a` on top of `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let da = self.shape(a).to_vec();
        let db = self.shape(b).to_vec();
        assert_eq!(da.len(), 3, "concat expects [c,h,w]");
        assert_eq!(
            (da[1], da[2]),
            (db[1], db[2]),
            "concat spatial dims must match"
        );
        let v = ndarray::concatenate(
            Axis(0),
            &[self.value(a).view(), self.value(b).view()],
        )
        .expect("validated concat");
        self.push_op(
            v,
            Box::new(ConcatChannelsOp { split: da[0] }),
            vec![a, b],
        )
    }

    pub fn mul_bcast_channel(&mut self, x: Var, m: Var) -> Var {
        let dx = self.shape(x).to_vec();
        let dm = self.shape(m).to_vec();
        assert_eq!(dx.len(), 3, "broadcast mul expects [c,h,w]");
        assert_eq!(dm, vec![1, dx[1], dx[2]], "mask must be [1,h,w]");
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let mv = self.value(m).view().into_dimensionality::<Ix3>().unwrap();
        let y = ndarray::Array3::<F>::from_shape_fn((dx[0], dx[1], dx[2]), |(k, i, j)| {
            xv[(k, i, j)] * mv[(0, i, j)]
        });
        self.push_op(y.into_dyn(), Box::new(MulBcastChannelOp), vec![x, m])
    }

    /// Pads a `[c, h, w]` map by one pixel on every spatial edge, replicating
    /// border values.
    pub fn pad_replicate1(&mut self, x: Var) -> Var {
        let d = self.shape(x).to_vec();
        assert_eq!(d.len(), 3, "pad_replicate1 expects [c,h,w]");
        let (c, h, w) = (d[0], d[1], d[2]);
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let y = ndarray::Array3::<F>::from_shape_fn((c, h + 2, w + 2), |(k, i, j)| {
            xv[(k, i.saturating_sub(1).min(h - 1), j.saturating_sub(1).min(w - 1))]
        });
        self.push_op(y.into_dyn(), Box::new(PadReplicate1Op), vec![x])
    }

    /// Keeps channels `start..end` of a `[c, h, w]` map.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Var {
        let d = self.shape(x).to_vec();
        assert_eq!(d.len(), 3, "slice_channels expects [c,h,w]");
        assert!(start < end && end <= d[0], "invalid channel range");
        let v = self
            .value(x)
            .slice_axis(Axis(0), Slice::from(start..end))
            .to_owned();
        self.push_op(v, Box::new(SliceChannelsOp { start, end }), vec![x])
    }

    /// Scales a vector to unit Euclidean length (with a tiny floor to keep
    /// the zero vector finite).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        assert_eq!(self.shape(x).len(), 1, "l2_normalize expects a vector");
        let mut sq = F::ZERO;
        for &v in self.value(x).iter() {
            sq += v * v;
        }
        let norm = sq.sqrt().maximum(F::from_f64(L2_FLOOR));
        let v = self.value(x).mapv(|x| x / norm);
        self.push_op(v, Box::new(L2NormalizeOp { norm }), vec![x])
    }

    pub fn dot_vec(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "dot_vec");
        assert_eq!(self.shape(a).len(), 1, "dot_vec expects vectors");
        let mut acc = F::ZERO;
        for (&x, &y) in self.value(a).iter().zip(self.value(b).iter()) {
            acc += x * y;
        }
        self.push_op(scalar_arr(acc), Box::new(DotVecOp), vec![a, b])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = F::ZERO;
        for &v in self.value(x).iter() {
            acc += v;
        }
        self.push_op(scalar_arr(acc), Box::new(SumAllOp), vec![x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = F::from_f64(self.value(x).len() as f64);
        let mut acc = F::ZERO;
        for &v in self.value(x).iter() {
            acc += v;
        }
        self.push_op(scalar_arr(acc / n), Box::new(MeanAllOp), vec![x])
    }

    /// Horizontal forward difference, zero in the last column.
    pub fn fwd_diff_x(&mut self, x: Var) -> Var {
        self.fwd_diff(x, 2)
    }

    /// Vertical forward difference, zero in the last row.
    pub fn fwd_diff_y(&mut self, x: Var) -> Var {
        self.fwd_diff(x, 1)
    }

    fn fwd_diff(&mut self, x: Var, axis: usize) -> Var {
        let d = self.shape(x).to_vec();
        assert_eq!(d.len(), 3, "fwd_diff expects [c,h,w]");
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (d[0], d[1], d[2]);
        let y = ndarray::Array3::<F>::from_shape_fn((c, h, w), |(k, i, j)| {
            if axis == 1 {
                if i + 1 < h {
                    xv[(k, i + 1, j)] - xv[(k, i, j)]
                } else {
                    F::ZERO
                }
            } else if j + 1 < w {
                xv[(k, i, j + 1)] - xv[(k, i, j)]
            } else {
                F::ZERO
            }
        });
        self.push_op(y.into_dyn(), Box::new(FwdDiffOp { axis }), vec![x])
    }

    /// Elementwise power with a differentiable exponent; see [`PowElemOp`].
    pub fn pow_elem(&mut self, x: Var, p: Var) -> Var {
        self.assert_same_shape(x, p, "pow_elem");
        let v = ndarray::Zip::from(self.value(x))
            .and(self.value(p))
            .map_collect(|&x, &p| if x <= F::ZERO { F::ZERO } else { x.powf(p) });
        self.push_op(v, Box::new(PowElemOp), vec![x, p])
    }

    pub fn ln_floored(&mut self, x: Var, floor: f64) -> Var {
        let fl = F::from_f64(floor);
        let v = self.value(x).mapv(|x| x.maximum(fl).ln());
        self.push_op(v, Box::new(LnFlooredOp { floor: fl }), vec![x])
    }
}
