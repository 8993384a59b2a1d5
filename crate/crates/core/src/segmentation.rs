//! Semantic segmentation priors.
//!
//! A segmentation backend turns an RGB image into (a) per-pixel class
//! probabilities and (b) a pyramid of feature maps the enhancement network
//! attends to. Backends are frozen: the enhancer trains against their
//! outputs but never updates their weights. The built-in backend is a small
//! seeded convolutional net standing in for an external segmenter; it is
//! untrained, which is fine because the pipeline only needs a fixed,
//! deterministic, differentiable feature extractor.

use ndarray::{Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::imaging::{to_chw, ImageTensor};
use crate::params::{init, ModelParameters};

/// Segmentation evidence for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPrior {
    /// Per-pixel class probabilities, `(h, w, k)`, each pixel summing to 1.
    pub seg_map: Array3<f64>,
    /// Feature pyramid; level `b` has shape `[c_b, h / 2^b, w / 2^b]`.
    pub features: Vec<ArrayD<f64>>,
}

impl SemanticPrior {
    pub fn num_classes(&self) -> usize {
        self.seg_map.dim().2
    }

    pub fn num_scales(&self) -> usize {
        self.features.len()
    }
}

/// Graph handles produced by a backend's differentiable forward pass.
pub struct PriorVars {
    /// Class logits `[k, h, w]` (softmax over the class axis gives `seg_map`).
    pub seg_logits: Var,
    /// Feature pyramid, finest first.
    pub features: Vec<Var>,
}

/// A frozen segmentation network.
///
/// `prior_graph` is generic over the float type so the same weights serve
/// f32 training and f64 gradient verification; implementations must not
/// mutate any internal state.
pub trait SegmentationBackend {
    fn num_classes(&self) -> usize;
    fn num_scales(&self) -> usize;
    /// Feature channels per pyramid level, finest first.
    fn feature_channels(&self) -> Vec<usize>;
    /// Appends the forward pass for an `[3, h, w]` image node to `g`.
    fn prior_graph<F: Scalar>(&self, g: &mut Graph<F>, img: Var) -> Result<PriorVars>;
}

/// Runs a backend on an image and materializes the prior.
///
/// Grayscale images are replicated to RGB first. Spatial dims must be
/// divisible by `2^(scales - 1)` so the pyramid divides evenly.
pub fn extract_prior<B: SegmentationBackend>(backend: &B, img: &ImageTensor) -> Result<SemanticPrior> {
    let rgb = img.to_rgb();
    let mut g = Graph::<f64>::new();
    let x = g.constant(to_chw(&rgb));
    let pv = backend.prior_graph(&mut g, x)?;
    let probs = g.softmax_channels(pv.seg_logits);
    let p = g.value(probs);
    let (k, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let seg_map = Array3::from_shape_fn((h, w, k), |(i, j, c)| p[[c, i, j]]);
    let features = pv.features.iter().map(|&f| g.value(f).clone()).collect();
    Ok(SemanticPrior { seg_map, features })
}

/// Checks the divisibility precondition shared by every pyramid consumer.
pub fn check_pyramid_dims(h: usize, w: usize, scales: usize) -> Result<()> {
    let div = 1usize << (scales - 1);
    if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
        return Err(Error::shape(format!(
            "spatial dims {h}x{w} must be non-zero multiples of {div} for a {scales}-level pyramid"
        )));
    }
    Ok(())
}

/// Built-in frozen backend: a chain of seeded 3x3 convolutions with tanh
/// nonlinearities. Level 0 keeps full resolution; each further level halves
/// it with stride 2. Class logits sum per-level 1x1 projections, upsampled
/// back to full resolution.
pub struct ToySegmenter {
    classes: usize,
    widths: Vec<usize>,
    params: ModelParameters,
    seed: u64,
}

/// Width of the finest toy feature level; level `b` doubles it `b` times.
pub const TOY_SEG_BASE_WIDTH: usize = 8;

/// Builds the frozen built-in segmentation backend.
pub fn make_toy_backend(seed: u64, classes: usize, scales: usize) -> Result<ToySegmenter> {
    if classes < 2 {
        return Err(Error::invalid(format!(
            "segmentation needs at least 2 classes, got {classes}"
        )));
    }
    if !(1..=5).contains(&scales) {
        return Err(Error::invalid(format!(
            "feature pyramid depth must be 1..=5, got {scales}"
        )));
    }
    let widths: Vec<usize> = (0..scales).map(|b| TOY_SEG_BASE_WIDTH << b).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParameters::new();
    for b in 0..scales {
        let cin = if b == 0 { 3 } else { widths[b - 1] };
        params.insert(format!("conv{b}.w"), init::conv_kernel(&mut rng, widths[b], cin, 3, 3))?;
        params.insert(format!("conv{b}.b"), init::zeros(&[widths[b]]))?;
    }
    for (b, &wb) in widths.iter().enumerate() {
        params.insert(format!("logit{b}.w"), init::conv_kernel(&mut rng, classes, wb, 1, 1))?;
        params.insert(format!("logit{b}.b"), init::zeros(&[classes]))?;
    }
    Ok(ToySegmenter {
        classes,
        widths,
        params,
        seed,
    })
}

impl ToySegmenter {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Frozen weights, exposed for determinism audits.
    pub fn params(&self) -> &ModelParameters {
        &self.params
    }
}

impl SegmentationBackend for ToySegmenter {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn num_scales(&self) -> usize {
        self.widths.len()
    }

    fn feature_channels(&self) -> Vec<usize> {
        self.widths.clone()
    }

    fn prior_graph<F: Scalar>(&self, g: &mut Graph<F>, img: Var) -> Result<PriorVars> {
        let d = g.shape(img).to_vec();
        if d.len() != 3 || d[0] != 3 {
            return Err(Error::shape(format!(
                "segmentation input must be [3,h,w], got {d:?}"
            )));
        }
        check_pyramid_dims(d[1], d[2], self.widths.len())?;

        // Weights enter as constants: frozen means no gradient ever reaches
        // them, while gradients still flow through to the image input.
        let cv = |g: &mut Graph<F>, name: &str| -> Var {
            let arr = self
                .params
                .get(name)
                .unwrap_or_else(|| panic!("toy segmenter misses {name:?}"))
                .mapv(|v| F::from_f64(v as f64));
            g.constant(arr)
        };

        let mut features = Vec::with_capacity(self.widths.len());
        let mut cur = img;
        for b in 0..self.widths.len() {
            let w = cv(g, &format!("conv{b}.w"));
            let bias = cv(g, &format!("conv{b}.b"));
            let stride = if b == 0 { 1 } else { 2 };
            let conv = g.conv2d(cur, w, Some(bias), stride, 1);
            cur = g.tanh_act(conv);
            features.push(cur);
        }

        let mut logits: Option<Var> = None;
        for (b, &feat) in features.iter().enumerate() {
            let w = cv(g, &format!("logit{b}.w"));
            let bias = cv(g, &format!("logit{b}.b"));
            let mut head = g.conv2d(feat, w, Some(bias), 1, 0);
            for _ in 0..b {
                head = g.upsample_nearest2(head);
            }
            logits = Some(match logits {
                Some(acc) => g.add(acc, head),
                None => head,
            });
        }
        Ok(PriorVars {
            seg_logits: logits.expect("at least one level"),
            features,
        })
    }
}
