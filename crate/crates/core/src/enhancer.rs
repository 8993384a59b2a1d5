//! The enhancement network.
//!
//! Enhancement splits the input into reflectance and illumination, refines
//! the reflectance with a coarse-to-fine pair of U-shaped networks whose
//! encoder levels fuse frozen segmentation features through cross-attention,
//! and brightens the illumination with a small learned pointwise gamma. The
//! refined reflectance times the adjusted illumination is the output.
//!
//! All trainable tensors live in a flat [`ModelParameters`] store under
//! hierarchical names (`fine.enc0.conv.w`, ...); the same walk that creates
//! them also yields the manifest used for checkpoint validation.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_block_graph, check_attention_size, project_channels, AttentionVars,
};
use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::imaging::{from_chw, to_chw, ImageTensor};
use crate::params::{init, BoundParameters, ModelParameters};
use crate::retinex::{decompose, RetinexDecomposition};
use crate::segmentation::{check_pyramid_dims, extract_prior, SegmentationBackend, SemanticPrior};

/// Negative slope of every leaky rectifier in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Illumination gain range: `gain = GAIN_MIN + GAIN_SPAN * sigmoid(x)`.
pub const GAIN_MIN: f64 = 0.1;
pub const GAIN_SPAN: f64 = 0.9;

/// Architecture of the enhancement network.
///
/// `scales`, `seg_classes`, and `seg_channels` must agree with the frozen
/// segmentation backend the network is trained against. With attention
/// enabled, the finest level holds a dense position-by-position attention
/// matrix, which caps the usable image area (see
/// [`crate::attention::MAX_ATTENTION_POSITIONS`]).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Pyramid depth of each refinement stage.
    pub scales: usize,
    /// Channels at the finest level; level `b` has `base_width << b`.
    pub base_width: usize,
    /// Run a half-resolution stage first and feed its result to the fine one.
    pub coarse_to_fine: bool,
    /// Fuse segmentation features via cross-attention at every level.
    pub use_attention: bool,
    /// Classes produced by the segmentation backend.
    pub seg_classes: usize,
    /// Feature channels per backend pyramid level, finest first.
    pub seg_channels: Vec<usize>,
    /// Width of the illumination adjustment head.
    pub illum_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            scales: 3,
            base_width: 16,
            coarse_to_fine: true,
            use_attention: true,
            seg_classes: 8,
            seg_channels: vec![8, 16, 32],
            illum_width: 8,
        }
    }
}

impl NetConfig {
    /// Default widened variant for longer runs.
    pub fn large() -> Self {
        NetConfig {
            base_width: 32,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scales) {
            return Err(Error::Config(format!(
                "scales must be in 2..=4, got {}",
                self.scales
            )));
        }
        if self.base_width < 2 {
            return Err(Error::Config("base_width must be at least 2".into()));
        }
        if self.seg_classes < 2 {
            return Err(Error::Config("seg_classes must be at least 2".into()));
        }
        if self.seg_channels.len() != self.scales {
            return Err(Error::Config(format!(
                "seg_channels must list one width per scale ({}), got {}",
                self.scales,
                self.seg_channels.len()
            )));
        }
        if self.seg_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("seg_channels must be positive".into()));
        }
        if self.illum_width == 0 {
            return Err(Error::Config("illum_width must be positive".into()));
        }
        Ok(())
    }

    /// Channel width per level, finest first.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.scales).map(|b| self.base_width << b).collect()
    }

    /// Spatial dims of enhanced images must be multiples of this.
    pub fn divisor(&self) -> usize {
        (1usize << (self.scales - 1)) * if self.coarse_to_fine { 2 } else { 1 }
    }

    fn stages(&self) -> Vec<&'static str> {
        if self.coarse_to_fine {
            vec!["coarse", "fine"]
        } else {
            vec!["fine"]
        }
    }

    fn stage_input_channels(&self, stage: &str) -> usize {
        // The fine stage sees the reflectance plus the upsampled coarse
        // result; the coarse stage (and a single-stage net) sees only the
        // reflectance.
        if stage == "fine" && self.coarse_to_fine {
            6
        } else {
            3
        }
    }
}

/// Checks that a network config and a segmentation backend agree on the
/// pyramid contract.
pub fn check_backend_compat<B: SegmentationBackend>(cfg: &NetConfig, backend: &B) -> Result<()> {
    if backend.num_classes() != cfg.seg_classes
        || backend.num_scales() != cfg.scales
        || backend.feature_channels() != cfg.seg_channels
    {
        return Err(Error::Config(format!(
            "segmentation backend provides {} classes / {} scales / {:?} channels, \
             config expects {} / {} / {:?}",
            backend.num_classes(),
            backend.num_scales(),
            backend.feature_channels(),
            cfg.seg_classes,
            cfg.scales,
            cfg.seg_channels
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Parameter store

enum ParamKind {
    /// Kaiming-uniform convolution kernel.
    Conv,
    /// Kaiming-uniform kernel scaled down for a gentle start (output heads).
    ConvSmall,
    /// Kaiming-uniform matrix (fan-in = columns).
    Matrix,
    /// Scaled-down matrix (second feed-forward layer).
    MatrixSmall,
    Zeros,
    Ones,
}

/// Single source of truth for parameter names, shapes, and init kinds.
fn walk_parameters(cfg: &NetConfig, mut f: impl FnMut(String, Vec<usize>, ParamKind)) {
    use ParamKind::*;
    let widths = cfg.widths();
    for stage in cfg.stages() {
        for b in 0..cfg.scales {
            let w = widths[b];
            let ci = if b == 0 {
                cfg.stage_input_channels(stage)
            } else {
                widths[b - 1]
            };
            f(format!("{stage}.enc{b}.conv.w"), vec![w, ci, 3, 3], Conv);
            f(format!("{stage}.enc{b}.conv.b"), vec![w], Zeros);
            if cfg.use_attention {
                let s = cfg.seg_channels[b];
                let att = |suffix: &str| format!("{stage}.enc{b}.att.{suffix}");
                f(att("proj.w"), vec![w, s], Matrix);
                f(att("proj.b"), vec![w], Zeros);
                f(att("ln_refl.gain"), vec![w], Ones);
                f(att("ln_refl.bias"), vec![w], Zeros);
                f(att("ln_sem.gain"), vec![w], Ones);
                f(att("ln_sem.bias"), vec![w], Zeros);
                f(att("wk"), vec![w, w], Matrix);
                f(att("wq"), vec![w, w], Matrix);
                f(att("wv"), vec![w, w], Matrix);
                f(att("ffn.w1"), vec![2 * w, w], Matrix);
                f(att("ffn.b1"), vec![2 * w], Zeros);
                f(att("ffn.w2"), vec![w, 2 * w], MatrixSmall);
                f(att("ffn.b2"), vec![w], Zeros);
            }
        }
        for b in (0..cfg.scales - 1).rev() {
            let (w, upper) = (widths[b], widths[b + 1]);
            f(format!("{stage}.dec{b}.conv.w"), vec![w, upper + w, 3, 3], Conv);
            f(format!("{stage}.dec{b}.conv.b"), vec![w], Zeros);
        }
        f(format!("{stage}.head.w"), vec![3, widths[0], 1, 1], ConvSmall);
        f(format!("{stage}.head.b"), vec![3], Zeros);
    }
    let iw = cfg.illum_width;
    f("fine.illum.c0.w".into(), vec![iw, 1, 3, 3], Conv);
    f("fine.illum.c0.b".into(), vec![iw], Zeros);
    f("fine.illum.c1.w".into(), vec![iw, iw, 3, 3], Conv);
    f("fine.illum.c1.b".into(), vec![iw], Zeros);
    f("fine.illum.c2.w".into(), vec![1, iw, 3, 3], ConvSmall);
    f("fine.illum.c2.b".into(), vec![1], Zeros);
}

/// Name and shape of every parameter the config implies, in storage order.
pub fn parameter_manifest(cfg: &NetConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    walk_parameters(cfg, |name, shape, _| out.push((name, shape)));
    Ok(out)
}

/// Freshly initialized parameters for the given architecture.
pub fn init_parameters(cfg: &NetConfig, seed: u64) -> Result<ModelParameters> {
    use rand::SeedableRng;
    cfg.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParameters::new();
    // Output heads start small so early outputs sit near mid-gray instead of
    // saturating the sigmoid, without blocking gradients the way zeros would.
    const HEAD_GAIN: f32 = 0.1;
    walk_parameters(cfg, |name, shape, kind| {
        let arr = match kind {
            ParamKind::Conv => init::conv_kernel(&mut rng, shape[0], shape[1], shape[2], shape[3]),
            ParamKind::ConvSmall => init::conv_kernel(&mut rng, shape[0], shape[1], shape[2], shape[3])
                .mapv(|v| v * HEAD_GAIN),
            ParamKind::Matrix => init::matrix(&mut rng, shape[0], shape[1]),
            ParamKind::MatrixSmall => init::matrix(&mut rng, shape[0], shape[1]).mapv(|v| v * HEAD_GAIN),
            ParamKind::Zeros => init::zeros(&shape),
            ParamKind::Ones => init::ones(&shape),
        };
        params.insert(name, arr).expect("walk emits unique names");
    });
    Ok(params)
}

/// Total trainable scalars the config implies.
pub fn count_parameters(cfg: &NetConfig) -> Result<usize> {
    Ok(parameter_manifest(cfg)?
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum())
}

fn attention_vars(bound: &BoundParameters, stage: &str, b: usize) -> AttentionVars {
    let v = |suffix: &str| bound.var(&format!("{stage}.enc{b}.att.{suffix}"));
    AttentionVars {
        key_proj: v("wk"),
        query_proj: v("wq"),
        value_proj: v("wv"),
        norm_refl_gain: v("ln_refl.gain"),
        norm_refl_bias: v("ln_refl.bias"),
        norm_sem_gain: v("ln_sem.gain"),
        norm_sem_bias: v("ln_sem.bias"),
        ffn_w1: v("ffn.w1"),
        ffn_b1: v("ffn.b1"),
        ffn_w2: v("ffn.w2"),
        ffn_b2: v("ffn.b2"),
    }
}

// ---------------------------------------------------------------------------
// Priors

/// Segmentation evidence for both stages, extracted from the input image.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStack {
    pub fine: SemanticPrior,
    /// Present exactly when the config runs coarse-to-fine; extracted from a
    /// half-resolution resize of the input.
    pub coarse: Option<SemanticPrior>,
}

/// Runs the segmentation backend on the input (and its half-resolution
/// resize when coarse-to-fine is on).
pub fn extract_prior_stack<B: SegmentationBackend>(
    backend: &B,
    img: &ImageTensor,
    cfg: &NetConfig,
) -> Result<PriorStack> {
    cfg.validate()?;
    check_backend_compat(cfg, backend)?;
    let (h, w) = (img.height(), img.width());
    check_enhance_dims(h, w, cfg)?;
    let fine = extract_prior(backend, img)?;
    let coarse = if cfg.coarse_to_fine {
        let half = img.resize_bilinear(h / 2, w / 2)?;
        Some(extract_prior(backend, &half)?)
    } else {
        None
    };
    Ok(PriorStack { fine, coarse })
}

fn check_enhance_dims(h: usize, w: usize, cfg: &NetConfig) -> Result<()> {
    let div = cfg.divisor();
    if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
        return Err(Error::shape(format!(
            "image dims {h}x{w} must be non-zero multiples of {div} for this config"
        )));
    }
    check_pyramid_dims(h, w, cfg.scales)
}

fn validate_prior(prior: &SemanticPrior, h: usize, w: usize, cfg: &NetConfig) -> Result<()> {
    if prior.seg_map.dim() != (h, w, cfg.seg_classes) {
        return Err(Error::shape(format!(
            "prior class map is {:?}, expected ({h}, {w}, {})",
            prior.seg_map.dim(),
            cfg.seg_classes
        )));
    }
    if prior.num_scales() != cfg.scales {
        return Err(Error::shape(format!(
            "prior has {} feature levels, expected {}",
            prior.num_scales(),
            cfg.scales
        )));
    }
    for (b, feat) in prior.features.iter().enumerate() {
        let want = [cfg.seg_channels[b], h >> b, w >> b];
        if feat.shape() != want {
            return Err(Error::shape(format!(
                "prior feature level {b} is {:?}, expected {want:?}",
                feat.shape()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph assembly

/// Output handles of one full enhancement pass.
pub struct EnhanceVars {
    /// Refined half-resolution reflectance from the coarse stage.
    pub coarse: Option<Var>,
    /// Refined full-resolution reflectance `[3, h, w]`.
    pub reflectance: Var,
    /// Adjusted illumination `[1, h, w]`.
    pub illumination: Var,
    /// Final enhanced image `[3, h, w]`.
    pub output: Var,
}

/// One U-shaped refinement stage: per-level encoder convolutions with
/// optional semantic cross-attention, average-pool downsampling, and a
/// skip-connected decoder ending in a sigmoid head.
fn stage_graph<F: Scalar>(
    g: &mut Graph<F>,
    stage: &str,
    input: Var,
    prior: &SemanticPrior,
    bound: &BoundParameters,
    cfg: &NetConfig,
) -> Result<Var> {
    let mut acts = Vec::with_capacity(cfg.scales);
    let mut x = input;
    for b in 0..cfg.scales {
        if b > 0 {
            x = g.avg_pool2(x);
        }
        let w = bound.var(&format!("{stage}.enc{b}.conv.w"));
        let bias = bound.var(&format!("{stage}.enc{b}.conv.b"));
        let e = g.conv2d(x, w, Some(bias), 1, 1);
        let e = g.leaky_relu(e, LEAKY_SLOPE);
        let a = if cfg.use_attention {
            let d = g.shape(e).to_vec();
            check_attention_size(d[1], d[2])?;
            let feat = g.constant(prior.features[b].mapv(|v| F::from_f64(v)));
            let pw = bound.var(&format!("{stage}.enc{b}.att.proj.w"));
            let pb = bound.var(&format!("{stage}.enc{b}.att.proj.b"));
            let sem = project_channels(g, feat, pw, Some(pb));
            let vars = attention_vars(bound, stage, b);
            attention_block_graph(g, e, sem, &vars).fused
        } else {
            e
        };
        acts.push(a);
        x = a;
    }
    let mut d = acts[cfg.scales - 1];
    for b in (0..cfg.scales - 1).rev() {
        let up = g.upsample_nearest2(d);
        let cat = g.concat_channels(up, acts[b]);
        let w = bound.var(&format!("{stage}.dec{b}.conv.w"));
        let bias = bound.var(&format!("{stage}.dec{b}.conv.b"));
        let c = g.conv2d(cat, w, Some(bias), 1, 1);
        d = g.leaky_relu(c, LEAKY_SLOPE);
    }
    let hw = bound.var(&format!("{stage}.head.w"));
    let hb = bound.var(&format!("{stage}.head.b"));
    let y = g.conv2d(d, hw, Some(hb), 1, 0);
    Ok(g.sigmoid(y))
}

/// Reflectance refinement across both stages. Returns the coarse result (if
/// any) and the full-resolution refined reflectance.
fn refine_graph<F: Scalar>(
    g: &mut Graph<F>,
    refl: Var,
    priors: &PriorStack,
    bound: &BoundParameters,
    cfg: &NetConfig,
) -> Result<(Option<Var>, Var)> {
    let (coarse, fine_in) = if cfg.coarse_to_fine {
        let prior = priors
            .coarse
            .as_ref()
            .ok_or_else(|| Error::invalid("config runs coarse-to-fine but no coarse prior given"))?;
        let half = g.avg_pool2(refl);
        let c = stage_graph(g, "coarse", half, prior, bound, cfg)?;
        let up = g.upsample_nearest2(c);
        (Some(c), g.concat_channels(refl, up))
    } else {
        if priors.coarse.is_some() {
            return Err(Error::invalid(
                "coarse prior given but config is single-stage",
            ));
        }
        (None, refl)
    };
    let refined = stage_graph(g, "fine", fine_in, &priors.fine, bound, cfg)?;
    Ok((coarse, refined))
}

/// Learned pointwise gamma on the illumination map. Returns the gain map in
/// `[GAIN_MIN, GAIN_MIN + GAIN_SPAN]` and the adjusted map `illum ^ gain`;
/// gains below 1 brighten.
fn illum_adjust_graph<F: Scalar>(
    g: &mut Graph<F>,
    illum: Var,
    bound: &BoundParameters,
) -> (Var, Var) {
    let mut t = illum;
    for (i, act) in [(0, true), (1, true), (2, false)] {
        let w = bound.var(&format!("fine.illum.c{i}.w"));
        let b = bound.var(&format!("fine.illum.c{i}.b"));
        t = g.conv2d(t, w, Some(b), 1, 1);
        if act {
            t = g.leaky_relu(t, LEAKY_SLOPE);
        }
    }
    let s = g.sigmoid(t);
    let s = g.scale(s, GAIN_SPAN);
    let gain = g.add_scalar(s, GAIN_MIN);
    let adjusted = g.pow_elem(illum, gain);
    (gain, adjusted)
}

/// Builds the full enhancement pass on top of a decomposition. The inputs
/// enter as constants; gradients flow only to the bound parameters.
pub fn enhance_graph<F: Scalar>(
    g: &mut Graph<F>,
    decomp: &RetinexDecomposition,
    priors: &PriorStack,
    bound: &BoundParameters,
    cfg: &NetConfig,
) -> Result<EnhanceVars> {
    cfg.validate()?;
    let (h, w) = (decomp.reflectance.height(), decomp.reflectance.width());
    check_enhance_dims(h, w, cfg)?;
    validate_prior(&priors.fine, h, w, cfg)?;
    if let Some(coarse) = &priors.coarse {
        validate_prior(coarse, h / 2, w / 2, cfg)?;
    }
    let refl = g.constant(to_chw(&decomp.reflectance));
    let illum = g.constant(to_chw(&decomp.illumination));
    let (coarse, refined) = refine_graph(g, refl, priors, bound, cfg)?;
    let (_, adjusted) = illum_adjust_graph(g, illum, bound);
    let output = g.mul_bcast_channel(refined, adjusted);
    Ok(EnhanceVars {
        coarse,
        reflectance: refined,
        illumination: adjusted,
        output,
    })
}

// ---------------------------------------------------------------------------
// Concrete entry points

/// Concrete results of one enhancement pass.
pub struct Enhanced {
    pub output: ImageTensor,
    pub reflectance: ImageTensor,
    pub illumination: ImageTensor,
    /// Half-resolution coarse-stage reflectance, when the config has one.
    pub coarse: Option<ImageTensor>,
}

/// Runs the network on one image. Dims must be multiples of
/// [`NetConfig::divisor`]; use [`enhance_padded`] otherwise. Runs in f32,
/// the training precision, so results match checkpoints bit for bit.
pub fn enhance(
    img: &ImageTensor,
    priors: &PriorStack,
    params: &ModelParameters,
    cfg: &NetConfig,
) -> Result<Enhanced> {
    let rgb = img.to_rgb();
    let decomp = decompose(&rgb)?;
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    let vars = enhance_graph(&mut g, &decomp, priors, &bound, cfg)?;
    Ok(Enhanced {
        output: from_chw(g.value(vars.output))?,
        reflectance: from_chw(g.value(vars.reflectance))?,
        illumination: from_chw(g.value(vars.illumination))?,
        coarse: match vars.coarse {
            Some(c) => Some(from_chw(g.value(c))?),
            None => None,
        },
    })
}

/// Refines reflectance only (no illumination adjustment); the contract
/// surface for the semantic-guidance stage on its own.
pub fn refine_reflectance(
    reflectance: &ImageTensor,
    priors: &PriorStack,
    params: &ModelParameters,
    cfg: &NetConfig,
) -> Result<ImageTensor> {
    cfg.validate()?;
    let (h, w) = (reflectance.height(), reflectance.width());
    check_enhance_dims(h, w, cfg)?;
    validate_prior(&priors.fine, h, w, cfg)?;
    if let Some(coarse) = &priors.coarse {
        validate_prior(coarse, h / 2, w / 2, cfg)?;
    }
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    let refl = g.constant(to_chw(&reflectance.to_rgb()));
    let (_, refined) = refine_graph(&mut g, refl, priors, &bound, cfg)?;
    from_chw(g.value(refined))
}

/// Applies only the learned illumination adjustment; the contract surface
/// for the brightening stage on its own.
pub fn adjust_illumination(
    illumination: &ImageTensor,
    params: &ModelParameters,
    cfg: &NetConfig,
) -> Result<ImageTensor> {
    cfg.validate()?;
    if illumination.channels() != 1 {
        return Err(Error::shape("illumination must be single-channel"));
    }
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    let illum = g.constant(to_chw(illumination));
    let (_, adjusted) = illum_adjust_graph(&mut g, illum, &bound);
    from_chw(g.value(adjusted))
}

/// Enhances an image of arbitrary size by edge-padding to the divisor,
/// running the network, and cropping back. The coarse field is dropped: it
/// lives at half the padded resolution and has no crop that matches the
/// original.
pub fn enhance_padded<B: SegmentationBackend>(
    img: &ImageTensor,
    backend: &B,
    params: &ModelParameters,
    cfg: &NetConfig,
) -> Result<Enhanced> {
    let (h, w) = (img.height(), img.width());
    let (padded, _) = img.pad_to_multiple(cfg.divisor())?;
    let priors = extract_prior_stack(backend, &padded, cfg)?;
    let full = enhance(&padded, &priors, params, cfg)?;
    Ok(Enhanced {
        output: full.output.crop(h, w)?,
        reflectance: full.reflectance.crop(h, w)?,
        illumination: full.illumination.crop(h, w)?,
        coarse: None,
    })
}
