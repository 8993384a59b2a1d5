//! The training objective: a weighted sum of pixel fidelity, edge fidelity,
//! semantic consistency, and a contrastive text-alignment score.
//!
//! Every term exists twice: as a plain `f64` function over concrete images
//! (the reference definition, used for evaluation and as a test oracle) and
//! as a graph builder (the differentiable route used in training). Tests pin
//! the two routes together.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::imaging::{spatial_gradient, to_chw, GradientKind, ImageTensor};
use crate::segmentation::{extract_prior, SegmentationBackend, SemanticPrior};
use crate::vision_language::{
    cosine_similarity, JointEmbedding, VisionLanguageBackend,
};

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-8;

/// Scale factors applied to the individual terms when forming the total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pixel: f64,
    pub edge: f64,
    pub semantic: f64,
    pub multimodal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pixel: 1.0,
            edge: 0.1,
            semantic: 0.1,
            multimodal: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("pixel", self.pixel),
            ("edge", self.edge),
            ("semantic", self.semantic),
            ("multimodal", self.multimodal),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name:?} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Which terms participate in the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSwitches {
    pub pixel: bool,
    pub edge: bool,
    pub semantic: bool,
    pub multimodal: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            pixel: true,
            edge: true,
            semantic: true,
            multimodal: true,
        }
    }
}

impl LossSwitches {
    pub fn any(self) -> bool {
        self.pixel || self.edge || self.semantic || self.multimodal
    }
}

/// Raw (unweighted) term values plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub edge: f64,
    pub semantic: f64,
    pub multimodal: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Assembles a breakdown from raw term values; disabled terms should be
    /// passed as zero.
    pub fn compose(
        weights: &LossWeights,
        pixel: f64,
        edge: f64,
        semantic: f64,
        multimodal: f64,
    ) -> LossBreakdown {
        LossBreakdown {
            pixel,
            edge,
            semantic,
            multimodal,
            total: weights.pixel * pixel
                + weights.edge * edge
                + weights.semantic * semantic
                + weights.multimodal * multimodal,
        }
    }
}

// ---------------------------------------------------------------------------
// Reference (plain f64) definitions

/// Mean squared pixel error over all channels.
pub fn pixel_loss(out: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    if out.data().dim() != target.data().dim() {
        return Err(Error::shape(format!(
            "pixel loss needs matching shapes, got {:?} vs {:?}",
            out.data().dim(),
            target.data().dim()
        )));
    }
    let n = out.data().len() as f64;
    let sum: f64 = out
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Mean squared difference of spatial gradients: both derivative planes are
/// compared and the sum is divided by the entries of one plane.
pub fn edge_loss(out: &ImageTensor, target: &ImageTensor, kind: GradientKind) -> Result<f64> {
    if out.data().dim() != target.data().dim() {
        return Err(Error::shape(format!(
            "edge loss needs matching shapes, got {:?} vs {:?}",
            out.data().dim(),
            target.data().dim()
        )));
    }
    let go = spatial_gradient(out, kind);
    let gt = spatial_gradient(target, kind);
    let n = go.dx.len() as f64;
    let sum: f64 = go
        .dx
        .iter()
        .zip(gt.dx.iter())
        .chain(go.dy.iter().zip(gt.dy.iter()))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Per-pixel KL divergence from the reference class distribution to the
/// output's, averaged over pixels. Probabilities are floored at
/// [`PROB_FLOOR`] inside the logarithms.
pub fn semantic_loss(out: &SemanticPrior, reference: &SemanticPrior) -> Result<f64> {
    if out.seg_map.dim() != reference.seg_map.dim() {
        return Err(Error::shape(format!(
            "semantic loss needs matching class maps, got {:?} vs {:?}",
            out.seg_map.dim(),
            reference.seg_map.dim()
        )));
    }
    let (h, w, _) = out.seg_map.dim();
    let sum: f64 = reference
        .seg_map
        .iter()
        .zip(out.seg_map.iter())
        .map(|(&p, &q)| p * (p.max(PROB_FLOOR).ln() - q.max(PROB_FLOOR).ln()))
        .sum();
    Ok(sum / (h * w) as f64)
}

// ---------------------------------------------------------------------------
// Graph builders

/// Mean squared error between two `[c, h, w]` nodes.
pub fn pixel_loss_graph<F: Scalar>(g: &mut Graph<F>, out: Var, target: Var) -> Var {
    let d = g.sub(out, target);
    let s = g.sqr(d);
    g.mean_all(s)
}

/// Graph form of [`edge_loss`]. Both schemes are linear, so differentiating
/// the difference image equals differencing the two gradient fields.
pub fn edge_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    out: Var,
    target: Var,
    kind: GradientKind,
) -> Var {
    let d = g.sub(out, target);
    let (dx, dy) = match kind {
        GradientKind::Forward => (g.fwd_diff_x(d), g.fwd_diff_y(d)),
        GradientKind::Sobel => sobel_graph(g, d),
    };
    let sx = g.sqr(dx);
    let sy = g.sqr(dy);
    let tx = g.sum_all(sx);
    let ty = g.sum_all(sy);
    let t = g.add(tx, ty);
    let n: usize = g.shape(d).iter().product();
    g.scale(t, 1.0 / n as f64)
}

/// Per-channel Sobel derivatives of a `[c, h, w]` node with edge-replicated
/// borders, matching [`spatial_gradient`] with [`GradientKind::Sobel`].
pub fn sobel_graph<F: Scalar>(g: &mut Graph<F>, x: Var) -> (Var, Var) {
    let c = g.shape(x)[0];
    let kern = |vals: [f64; 9]| {
        ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 3]), vals.iter().map(|&v| F::from_f64(v)).collect())
            .expect("static kernel")
    };
    let kx = g.constant(kern([-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]));
    let ky = g.constant(kern([-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]));
    let mut dx: Option<Var> = None;
    let mut dy: Option<Var> = None;
    for k in 0..c {
        let ch = g.slice_channels(x, k, k + 1);
        let p = g.pad_replicate1(ch);
        let cx = g.conv2d(p, kx, None, 1, 0);
        let cy = g.conv2d(p, ky, None, 1, 0);
        dx = Some(match dx {
            None => cx,
            Some(prev) => g.concat_channels(prev, cx),
        });
        dy = Some(match dy {
            None => cy,
            Some(prev) => g.concat_channels(prev, cy),
        });
    }
    (dx.expect("at least one channel"), dy.expect("at least one channel"))
}

/// Graph form of [`semantic_loss`]: segments the output image node with the
/// frozen backend and compares against a fixed reference prior.
pub fn semantic_loss_graph<F: Scalar, S: SegmentationBackend>(
    g: &mut Graph<F>,
    out_img: Var,
    backend: &S,
    reference: &SemanticPrior,
) -> Result<Var> {
    let pv = backend.prior_graph(g, out_img)?;
    let probs = g.softmax_channels(pv.seg_logits);
    let d = g.shape(probs).to_vec();
    let (k, h, w) = (d[0], d[1], d[2]);
    if reference.seg_map.dim() != (h, w, k) {
        return Err(Error::shape(format!(
            "reference prior is {:?}, output segmentation is ({h}, {w}, {k})",
            reference.seg_map.dim()
        )));
    }
    let ref_chw = ArrayD::from_shape_fn(IxDyn(&[k, h, w]), |ix| {
        F::from_f64(reference.seg_map[(ix[1], ix[2], ix[0])])
    });
    let floor = F::from_f64(PROB_FLOOR);
    let ref_ln = g.constant(ref_chw.mapv(|p| p.maximum(floor).ln()));
    let ref_p = g.constant(ref_chw);
    let out_ln = g.ln_floored(probs, PROB_FLOOR);
    let diff = g.sub(ref_ln, out_ln);
    let prod = g.mul(ref_p, diff);
    let s = g.sum_all(prod);
    Ok(g.scale(s, 1.0 / (h * w) as f64))
}

/// Graph form of [`crate::vision_language::multimodal_loss`]: embeds the
/// output image node and scores it against the two fixed prompt embeddings.
pub fn multimodal_loss_graph<F: Scalar, V: VisionLanguageBackend>(
    g: &mut Graph<F>,
    out_img: Var,
    backend: &V,
    low: &JointEmbedding,
    high: &JointEmbedding,
) -> Result<Var> {
    let emb = backend.embed_image_graph(g, out_img)?;
    let lv = g.constant(low.as_array().mapv(F::from_f64).into_dyn());
    let hv = g.constant(high.as_array().mapv(F::from_f64).into_dyn());
    let cl = g.dot_vec(emb, lv);
    let ch = g.dot_vec(emb, hv);
    Ok(g.sub(cl, ch))
}

/// Everything the semantic term needs besides the output image.
pub struct SemanticRefs<'a, S: SegmentationBackend> {
    pub backend: &'a S,
    /// Prior extracted from the well-lit reference image.
    pub reference: &'a SemanticPrior,
}

/// Everything the text-alignment term needs besides the output image.
pub struct TextRefs<'a, V: VisionLanguageBackend> {
    pub backend: &'a V,
    pub low: &'a JointEmbedding,
    pub high: &'a JointEmbedding,
}

/// Graph handles for the enabled terms and the weighted total.
pub struct LossTerms {
    pub pixel: Option<Var>,
    pub edge: Option<Var>,
    pub semantic: Option<Var>,
    pub multimodal: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    /// Reads the term values out of a finished graph.
    pub fn breakdown<F: Scalar>(&self, g: &Graph<F>) -> LossBreakdown {
        let v = |t: Option<Var>| t.map_or(0.0, |t| g.scalar_value(t).to_f64());
        LossBreakdown {
            pixel: v(self.pixel),
            edge: v(self.edge),
            semantic: v(self.semantic),
            multimodal: v(self.multimodal),
            total: g.scalar_value(self.total).to_f64(),
        }
    }
}

/// Builds the full objective on top of an enhanced-image node `out`
/// (`[3, h, w]`). Enabled terms must come with their references; at least
/// one term must be enabled.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<F: Scalar, S: SegmentationBackend, V: VisionLanguageBackend>(
    g: &mut Graph<F>,
    out: Var,
    target: &ImageTensor,
    switches: LossSwitches,
    weights: &LossWeights,
    kind: GradientKind,
    semantic: Option<SemanticRefs<'_, S>>,
    text: Option<TextRefs<'_, V>>,
) -> Result<LossTerms> {
    weights.validate()?;
    if !switches.any() {
        return Err(Error::invalid("at least one loss term must be enabled"));
    }
    let d = g.shape(out).to_vec();
    let rgb = target.to_rgb();
    if d != vec![3, rgb.height(), rgb.width()] {
        return Err(Error::shape(format!(
            "output node is {d:?} but target is [3, {}, {}]",
            rgb.height(),
            rgb.width()
        )));
    }

    let mut terms = LossTerms {
        pixel: None,
        edge: None,
        semantic: None,
        multimodal: None,
        total: out, // placeholder until the first term lands
    };
    let mut total: Option<Var> = None;
    let mut accumulate = |g: &mut Graph<F>, term: Var, weight: f64| {
        let scaled = g.scale(term, weight);
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled),
        });
    };

    if switches.pixel || switches.edge {
        let tgt = g.constant(to_chw(&rgb));
        if switches.pixel {
            let t = pixel_loss_graph(g, out, tgt);
            terms.pixel = Some(t);
            accumulate(g, t, weights.pixel);
        }
        if switches.edge {
            let t = edge_loss_graph(g, out, tgt, kind);
            terms.edge = Some(t);
            accumulate(g, t, weights.edge);
        }
    }
    if switches.semantic {
        let refs = semantic
            .ok_or_else(|| Error::invalid("semantic loss enabled without a segmentation reference"))?;
        let t = semantic_loss_graph(g, out, refs.backend, refs.reference)?;
        terms.semantic = Some(t);
        accumulate(g, t, weights.semantic);
    }
    if switches.multimodal {
        let refs = text
            .ok_or_else(|| Error::invalid("text alignment enabled without prompt embeddings"))?;
        let t = multimodal_loss_graph(g, out, refs.backend, refs.low, refs.high)?;
        terms.multimodal = Some(t);
        accumulate(g, t, weights.multimodal);
    }
    terms.total = total.expect("at least one switch checked above");
    Ok(terms)
}

/// Evaluates the enabled terms on concrete images along the reference route.
pub fn evaluate_losses<S: SegmentationBackend, V: VisionLanguageBackend>(
    out: &ImageTensor,
    target: &ImageTensor,
    switches: LossSwitches,
    weights: &LossWeights,
    kind: GradientKind,
    semantic: Option<SemanticRefs<'_, S>>,
    text: Option<TextRefs<'_, V>>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    if !switches.any() {
        return Err(Error::invalid("at least one loss term must be enabled"));
    }
    let out_rgb = out.to_rgb();
    let tgt_rgb = target.to_rgb();
    let pixel = if switches.pixel {
        pixel_loss(&out_rgb, &tgt_rgb)?
    } else {
        0.0
    };
    let edge = if switches.edge {
        edge_loss(&out_rgb, &tgt_rgb, kind)?
    } else {
        0.0
    };
    let sem = if switches.semantic {
        let refs = semantic
            .ok_or_else(|| Error::invalid("semantic loss enabled without a segmentation reference"))?;
        let out_prior = extract_prior(refs.backend, &out_rgb)?;
        semantic_loss(&out_prior, refs.reference)?
    } else {
        0.0
    };
    let mul = if switches.multimodal {
        let refs = text
            .ok_or_else(|| Error::invalid("text alignment enabled without prompt embeddings"))?;
        let emb = refs.backend.embed_image(&out_rgb)?;
        cosine_similarity(&emb, refs.low) - cosine_similarity(&emb, refs.high)
    } else {
        0.0
    };
    Ok(LossBreakdown::compose(weights, pixel, edge, sem, mul))
}
