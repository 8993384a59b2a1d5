//! Joint text/image embeddings used by the contrastive brightness objective.
//!
//! A vision-language backend maps prompts and images into one unit-sphere
//! space. Training pushes enhanced images toward the "well-lit" prompt and
//! away from the "dim" prompt. Like the segmentation backend, the built-in
//! implementation is a small frozen seeded network: the objective only needs
//! a fixed, deterministic, differentiable critic, not a meaningful one.

use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::imaging::{to_chw, ImageTensor};
use crate::params::{init, ModelParameters};

/// Dimension of the shared embedding space.
pub const EMBED_DIM: usize = 512;

/// Smallest image side [`ToyVisionLanguage::embed_image`] accepts.
pub const MIN_EMBED_SIDE: usize = 8;

/// A point on the unit sphere of the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    v: Array1<f64>,
}

impl JointEmbedding {
    /// Wraps a vector that must already be unit-norm (within 1e-6).
    pub fn new(v: Array1<f64>) -> Result<Self> {
        if v.len() != EMBED_DIM {
            return Err(Error::shape(format!(
                "embedding must have dimension {EMBED_DIM}, got {}",
                v.len()
            )));
        }
        let norm = v.dot(&v).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "embedding must be unit-norm, got |v| = {norm}"
            )));
        }
        Ok(JointEmbedding { v })
    }

    /// Normalizes an arbitrary non-zero vector onto the sphere.
    pub fn from_raw(v: Array1<f64>) -> Result<Self> {
        let norm = v.dot(&v).sqrt();
        if norm < 1e-12 {
            return Err(Error::invalid("cannot normalize a zero embedding"));
        }
        Self::new(v / norm)
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.v
    }
}

/// The prompt pair anchoring the brightness axis in embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptPair {
    pub low: String,
    pub high: String,
}

impl Default for PromptPair {
    fn default() -> Self {
        PromptPair {
            low: "low-light image".to_string(),
            high: "high-light image".to_string(),
        }
    }
}

/// Frozen joint text/image encoder.
pub trait VisionLanguageBackend {
    fn embed_dim(&self) -> usize {
        EMBED_DIM
    }
    fn embed_text(&self, prompt: &str) -> Result<JointEmbedding>;
    fn embed_image(&self, img: &ImageTensor) -> Result<JointEmbedding>;
    /// Differentiable image branch: appends ops mapping an `[3, h, w]` node
    /// to a unit-norm `[EMBED_DIM]` node.
    fn embed_image_graph<F: Scalar>(&self, g: &mut Graph<F>, img: Var) -> Result<Var>;
}

/// Cosine similarity of two embeddings; both are unit-norm so this is their
/// dot product, clamped against rounding drift.
pub fn cosine_similarity(a: &JointEmbedding, b: &JointEmbedding) -> f64 {
    a.v.dot(&b.v).clamp(-1.0, 1.0)
}

/// Contrastive brightness score: `cos(img, low) - cos(img, high)`.
/// Lower is better lit; the value always lies in `[-2, 2]`.
pub fn multimodal_loss(
    img: &JointEmbedding,
    low: &JointEmbedding,
    high: &JointEmbedding,
) -> f64 {
    cosine_similarity(img, low) - cosine_similarity(img, high)
}

/// Built-in frozen backend. Text prompts hash to seeded random directions;
/// images pass through two seeded stride-2 convolutions, global average
/// pooling, and a projection, all shared between the plain and graph paths.
pub struct ToyVisionLanguage {
    seed: u64,
    params: ModelParameters,
}

const VL_WIDTHS: [usize; 2] = [16, 32];

/// Builds the frozen built-in vision-language backend.
pub fn make_toy_vl_backend(seed: u64) -> ToyVisionLanguage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParameters::new();
    params
        .insert("conv0.w", init::conv_kernel(&mut rng, VL_WIDTHS[0], 3, 3, 3))
        .expect("fresh store");
    params.insert("conv0.b", init::zeros(&[VL_WIDTHS[0]])).unwrap();
    params
        .insert("conv1.w", init::conv_kernel(&mut rng, VL_WIDTHS[1], VL_WIDTHS[0], 3, 3))
        .unwrap();
    params.insert("conv1.b", init::zeros(&[VL_WIDTHS[1]])).unwrap();
    params
        .insert("proj.w", init::matrix(&mut rng, EMBED_DIM, VL_WIDTHS[1]))
        .unwrap();
    ToyVisionLanguage { seed, params }
}

impl ToyVisionLanguage {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Frozen weights, exposed for determinism audits.
    pub fn params(&self) -> &ModelParameters {
        &self.params
    }
}

impl VisionLanguageBackend for ToyVisionLanguage {
    fn embed_text(&self, prompt: &str) -> Result<JointEmbedding> {
        if prompt.is_empty() {
            return Err(Error::invalid("prompt must be non-empty"));
        }
        // Hash the (seed, prompt) pair into an RNG seed, then draw a random
        // direction. Equal prompts map to equal embeddings by construction.
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(prompt.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v = Array1::from_iter((0..EMBED_DIM).map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x
        }));
        JointEmbedding::from_raw(v)
    }

    fn embed_image(&self, img: &ImageTensor) -> Result<JointEmbedding> {
        let rgb = img.to_rgb();
        let mut g = Graph::<f64>::new();
        let x = g.constant(to_chw(&rgb));
        let out = self.embed_image_graph(&mut g, x)?;
        let v = Array1::from_iter(g.value(out).iter().copied());
        JointEmbedding::new(v)
    }

    fn embed_image_graph<F: Scalar>(&self, g: &mut Graph<F>, img: Var) -> Result<Var> {
        let d = g.shape(img).to_vec();
        if d.len() != 3 || d[0] != 3 {
            return Err(Error::shape(format!(
                "embedding input must be [3,h,w], got {d:?}"
            )));
        }
        if d[1] < MIN_EMBED_SIDE || d[2] < MIN_EMBED_SIDE {
            return Err(Error::invalid(format!(
                "image embedding needs at least {MIN_EMBED_SIDE}x{MIN_EMBED_SIDE} pixels, got {}x{}",
                d[1], d[2]
            )));
        }
        let cv = |g: &mut Graph<F>, name: &str| -> Var {
            let arr = self
                .params
                .get(name)
                .unwrap_or_else(|| panic!("vision-language backend misses {name:?}"))
                .mapv(|v| F::from_f64(v as f64));
            g.constant(arr)
        };
        let w0 = cv(g, "conv0.w");
        let b0 = cv(g, "conv0.b");
        let h0 = g.conv2d(img, w0, Some(b0), 2, 1);
        let h0 = g.tanh_act(h0);
        let w1 = cv(g, "conv1.w");
        let b1 = cv(g, "conv1.b");
        let h1 = g.conv2d(h0, w1, Some(b1), 2, 1);
        let h1 = g.tanh_act(h1);

        // Global average pool via a constant mean vector.
        let hd = g.shape(h1).to_vec();
        let n = hd[1] * hd[2];
        let flat = g.reshape(h1, &[hd[0], n]);
        let mean_vec = g.constant(ArrayD::from_elem(IxDyn(&[n, 1]), F::from_f64(1.0 / n as f64)));
        let pooled = g.matmul(flat, mean_vec);

        let proj = cv(g, "proj.w");
        let emb = g.matmul(proj, pooled);
        let emb = g.reshape(emb, &[EMBED_DIM]);
        Ok(g.l2_normalize(emb))
    }
}
