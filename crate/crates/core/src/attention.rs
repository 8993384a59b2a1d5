//! Cross-attention fusion of reflectance features with segmentation features.
//!
//! Every spatial position of the reflectance feature map attends over all
//! positions of the semantic feature map: keys and values come from the
//! reflectance branch, queries from the semantic branch. The attended value
//! is added back to the input and passed through a residual feed-forward
//! stack. Feature maps are `[c, h, w]`; positions flatten row-major to
//! `p = i * w + j`.

use ndarray::{Array1, Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::params::init;

/// Hard cap on flattened attention positions (`h * w`). The attention matrix
/// is dense, so cost grows with the square of this number; the cap keeps a
/// careless call from allocating gigabytes.
pub const MAX_ATTENTION_POSITIONS: usize = 4096;

/// Returns an error when a feature map is too large to attend over.
pub fn check_attention_size(h: usize, w: usize) -> Result<()> {
    if h * w > MAX_ATTENTION_POSITIONS {
        return Err(Error::invalid(format!(
            "attention over {h}x{w} = {} positions exceeds the limit of {MAX_ATTENTION_POSITIONS}; \
             use smaller inputs",
            h * w
        )));
    }
    Ok(())
}

/// Weights of one attention block over `c`-channel feature maps.
///
/// Projections are 1x1 convolutions stored as `[out, in]` matrices. The
/// feed-forward stack is `z + w2 * gelu(w1 * z + b1) + b2`, so zeroing `w2`
/// and `b2` makes it an exact identity.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<F> {
    pub key_proj: Array2<F>,
    pub query_proj: Array2<F>,
    pub value_proj: Array2<F>,
    pub norm_refl_gain: Array1<F>,
    pub norm_refl_bias: Array1<F>,
    pub norm_sem_gain: Array1<F>,
    pub norm_sem_bias: Array1<F>,
    pub ffn_w1: Array2<F>,
    pub ffn_b1: Array1<F>,
    pub ffn_w2: Array2<F>,
    pub ffn_b2: Array1<F>,
}

impl<F: Scalar> AttentionParams<F> {
    pub fn channels(&self) -> usize {
        self.key_proj.dim().0
    }

    /// Seeded random initialization (testing and standalone use; the
    /// enhancement net keeps its attention weights in its own store).
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |rng: &mut ChaCha8Rng, o: usize, i: usize| -> Array2<F> {
            init::matrix(rng, o, i)
                .mapv(|v| F::from_f64(v as f64))
                .into_dimensionality()
                .expect("matrix rank")
        };
        let c = channels;
        AttentionParams {
            key_proj: conv(&mut rng, c, c),
            query_proj: conv(&mut rng, c, c),
            value_proj: conv(&mut rng, c, c),
            norm_refl_gain: Array1::from_elem(c, F::ONE),
            norm_refl_bias: Array1::from_elem(c, F::ZERO),
            norm_sem_gain: Array1::from_elem(c, F::ONE),
            norm_sem_bias: Array1::from_elem(c, F::ZERO),
            ffn_w1: conv(&mut rng, 2 * c, c),
            ffn_b1: Array1::from_elem(2 * c, F::ZERO),
            // Small output scale keeps the block near-identity at start
            // while still letting gradients reach w1/b1.
            ffn_w2: conv(&mut rng, c, 2 * c).mapv(|v| v * F::from_f64(0.1)),
            ffn_b2: Array1::from_elem(c, F::ZERO),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let square = [&self.key_proj, &self.query_proj, &self.value_proj];
        if square.iter().any(|m| m.dim() != (c, c)) {
            return Err(Error::shape("attention projections must be square [c,c]"));
        }
        for (name, v, want) in [
            ("norm_refl_gain", self.norm_refl_gain.len(), c),
            ("norm_refl_bias", self.norm_refl_bias.len(), c),
            ("norm_sem_gain", self.norm_sem_gain.len(), c),
            ("norm_sem_bias", self.norm_sem_bias.len(), c),
            ("ffn_b1", self.ffn_b1.len(), 2 * c),
            ("ffn_b2", self.ffn_b2.len(), c),
        ] {
            if v != want {
                return Err(Error::shape(format!("{name} must have length {want}, got {v}")));
            }
        }
        if self.ffn_w1.dim() != (2 * c, c) || self.ffn_w2.dim() != (c, 2 * c) {
            return Err(Error::shape("feed-forward weights must be [2c,c] and [c,2c]"));
        }
        Ok(())
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> AttentionVars {
        AttentionVars {
            key_proj: g.leaf(self.key_proj.clone().into_dyn()),
            query_proj: g.leaf(self.query_proj.clone().into_dyn()),
            value_proj: g.leaf(self.value_proj.clone().into_dyn()),
            norm_refl_gain: g.leaf(self.norm_refl_gain.clone().into_dyn()),
            norm_refl_bias: g.leaf(self.norm_refl_bias.clone().into_dyn()),
            norm_sem_gain: g.leaf(self.norm_sem_gain.clone().into_dyn()),
            norm_sem_bias: g.leaf(self.norm_sem_bias.clone().into_dyn()),
            ffn_w1: g.leaf(self.ffn_w1.clone().into_dyn()),
            ffn_b1: g.leaf(self.ffn_b1.clone().into_dyn()),
            ffn_w2: g.leaf(self.ffn_w2.clone().into_dyn()),
            ffn_b2: g.leaf(self.ffn_b2.clone().into_dyn()),
        }
    }
}

/// Graph handles for one attention block's weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub key_proj: Var,
    pub query_proj: Var,
    pub value_proj: Var,
    pub norm_refl_gain: Var,
    pub norm_refl_bias: Var,
    pub norm_sem_gain: Var,
    pub norm_sem_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// Intermediate handles of one attention application.
pub struct AttentionTrace {
    /// Pre-softmax scores `[n, n]`: row = reflectance position, column =
    /// semantic position, scaled by `1/sqrt(c)`.
    pub scores: Var,
    /// Row-softmaxed attention weights `[n, n]`; each row sums to 1.
    pub attention: Var,
    /// Fused `[c, h, w]` output.
    pub fused: Var,
}

/// 1x1 convolution as a channel-mixing matrix product.
pub fn project_channels<F: Scalar>(g: &mut Graph<F>, x: Var, w: Var, b: Option<Var>) -> Var {
    let d = g.shape(x).to_vec();
    debug_assert_eq!(d.len(), 3, "project_channels expects [c,h,w]");
    let (c2, n) = (g.shape(w)[0], d[1] * d[2]);
    let flat = g.reshape(x, &[d[0], n]);
    let mut y = g.matmul(w, flat);
    if let Some(b) = b {
        y = g.add_bias_rows(y, b);
    }
    g.reshape(y, &[c2, d[1], d[2]])
}

/// Core attention on feature maps that are already normalized. Keys and
/// values are projected from `refl`, queries from `sem`; the attended value
/// is added to `refl` and refined by the residual feed-forward stack.
pub fn attention_graph<F: Scalar>(
    g: &mut Graph<F>,
    refl: Var,
    sem: Var,
    p: &AttentionVars,
) -> AttentionTrace {
    let d = g.shape(refl).to_vec();
    assert_eq!(d.len(), 3, "attention expects [c,h,w] features");
    assert_eq!(g.shape(sem), &d[..], "feature branches must match in shape");
    let (c, n) = (d[0], d[1] * d[2]);

    let refl_flat = g.reshape(refl, &[c, n]);
    let sem_flat = g.reshape(sem, &[c, n]);
    let keys = g.matmul(p.key_proj, refl_flat);
    let queries = g.matmul(p.query_proj, sem_flat);
    let values = g.matmul(p.value_proj, refl_flat);

    // scores[p, q] = <key_p, query_q> / sqrt(c)
    let raw = g.matmul_tn(keys, queries);
    let scores = g.scale(raw, 1.0 / (c as f64).sqrt());
    let attention = g.softmax_rows(scores);

    // fused_p = sum_q A[p, q] * value_q, then residual and feed-forward.
    let attended = g.matmul_nt(values, attention);
    let z = g.add(attended, refl_flat);
    let h1 = g.matmul(p.ffn_w1, z);
    let h1 = g.add_bias_rows(h1, p.ffn_b1);
    let h1 = g.gelu(h1);
    let f = g.matmul(p.ffn_w2, h1);
    let f = g.add_bias_rows(f, p.ffn_b2);
    let out = g.add(z, f);
    let fused = g.reshape(out, &d);
    AttentionTrace {
        scores,
        attention,
        fused,
    }
}

/// Full block as embedded in the enhancement net: per-branch layer
/// normalization followed by [`attention_graph`].
pub fn attention_block_graph<F: Scalar>(
    g: &mut Graph<F>,
    refl: Var,
    sem: Var,
    p: &AttentionVars,
) -> AttentionTrace {
    let rn = g.layer_norm_channels(refl, p.norm_refl_gain, p.norm_refl_bias);
    let sn = g.layer_norm_channels(sem, p.norm_sem_gain, p.norm_sem_bias);
    attention_graph(g, rn, sn, p)
}

fn validate_inputs<F: Scalar>(
    refl: &ArrayD<F>,
    sem: &ArrayD<F>,
    p: &AttentionParams<F>,
) -> Result<()> {
    p.validate()?;
    let d = refl.shape();
    if d.len() != 3 {
        return Err(Error::shape(format!("features must be [c,h,w], got {d:?}")));
    }
    if sem.shape() != d {
        return Err(Error::shape(format!(
            "feature branches differ: {:?} vs {:?}",
            d,
            sem.shape()
        )));
    }
    if d[0] != p.channels() {
        return Err(Error::shape(format!(
            "features have {} channels but params expect {}",
            d[0],
            p.channels()
        )));
    }
    check_attention_size(d[1], d[2])
}

/// Attention weight matrix `[n, n]` for already-normalized feature maps.
/// Row `p` is the distribution over semantic positions that reflectance
/// position `p` attends to.
pub fn correlation_map<F: Scalar>(
    refl: &ArrayD<F>,
    sem: &ArrayD<F>,
    params: &AttentionParams<F>,
) -> Result<ArrayD<F>> {
    validate_inputs(refl, sem, params)?;
    let mut g = Graph::<F>::new();
    let r = g.constant(refl.clone());
    let s = g.constant(sem.clone());
    let pv = params.bind(&mut g);
    let trace = attention_graph(&mut g, r, s, &pv);
    Ok(g.value(trace.attention).clone())
}

/// Fused feature map for already-normalized inputs; see [`attention_graph`].
pub fn cross_attend<F: Scalar>(
    refl: &ArrayD<F>,
    sem: &ArrayD<F>,
    params: &AttentionParams<F>,
) -> Result<ArrayD<F>> {
    validate_inputs(refl, sem, params)?;
    let mut g = Graph::<F>::new();
    let r = g.constant(refl.clone());
    let s = g.constant(sem.clone());
    let pv = params.bind(&mut g);
    let trace = attention_graph(&mut g, r, s, &pv);
    Ok(g.value(trace.fused).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testutil::{numeric_grad, rel_err};
    use ndarray::IxDyn;

    fn identity_params(c: usize) -> AttentionParams<f64> {
        let mut p = AttentionParams::<f64>::seeded(c, 0);
        p.key_proj = Array2::eye(c);
        p.query_proj = Array2::eye(c);
        p.value_proj = Array2::eye(c);
        p.ffn_w2 = Array2::zeros((c, 2 * c));
        p.ffn_b2 = Array1::zeros(c);
        p
    }

    fn feature(vals: &[f64], c: usize, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), vals.to_vec()).unwrap()
    }

    #[test]
    fn two_position_hand_case() {
        // Identity projections, c = 2, positions r1=(1,0), r2=(0,1),
        // queries s1=(sqrt(2),0), s2=(0,0). Scores row 1 = [1, 0], so the
        // attention row is softmax([1,0]) = [0.7311, 0.2689] and the fused
        // value at position 1 is 0.7311*r1 + 0.2689*r2 + r1.
        let p = identity_params(2);
        let refl = feature(&[1.0, 0.0, 0.0, 1.0], 2, 1, 2);
        let sem = feature(&[2.0f64.sqrt(), 0.0, 0.0, 0.0], 2, 1, 2);

        let a = correlation_map(&refl, &sem, &p).unwrap();
        let w1 = 0.731_058_578_630_004_9;
        let w2 = 0.268_941_421_369_995_1;
        assert!((a[[0, 0]] - w1).abs() < 1e-9);
        assert!((a[[0, 1]] - w2).abs() < 1e-9);
        // Row 2 sees zero scores everywhere: uniform attention.
        assert!((a[[1, 0]] - 0.5).abs() < 1e-9);
        assert!((a[[1, 1]] - 0.5).abs() < 1e-9);

        let fused = cross_attend(&refl, &sem, &p).unwrap();
        // Channel 0 at position 0: w1*1 + w2*0 + 1; channel 1: w1*0 + w2*1.
        assert!((fused[[0, 0, 0]] - (w1 + 1.0)).abs() < 1e-9);
        assert!((fused[[1, 0, 0]] - w2).abs() < 1e-9);
        // Position 1: uniform mix (0.5, 0.5) plus residual (0, 1).
        assert!((fused[[0, 0, 1]] - 0.5).abs() < 1e-9);
        assert!((fused[[1, 0, 1]] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = AttentionParams::<f64>::seeded(4, 3);
        let refl = ArrayD::from_shape_fn(IxDyn(&[4, 3, 5]), |ix| {
            ((ix[0] * 31 + ix[1] * 7 + ix[2]) % 11) as f64 / 5.0 - 1.0
        });
        let sem = ArrayD::from_shape_fn(IxDyn(&[4, 3, 5]), |ix| {
            ((ix[0] * 13 + ix[1] * 3 + ix[2] * 2) % 7) as f64 / 3.0 - 1.0
        });
        let a = correlation_map(&refl, &sem, &p).unwrap();
        assert_eq!(a.shape(), &[15, 15]);
        for row in a.view().into_dimensionality::<ndarray::Ix2>().unwrap().rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_ffn_tail_makes_it_an_identity() {
        // With w2 = 0, b2 = 0 the feed-forward stack must pass z through
        // exactly; with wv = 0 as well the whole block returns the input.
        let mut p = identity_params(3);
        p.value_proj = Array2::zeros((3, 3));
        let refl = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2]), |ix| (ix[0] + ix[1] * 2 + ix[2]) as f64);
        let sem = ArrayD::from_shape_fn(IxDyn(&[3, 2, 2]), |ix| (ix[0] * 2 + ix[1] + ix[2]) as f64);
        let fused = cross_attend(&refl, &sem, &p).unwrap();
        for (a, b) in fused.iter().zip(refl.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let p = AttentionParams::<f64>::seeded(4, 0);
        let refl = ArrayD::<f64>::zeros(IxDyn(&[4, 2, 2]));
        let sem = ArrayD::<f64>::zeros(IxDyn(&[4, 2, 3]));
        assert!(correlation_map(&refl, &sem, &p).is_err());
        let sem_bad_c = ArrayD::<f64>::zeros(IxDyn(&[3, 2, 2]));
        assert!(cross_attend(&refl, &sem_bad_c, &p).is_err());
    }

    #[test]
    fn rejects_oversized_maps() {
        assert!(check_attention_size(64, 64).is_ok());
        assert!(check_attention_size(65, 64).is_err());
    }

    #[test]
    fn full_block_gradient_matches_finite_differences() {
        // Composite check through layer norm, attention, and feed-forward:
        // every parameter tensor participates and must match central
        // differences in f64.
        let c = 2;
        let (h, w) = (4, 4);
        let p = AttentionParams::<f64>::seeded(c, 17);
        let refl = ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| {
            (((ix[0] * 29 + ix[1] * 5 + ix[2] * 3) % 13) as f64) / 6.0 - 1.0
        });
        let sem = ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| {
            (((ix[0] * 11 + ix[1] * 7 + ix[2]) % 9) as f64) / 4.0 - 1.0
        });

        let tensors: Vec<ArrayD<f64>> = vec![
            p.key_proj.clone().into_dyn(),
            p.query_proj.clone().into_dyn(),
            p.value_proj.clone().into_dyn(),
            p.norm_refl_gain.clone().into_dyn(),
            p.norm_refl_bias.clone().into_dyn(),
            p.norm_sem_gain.clone().into_dyn(),
            p.norm_sem_bias.clone().into_dyn(),
            p.ffn_w1.clone().into_dyn(),
            p.ffn_b1.clone().into_dyn(),
            p.ffn_w2.clone().into_dyn(),
            p.ffn_b2.clone().into_dyn(),
            refl.clone(),
            sem.clone(),
        ];

        let run = |xs: &[ArrayD<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
            let mut g = Graph::<f64>::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
            let pv = AttentionVars {
                key_proj: vars[0],
                query_proj: vars[1],
                value_proj: vars[2],
                norm_refl_gain: vars[3],
                norm_refl_bias: vars[4],
                norm_sem_gain: vars[5],
                norm_sem_bias: vars[6],
                ffn_w1: vars[7],
                ffn_b1: vars[8],
                ffn_w2: vars[9],
                ffn_b2: vars[10],
            };
            let trace = attention_block_graph(&mut g, vars[11], vars[12], &pv);
            let sq = g.sqr(trace.fused);
            let loss = g.mean_all(sq);
            (g, vars, loss)
        };

        let numeric = numeric_grad(&tensors, 1e-5, |xs| {
            let (g, _, loss) = run(xs);
            g.scalar_value(loss)
        });
        let (g, vars, loss) = run(&tensors);
        let grads = g.backward(loss);
        let analytic: Vec<ArrayD<f64>> = vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| ArrayD::zeros(g.value(v).raw_dim())))
            .collect();
        // Every tensor influences the output except norm_sem_bias (index 6):
        // a query-side bias shifts all scores in a row equally and row
        // softmax is shift-invariant, so its gradient is structurally zero.
        for (i, a) in analytic.iter().enumerate() {
            let nonzero = a.iter().any(|v| v.abs() > 1e-12);
            if i == 6 {
                assert!(!nonzero, "query-side norm bias should be inert");
            } else {
                assert!(nonzero, "tensor {i} received a zero gradient");
            }
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "rel err {err:.3e}");
    }
}
