//! Training loop and evaluation harness.
//!
//! Training is stochastic gradient descent with Adam over the flat parameter
//! store. Each step samples a batch of pairs, builds one graph per sample
//! (forward enhancement plus the objective), accumulates parameter
//! gradients, and applies one update. The frozen backends are queried once
//! per pair up front and their outputs cached; they never change during a
//! run, and everything is seeded, so runs are exactly repeatable.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::CheckpointMeta;
use crate::dataset::ImagePair;
use crate::enhancer::{
    enhance, enhance_graph, extract_prior_stack, init_parameters, NetConfig, PriorStack,
};
use crate::error::{Error, Result};
use crate::imaging::{metric_report, GradientKind, ImageTensor, MetricReport};
use crate::loss::{
    evaluate_losses, loss_graph, LossBreakdown, LossSwitches, LossWeights, SemanticRefs, TextRefs,
};
use crate::params::ModelParameters;
use crate::retinex::{decompose, RetinexDecomposition};
use crate::segmentation::{extract_prior, make_toy_backend, SemanticPrior, ToySegmenter};
use crate::vision_language::{
    make_toy_vl_backend, JointEmbedding, PromptPair, ToyVisionLanguage, VisionLanguageBackend,
};

/// Which pipeline components a run keeps enabled. Disabling a component
/// removes it from the architecture or objective entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSwitches {
    /// Segmentation guidance: cross-attention blocks and the semantic loss.
    pub image_prior: bool,
    /// Text guidance: the contrastive alignment loss.
    pub text_prior: bool,
    /// The half-resolution first stage.
    pub coarse_to_fine: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches {
            image_prior: true,
            text_prior: true,
            coarse_to_fine: true,
        }
    }
}

/// Full description of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub log_every: usize,
    pub weights: LossWeights,
    pub losses: LossSwitches,
    pub ablation: AblationSwitches,
    pub prompts: PromptPair,
    pub net: NetConfig,
    pub gradient_kind: GradientKind,
    /// Seed of the frozen segmentation backend.
    pub seg_seed: u64,
    /// Seed of the frozen text/image embedding backend.
    pub vl_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 500,
            batch_size: 16,
            learning_rate: 3e-4,
            log_every: 25,
            weights: LossWeights::default(),
            losses: LossSwitches::default(),
            ablation: AblationSwitches::default(),
            prompts: PromptPair::default(),
            net: NetConfig::default(),
            gradient_kind: GradientKind::default(),
            seg_seed: 101,
            vl_seed: 202,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // steps = 0 and learning_rate = 0 are valid degenerate schedules:
        // they leave the initial parameters untouched.
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        self.weights.validate()?;
        self.effective_net().validate()?;
        if !self.effective_losses().any() {
            return Err(Error::Config(
                "the ablation switches disable every enabled loss term".into(),
            ));
        }
        if self.prompts.low.is_empty() || self.prompts.high.is_empty() {
            return Err(Error::Config("prompts must be non-empty".into()));
        }
        Ok(())
    }

    /// Architecture after applying the ablation switches.
    pub fn effective_net(&self) -> NetConfig {
        NetConfig {
            use_attention: self.net.use_attention && self.ablation.image_prior,
            coarse_to_fine: self.net.coarse_to_fine && self.ablation.coarse_to_fine,
            ..self.net.clone()
        }
    }

    /// Loss switches after applying the ablation switches: each prior-driven
    /// term needs its prior.
    pub fn effective_losses(&self) -> LossSwitches {
        LossSwitches {
            semantic: self.losses.semantic && self.ablation.image_prior,
            multimodal: self.losses.multimodal && self.ablation.text_prior,
            ..self.losses
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Adam with bias correction, one moment pair per parameter tensor, aligned
/// with parameter storage order.
pub struct Adam {
    lr: f32,
    step: usize,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ModelParameters) -> Self {
        let zeros: Vec<ArrayD<f32>> = params
            .iter()
            .map(|(_, arr)| ArrayD::zeros(arr.raw_dim()))
            .collect();
        Adam {
            lr: lr as f32,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from gradients aligned with parameter order.
    /// Entries may be `None` (parameters outside the graph or with no
    /// gradient path); their moments decay as if the gradient were zero.
    pub fn update(&mut self, params: &mut ModelParameters, grads: &[Option<ArrayD<f32>>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient slots out of sync");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if let Some(g) = &grads[i] {
                m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
                v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            } else {
                m.mapv_inplace(|m| ADAM_BETA1 * m);
                v.mapv_inplace(|v| ADAM_BETA2 * v);
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            });
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

// ---------------------------------------------------------------------------
// Training

/// Loss values averaged over one logged step's batch.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub meta: CheckpointMeta,
    pub log: Vec<TrainLogRecord>,
}

/// Per-pair cached inputs: the frozen backends are deterministic, so their
/// outputs are computed once.
struct PreparedSample {
    decomp: RetinexDecomposition,
    priors: PriorStack,
    /// Prior of the well-lit image, present when the semantic term is on.
    reference_prior: Option<SemanticPrior>,
    high: ImageTensor,
}

struct Backends {
    seg: ToySegmenter,
    vl: Option<ToyVisionLanguage>,
    low_embed: Option<JointEmbedding>,
    high_embed: Option<JointEmbedding>,
}

fn build_backends(cfg: &TrainConfig, net: &NetConfig, losses: LossSwitches) -> Result<Backends> {
    let seg = make_toy_backend(cfg.seg_seed, net.seg_classes, net.scales)?;
    let (vl, low_embed, high_embed) = if losses.multimodal {
        let vl = make_toy_vl_backend(cfg.vl_seed);
        let low = vl.embed_text(&cfg.prompts.low)?;
        let high = vl.embed_text(&cfg.prompts.high)?;
        (Some(vl), Some(low), Some(high))
    } else {
        (None, None, None)
    };
    Ok(Backends {
        seg,
        vl,
        low_embed,
        high_embed,
    })
}

fn prepare_samples(
    pairs: &[ImagePair],
    net: &NetConfig,
    losses: LossSwitches,
    backends: &Backends,
) -> Result<Vec<PreparedSample>> {
    pairs
        .iter()
        .map(|pair| {
            if pair.low.data().dim() != pair.high.data().dim() {
                return Err(Error::Dataset(format!(
                    "pair {:?} is misaligned: low {:?}, high {:?}",
                    pair.name,
                    pair.low.data().dim(),
                    pair.high.data().dim()
                )));
            }
            let low = pair.low.to_rgb();
            let high = pair.high.to_rgb();
            let decomp = decompose(&low)?;
            let priors = extract_prior_stack(&backends.seg, &low, net)?;
            let reference_prior = if losses.semantic {
                Some(extract_prior(&backends.seg, &high)?)
            } else {
                None
            };
            Ok(PreparedSample {
                decomp,
                priors,
                reference_prior,
                high,
            })
        })
        .collect()
}

/// Builds the enhancement and objective graph for one sample and returns the
/// breakdown plus parameter gradients (aligned with parameter order).
fn sample_gradients(
    params: &ModelParameters,
    sample: &PreparedSample,
    cfg: &TrainConfig,
    net: &NetConfig,
    losses: LossSwitches,
    backends: &Backends,
) -> Result<(LossBreakdown, Vec<Option<ArrayD<f32>>>)> {
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    let vars = enhance_graph(&mut g, &sample.decomp, &sample.priors, &bound, net)?;
    let sem_refs = sample.reference_prior.as_ref().map(|reference| SemanticRefs {
        backend: &backends.seg,
        reference,
    });
    let text_refs = backends.vl.as_ref().map(|backend| TextRefs {
        backend,
        low: backends.low_embed.as_ref().expect("embedded with backend"),
        high: backends.high_embed.as_ref().expect("embedded with backend"),
    });
    let terms = loss_graph(
        &mut g,
        vars.output,
        &sample.high,
        losses,
        &cfg.weights,
        cfg.gradient_kind,
        sem_refs,
        text_refs,
    )?;
    let breakdown = terms.breakdown(&g);
    let mut grads = g.backward(terms.total);
    let out = bound.iter().map(|(_, var)| grads.take(var)).collect();
    Ok((breakdown, out))
}

fn check_finite(b: &LossBreakdown, step: usize) -> Result<()> {
    for (component, v) in [
        ("pixel", b.pixel),
        ("edge", b.edge),
        ("semantic", b.semantic),
        ("multimodal", b.multimodal),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component, step });
        }
    }
    Ok(())
}

fn add_assign_grads(acc: &mut [Option<ArrayD<f32>>], grads: Vec<Option<ArrayD<f32>>>, scale: f32) {
    for (slot, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            match slot {
                Some(a) => a.zip_mut_with(&g, |a, &g| *a += scale * g),
                None => *slot = Some(g.mapv(|v| scale * v)),
            }
        }
    }
}

fn mean_breakdown(batch: &[LossBreakdown]) -> LossBreakdown {
    let n = batch.len() as f64;
    let mut out = LossBreakdown::default();
    for b in batch {
        out.pixel += b.pixel / n;
        out.edge += b.edge / n;
        out.semantic += b.semantic / n;
        out.multimodal += b.multimodal / n;
        out.total += b.total / n;
    }
    out
}

/// Runs a full training job on the given pairs.
pub fn train(cfg: &TrainConfig, pairs: &[ImagePair]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Dataset("training needs at least one pair".into()));
    }
    let net = cfg.effective_net();
    let losses = cfg.effective_losses();
    let backends = build_backends(cfg, &net, losses)?;
    let samples = prepare_samples(pairs, &net, losses, &backends)?;

    let mut params = init_parameters(&net, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();

    log::info!(
        "training {} parameters on {} pairs for {} steps",
        params.scalar_count(),
        samples.len(),
        cfg.steps
    );
    let started = std::time::Instant::now();
    for step in 1..=cfg.steps {
        let mut acc: Vec<Option<ArrayD<f32>>> = vec![None; params.len()];
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let sample = &samples[rng.random_range(0..samples.len())];
            let (breakdown, grads) =
                sample_gradients(&params, sample, cfg, &net, losses, &backends)?;
            check_finite(&breakdown, step)?;
            add_assign_grads(&mut acc, grads, 1.0 / cfg.batch_size as f32);
            batch.push(breakdown);
        }
        adam.update(&mut params, &acc);
        if step % cfg.log_every == 0 || step == cfg.steps {
            let loss = mean_breakdown(&batch);
            log::info!(
                "step {step}: total {:.6} (pixel {:.6}, edge {:.6}, semantic {:.6}, multimodal {:+.6}) [{:.1}s]",
                loss.total,
                loss.pixel,
                loss.edge,
                loss.semantic,
                loss.multimodal,
                started.elapsed().as_secs_f64()
            );
            log.push(TrainLogRecord { step, loss });
        }
    }
    Ok(TrainOutcome {
        params,
        meta: CheckpointMeta {
            net,
            seg_seed: cfg.seg_seed,
            vl_seed: cfg.vl_seed,
        },
        log,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Quality of one evaluated pair: metrics of the raw input and the enhanced
/// output against the well-lit reference, plus the objective's view.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub name: String,
    pub input: MetricReport,
    pub output: MetricReport,
    pub loss: LossBreakdown,
}

/// Evaluation summary over a set of pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub mean_input_psnr: f64,
    pub mean_output_psnr: f64,
    pub mean_output_ssim: f64,
    pub mean_loss: LossBreakdown,
}

impl EvalReport {
    /// Per-image output metrics plus a trailing mean row.
    pub fn to_csv(&self) -> String {
        let mut csv = String::from("name,psnr,ssim\n");
        for rec in &self.records {
            csv.push_str(&format!(
                "{},{:.6},{:.6}\n",
                rec.name, rec.output.psnr, rec.output.ssim
            ));
        }
        csv.push_str(&format!(
            "mean,{:.6},{:.6}\n",
            self.mean_output_psnr, self.mean_output_ssim
        ));
        csv
    }
}

/// Evaluates trained parameters on pairs. Images whose dims are not
/// divisor-multiples are edge-padded for the network and the losses, and
/// metrics are computed on the cropped output.
pub fn evaluate(
    cfg: &TrainConfig,
    params: &ModelParameters,
    pairs: &[ImagePair],
) -> Result<EvalReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Dataset("evaluation needs at least one pair".into()));
    }
    let net = cfg.effective_net();
    let losses = cfg.effective_losses();
    let backends = build_backends(cfg, &net, losses)?;
    let div = net.divisor();

    let mut records = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let low = pair.low.to_rgb();
        let high = pair.high.to_rgb();
        if low.data().dim() != high.data().dim() {
            return Err(Error::Dataset(format!(
                "pair {:?} is misaligned: low {:?}, high {:?}",
                pair.name,
                low.data().dim(),
                high.data().dim()
            )));
        }
        let (h, w) = (low.height(), low.width());
        let (plow, _) = low.pad_to_multiple(div)?;
        let (phigh, _) = high.pad_to_multiple(div)?;
        let priors = extract_prior_stack(&backends.seg, &plow, &net)?;
        let full = enhance(&plow, &priors, params, &net)?;
        let out = full.output.crop(h, w)?;

        let reference_prior = if losses.semantic {
            Some(extract_prior(&backends.seg, &phigh)?)
        } else {
            None
        };
        let sem_refs = reference_prior.as_ref().map(|reference| SemanticRefs {
            backend: &backends.seg,
            reference,
        });
        let text_refs = backends.vl.as_ref().map(|backend| TextRefs {
            backend,
            low: backends.low_embed.as_ref().expect("embedded with backend"),
            high: backends.high_embed.as_ref().expect("embedded with backend"),
        });
        let loss = evaluate_losses(
            &full.output,
            &phigh,
            losses,
            &cfg.weights,
            cfg.gradient_kind,
            sem_refs,
            text_refs,
        )?;
        records.push(EvalRecord {
            name: pair.name.clone(),
            input: metric_report(&low, &high)?,
            output: metric_report(&out, &high)?,
            loss,
        });
    }
    let n = records.len() as f64;
    let mean_loss = mean_breakdown(&records.iter().map(|r| r.loss).collect::<Vec<_>>());
    Ok(EvalReport {
        mean_input_psnr: records.iter().map(|r| r.input.psnr).sum::<f64>() / n,
        mean_output_psnr: records.iter().map(|r| r.output.psnr).sum::<f64>() / n,
        mean_output_ssim: records.iter().map(|r| r.output.ssim).sum::<f64>() / n,
        mean_loss,
        records,
    })
}
