//! Ablation harness: retrains the pipeline with components disabled and
//! reports what each one contributes.
//!
//! Two sweeps run over a shared train/holdout split: one cumulatively
//! re-enables the guidance components (image prior, text prior,
//! coarse-to-fine), one cumulatively re-enables the loss terms. Every run is
//! self-checked: a disabled component must leave no trace in the parameter
//! store or the loss log, so a wiring bug fails the harness instead of
//! silently skewing the comparison.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImagePair;
use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, LossSwitches};
use crate::train::{evaluate, train, AblationSwitches, TrainConfig, TrainOutcome};

/// Outcome of one ablation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: AblationSwitches,
    pub losses: LossSwitches,
    pub param_count: usize,
    /// Batch-averaged loss at the final training step.
    pub final_loss: LossBreakdown,
    pub mean_input_psnr: f64,
    pub mean_output_psnr: f64,
    pub mean_output_ssim: f64,
    pub seconds: f64,
}

/// Both sweeps over the same data split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    /// Guidance components, re-enabled cumulatively.
    pub prior_rows: Vec<AblationRow>,
    /// Loss terms, re-enabled cumulatively.
    pub loss_rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Plain-text tables for terminal output.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (title, rows) in [
            ("guidance components", &self.prior_rows),
            ("loss terms", &self.loss_rows),
        ] {
            out.push_str(&format!("ablation over {title}\n"));
            out.push_str(&format!(
                "{:<34} {:>10} {:>12} {:>14} {:>8} {:>8}\n",
                "variant", "params", "train loss", "psnr in->out", "ssim", "sec"
            ));
            for r in rows {
                out.push_str(&format!(
                    "{:<34} {:>10} {:>12.6} {:>6.2}->{:<6.2} {:>8.4} {:>8.1}\n",
                    r.label,
                    r.param_count,
                    r.final_loss.total,
                    r.mean_input_psnr,
                    r.mean_output_psnr,
                    r.mean_output_ssim,
                    r.seconds
                ));
            }
            out.push('\n');
        }
        out
    }

    /// Machine-readable variant of the same tables.
    pub fn to_csv(&self) -> String {
        let mut csv = String::from(
            "sweep,variant,params,train_loss,input_psnr,output_psnr,output_ssim,seconds\n",
        );
        for (sweep, rows) in [
            ("guidance", &self.prior_rows),
            ("losses", &self.loss_rows),
        ] {
            for r in rows {
                csv.push_str(&format!(
                    "{},\"{}\",{},{:.6},{:.4},{:.4},{:.4},{:.1}\n",
                    sweep,
                    r.label,
                    r.param_count,
                    r.final_loss.total,
                    r.mean_input_psnr,
                    r.mean_output_psnr,
                    r.mean_output_ssim,
                    r.seconds
                ));
            }
        }
        csv
    }
}

/// Seeded train/holdout split: a quarter (at least one pair) is held out.
fn split_pairs(pairs: &[ImagePair], seed: u64) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    if pairs.len() < 2 {
        return Err(Error::Dataset(
            "ablation needs at least two pairs (one trained, one held out)".into(),
        ));
    }
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let holdout_len = (pairs.len() / 4).max(1);
    let (hold_idx, train_idx) = indices.split_at(holdout_len);
    let collect = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect();
    Ok((collect(train_idx), collect(hold_idx)))
}

/// A disabled component must leave no trace: no parameters for absent
/// modules, zero for switched-off loss terms in every logged step.
fn verify_run(cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    let net = cfg.effective_net();
    let losses = cfg.effective_losses();
    let has_attention = outcome.params.names().any(|n| n.contains(".att."));
    if has_attention != net.use_attention {
        return Err(Error::invalid(format!(
            "attention parameters {} although use_attention = {}",
            if has_attention { "present" } else { "missing" },
            net.use_attention
        )));
    }
    let has_coarse = outcome.params.names().any(|n| n.starts_with("coarse."));
    if has_coarse != net.coarse_to_fine {
        return Err(Error::invalid(format!(
            "coarse-stage parameters {} although coarse_to_fine = {}",
            if has_coarse { "present" } else { "missing" },
            net.coarse_to_fine
        )));
    }
    for rec in &outcome.log {
        for (name, on, v) in [
            ("pixel", losses.pixel, rec.loss.pixel),
            ("edge", losses.edge, rec.loss.edge),
            ("semantic", losses.semantic, rec.loss.semantic),
            ("multimodal", losses.multimodal, rec.loss.multimodal),
        ] {
            if !on && v != 0.0 {
                return Err(Error::invalid(format!(
                    "disabled {name} term logged {v} at step {}",
                    rec.step
                )));
            }
        }
    }
    Ok(())
}

fn run_one(
    base: &TrainConfig,
    label: &str,
    ablation: AblationSwitches,
    losses: LossSwitches,
    train_pairs: &[ImagePair],
    holdout: &[ImagePair],
) -> Result<AblationRow> {
    let cfg = TrainConfig {
        ablation,
        losses,
        ..base.clone()
    };
    log::info!("ablation run: {label}");
    let started = Instant::now();
    let outcome = train(&cfg, train_pairs)?;
    verify_run(&cfg, &outcome)?;
    let eval = evaluate(&cfg, &outcome.params, holdout)?;
    let final_loss = outcome
        .log
        .last()
        .map(|r| r.loss)
        .ok_or_else(|| Error::invalid("training produced no log records"))?;
    Ok(AblationRow {
        label: label.to_string(),
        ablation,
        losses,
        param_count: outcome.params.scalar_count(),
        final_loss,
        mean_input_psnr: eval.mean_input_psnr,
        mean_output_psnr: eval.mean_output_psnr,
        mean_output_ssim: eval.mean_output_ssim,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs both sweeps. The base config supplies everything except the ablation
/// and loss switches, which the sweeps own.
pub fn run_ablation(base: &TrainConfig, pairs: &[ImagePair]) -> Result<AblationReport> {
    base.validate()?;
    let (train_pairs, holdout) = split_pairs(pairs, base.seed)?;
    log::info!(
        "ablation: {} training pairs, {} held out",
        train_pairs.len(),
        holdout.len()
    );

    let sw = |image, text, c2f| AblationSwitches {
        image_prior: image,
        text_prior: text,
        coarse_to_fine: c2f,
    };
    let prior_plan = [
        ("baseline (no priors, single stage)", sw(false, false, false)),
        ("+ image prior", sw(true, false, false)),
        ("+ image & text priors", sw(true, true, false)),
        ("full (priors + coarse-to-fine)", sw(true, true, true)),
    ];
    let mut prior_rows = Vec::with_capacity(prior_plan.len());
    for (label, ablation) in prior_plan {
        prior_rows.push(run_one(
            base,
            label,
            ablation,
            base.losses,
            &train_pairs,
            &holdout,
        )?);
    }

    let ls = |edge, semantic, multimodal| LossSwitches {
        pixel: true,
        edge,
        semantic,
        multimodal,
    };
    let loss_plan = [
        ("pixel", ls(false, false, false)),
        ("pixel + edge", ls(true, false, false)),
        ("pixel + edge + semantic", ls(true, true, false)),
        ("all four terms", ls(true, true, true)),
    ];
    let mut loss_rows = Vec::with_capacity(loss_plan.len());
    for (label, losses) in loss_plan {
        loss_rows.push(run_one(
            base,
            label,
            AblationSwitches::default(),
            losses,
            &train_pairs,
            &holdout,
        )?);
    }

    Ok(AblationReport {
        prior_rows,
        loss_rows,
    })
}
