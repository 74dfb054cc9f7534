//! The weighted semi-supervised loss and finetuning with it.
//!
//! ```text
//! L = (1/m) sum_i L_i  +  sum_k W_k L_k / sum_k W_k
//! ```
//!
//! over `m` labeled images and `l` pseudo-labeled images. `L_k` is the
//! matched denoising loss against image `k`'s pseudo-labels and `W_k` the
//! mean confidence of those labels. With [`WeightGranularity::Box`] each
//! pseudo-label's confidence also weights its own proposals inside `L_k`;
//! with [`WeightGranularity::Image`] boxes inside an image count equally.

use rand::seq::index::sample;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::diffusion::denoiser::DenoiserParams;
use crate::diffusion::loss::{image_loss, labeled_term, LossConfig, TrainImage, Weighting};
use crate::diffusion::train::{optimize, LossTrace, OptimizerConfig, PROBE_STREAM};
use crate::diffusion::{DiffusionProcess, LossGrad};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightGranularity {
    #[default]
    Box,
    Image,
}

/// `labeled` carry ground truth, `unlabeled` carry pseudo-labels whose
/// `weight` is their confidence.
#[derive(Debug, Clone, Copy)]
pub struct SslBatch<'a> {
    pub labeled: &'a [&'a TrainImage],
    pub unlabeled: &'a [&'a TrainImage],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SslLossBreakdown {
    pub supervised: f64,
    pub pseudo: f64,
    pub total: f64,
    /// `sum_k W_k`.
    pub weight_sum: f64,
}

fn evaluate_ssl<R: RngCore>(
    params: &DenoiserParams,
    batch: &SslBatch,
    process: &DiffusionProcess,
    cfg: &LossConfig,
    granularity: WeightGranularity,
    rng: &mut R,
    mut grad: Option<&mut [f64]>,
) -> Result<SslLossBreakdown> {
    if batch.labeled.is_empty() && batch.unlabeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let supervised = if batch.labeled.is_empty() {
        0.0
    } else {
        labeled_term(
            params,
            batch.labeled,
            process,
            cfg,
            rng,
            grad.as_deref_mut(),
        )?
    };
    if batch.unlabeled.is_empty() {
        return Ok(SslLossBreakdown {
            supervised,
            pseudo: 0.0,
            total: supervised,
            weight_sum: 0.0,
        });
    }
    let mut image_weights = Vec::with_capacity(batch.unlabeled.len());
    for img in batch.unlabeled {
        if img.targets.is_empty() {
            return Err(Error::NoTargets(img.image_id));
        }
        if img
            .targets
            .iter()
            .any(|t| !(t.weight >= 0.0 && t.weight.is_finite()))
        {
            return Err(Error::Config(format!(
                "{}: pseudo-label weights must be finite and >= 0",
                img.image_id
            )));
        }
        image_weights.push(img.mean_weight());
    }
    let weight_sum: f64 = image_weights.iter().sum();
    if weight_sum <= 0.0 {
        return Err(Error::ZeroWeightMass);
    }
    let weighting = match granularity {
        WeightGranularity::Box => Weighting::Targets,
        WeightGranularity::Image => Weighting::Unit,
    };
    let mut pseudo = 0.0;
    for (img, &w) in batch.unlabeled.iter().zip(&image_weights) {
        let seed = rng.next_u64();
        let scale = w / weight_sum;
        let g = grad.as_deref_mut().map(|g| (g, scale));
        pseudo += scale * image_loss(params, img, seed, process, cfg, weighting, g)?.total;
    }
    Ok(SslLossBreakdown {
        supervised,
        pseudo,
        total: supervised + pseudo,
        weight_sum,
    })
}

/// Loss breakdown and gradient. Labeled images draw their noise seeds from
/// `rng` first, then unlabeled ones, so with no unlabeled images this is
/// exactly [`crate::diffusion::supervised_loss`].
pub fn ssl_loss<R: RngCore>(
    params: &DenoiserParams,
    batch: &SslBatch,
    process: &DiffusionProcess,
    cfg: &LossConfig,
    granularity: WeightGranularity,
    rng: &mut R,
) -> Result<(SslLossBreakdown, Vec<f64>)> {
    let mut grad = vec![0.0; params.values.len()];
    let b = evaluate_ssl(
        params,
        batch,
        process,
        cfg,
        granularity,
        rng,
        Some(&mut grad),
    )?;
    Ok((b, grad))
}

pub fn ssl_loss_value<R: RngCore>(
    params: &DenoiserParams,
    batch: &SslBatch,
    process: &DiffusionProcess,
    cfg: &LossConfig,
    granularity: WeightGranularity,
    rng: &mut R,
) -> Result<SslLossBreakdown> {
    evaluate_ssl(params, batch, process, cfg, granularity, rng, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub granularity: WeightGranularity,
    /// Unlabeled images per step; labeled images per step is
    /// `optimizer.batch_size`.
    pub unlabeled_batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let optimizer = OptimizerConfig::default();
        FinetuneConfig {
            optimizer,
            loss: LossConfig::default(),
            granularity: WeightGranularity::Box,
            unlabeled_batch_size: optimizer.batch_size,
        }
    }
}

/// Minimize [`ssl_loss`] from `params`. Unlabeled images without any
/// pseudo-label are skipped. With no unlabeled images the trajectory equals
/// [`crate::diffusion::train`] under the same optimizer config.
pub fn finetune(
    params: DenoiserParams,
    labeled: &[TrainImage],
    unlabeled: &[TrainImage],
    process: &DiffusionProcess,
    cfg: &FinetuneConfig,
) -> Result<(DenoiserParams, LossTrace)> {
    if labeled.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let unlabeled: Vec<&TrainImage> = unlabeled.iter().filter(|i| !i.targets.is_empty()).collect();
    if cfg.unlabeled_batch_size == 0 && !unlabeled.is_empty() {
        return Err(Error::Config("unlabeled_batch_size must be >= 1".into()));
    }
    let opt = &cfg.optimizer;
    let lb = opt.batch_size.min(labeled.len());
    let ub = cfg.unlabeled_batch_size.min(unlabeled.len());
    let probe_l: Vec<&TrainImage> = labeled.iter().take(opt.probe_size).collect();
    let probe_u: Vec<&TrainImage> = unlabeled.iter().take(opt.probe_size).copied().collect();
    optimize(
        params,
        opt,
        |p, step| {
            let mut rng = seeding::rng(seeding::derive(opt.seed, &[step as u64]));
            let lbatch: Vec<&TrainImage> = sample(&mut rng, labeled.len(), lb)
                .into_iter()
                .map(|i| &labeled[i])
                .collect();
            let ubatch: Vec<&TrainImage> = if ub == 0 {
                Vec::new()
            } else {
                sample(&mut rng, unlabeled.len(), ub)
                    .into_iter()
                    .map(|i| unlabeled[i])
                    .collect()
            };
            let batch = SslBatch {
                labeled: &lbatch,
                unlabeled: &ubatch,
            };
            let (b, grad) = ssl_loss(p, &batch, process, &cfg.loss, cfg.granularity, &mut rng)?;
            Ok(LossGrad {
                loss: b.total,
                grad,
            })
        },
        |p| {
            let mut rng = seeding::rng(seeding::derive(opt.seed, &[PROBE_STREAM]));
            let batch = SslBatch {
                labeled: &probe_l,
                unlabeled: &probe_u,
            };
            Ok(ssl_loss_value(p, &batch, process, &cfg.loss, cfg.granularity, &mut rng)?.total)
        },
    )
}
