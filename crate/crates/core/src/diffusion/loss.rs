//! Denoising loss for one image and the supervised batch loss built on it.
//!
//! Per image: sample a step `t`, build `P` clean proposals (ground truth
//! cycled over half the slots, random boxes in the rest), noise them to `t`,
//! predict, and regress each prediction to the target nearest its noisy
//! input box under `(1 - IoU) + |latent difference|`. A
//! proposal is labeled with its target's class when its predicted box
//! overlaps that target at `positive_iou` or more, background otherwise.
//!
//! With target weights `w`, the image loss is
//!
//! ```text
//! L = 1/2 sum_j w_j |zhat_j - z_j|^2 / sum_j w_j  +  lambda sum_j w_j CE_j / sum_j w_j
//! ```
//!
//! which is the plain mean over proposals when all weights are equal and is
//! unchanged when all weights are scaled.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::denoiser::{backward, forward, softmax, DenoiserParams, Workspace};
use super::latent::{forward_noise, BoxLatents};
use super::DiffusionProcess;
use crate::boxgeom::Bbox;
use crate::error::{Error, Result};
use crate::features::IntegralFeatures;
use crate::ids::{ClassId, ImageId};
use crate::seeding;
use crate::simworld::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub num_proposals: usize,
    pub class_weight: f64,
    pub positive_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            num_proposals: 64,
            class_weight: 1.0,
            positive_iou: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_proposals == 0
            || !(self.class_weight >= 0.0)
            || !(0.0..=1.0).contains(&self.positive_iou)
        {
            return Err(Error::Config(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub bbox: Bbox,
    pub class_id: ClassId,
    pub weight: f64,
}

/// One image ready for training: pooled-feature table plus targets.
#[derive(Debug, Clone)]
pub struct TrainImage {
    pub image_id: ImageId,
    pub features: IntegralFeatures,
    pub targets: Vec<Target>,
}

impl TrainImage {
    pub fn from_scene(scene: &Scene) -> Self {
        TrainImage {
            image_id: scene.image_id,
            features: scene.features.integral(),
            targets: scene
                .objects
                .iter()
                .map(|o| Target {
                    bbox: o.bbox,
                    class_id: o.class_id,
                    weight: 1.0,
                })
                .collect(),
        }
    }

    pub fn mean_weight(&self) -> f64 {
        self.targets.iter().map(|t| t.weight).sum::<f64>() / self.targets.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImageLoss {
    pub coord: f64,
    pub class: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Whether target weights are honoured or all treated as 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Weighting {
    Unit,
    Targets,
}

/// Regression target and class label assigned to one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Assigned {
    pub latent: [f64; 4],
    /// Index into the logits; `num_classes` is background.
    pub label: usize,
    pub weight: f64,
}

/// Loss terms and `dL/d(output)` for already-assigned proposals.
pub(crate) fn loss_terms(
    outputs: &[Vec<f64>],
    assigned: &[Assigned],
    class_weight: f64,
    d_out: &mut [Vec<f64>],
) -> ImageLoss {
    let mass: f64 = assigned.iter().map(|a| a.weight).sum();
    let mut coord = 0.0;
    let mut class = 0.0;
    let mut probs = vec![0.0; outputs.first().map_or(0, |o| o.len() - 4)];
    for ((out, a), d) in outputs.iter().zip(assigned).zip(d_out.iter_mut()) {
        let w = a.weight / mass;
        for c in 0..4 {
            let r = out[c] - a.latent[c];
            coord += 0.5 * w * r * r;
            d[c] = w * r;
        }
        softmax(&out[4..], &mut probs);
        class += -w * probs[a.label].max(f64::MIN_POSITIVE).ln();
        for (k, p) in probs.iter().enumerate() {
            let onehot = if k == a.label { 1.0 } else { 0.0 };
            d[4 + k] = class_weight * w * (p - onehot);
        }
    }
    ImageLoss {
        coord,
        class,
        total: coord + class_weight * class,
    }
}

fn unit_distance(a: &[f64; 4], b: &[f64; 4], scale: f64) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    s.sqrt() / (2.0 * scale)
}

/// Loss of one image; when `grad` is given, adds `grad_scale * dL/dparams`.
pub(crate) fn image_loss(
    params: &DenoiserParams,
    image: &TrainImage,
    seed: u64,
    process: &DiffusionProcess,
    cfg: &LossConfig,
    weighting: Weighting,
    grad: Option<(&mut [f64], f64)>,
) -> Result<ImageLoss> {
    if image.targets.is_empty() {
        return Err(Error::NoTargets(image.image_id));
    }
    let arch = params.arch;
    if image.features.roi_dim() != arch.roi_dim {
        return Err(Error::Config(format!(
            "{}: features have {} channels, denoiser expects {}",
            image.image_id,
            image.features.roi_dim(),
            arch.roi_dim
        )));
    }
    let codec = &process.codec;
    let (iw, ih) = image.features.image_size();
    let mut rng = seeding::rng(seed);
    let t = rng.random_range(1..=process.schedule.train_steps());

    let gt_latents: Vec<[f64; 4]> = image
        .targets
        .iter()
        .map(|g| codec.encode(&g.bbox, iw, ih))
        .collect();
    let n_gt = gt_latents.len();
    let p = cfg.num_proposals;
    let from_gt = p.div_ceil(2);
    let mut clean = Vec::with_capacity(p);
    for i in 0..p {
        if i < from_gt {
            clean.push(gt_latents[i % n_gt]);
        } else {
            let mut z = [0.0; 4];
            for v in &mut z {
                *v = rng
                    .sample::<f64, _>(StandardNormal)
                    .clamp(-codec.scale, codec.scale);
            }
            clean.push(z);
        }
    }
    let zt = forward_noise(
        &BoxLatents { t: 0, boxes: clean },
        t,
        &process.schedule,
        &mut rng,
    )?;

    let mut spaces: Vec<Workspace> = Vec::with_capacity(p);
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(p);
    for z in &zt.boxes {
        let mut ws = Workspace::new(&arch);
        ws.assemble(&arch, z, t, &image.features, codec);
        forward(params, &mut ws);
        outputs.push(ws.output.clone());
        spaces.push(ws);
    }

    // Each proposal regresses to the ground truth its noisy input box covers
    // best: IoU first, latent distance as the tie-break for boxes that touch
    // nothing.
    let input_boxes: Vec<Bbox> = zt.boxes.iter().map(|z| codec.decode(z, iw, ih)).collect();
    let nearest: Vec<usize> = zt
        .boxes
        .iter()
        .zip(&input_boxes)
        .map(|(z, b)| {
            let cost = |g: usize| {
                (1.0 - b.iou(&image.targets[g].bbox))
                    + unit_distance(z, &gt_latents[g], codec.scale)
            };
            (0..n_gt).fold(0, |best, g| if cost(g) < cost(best) { g } else { best })
        })
        .collect();
    let pred_boxes: Vec<Bbox> = outputs
        .iter()
        .map(|o| codec.decode(&[o[0], o[1], o[2], o[3]], iw, ih))
        .collect();

    let weight_of = |g: usize| match weighting {
        Weighting::Unit => 1.0,
        Weighting::Targets => image.targets[g].weight,
    };
    let assigned: Vec<Assigned> = nearest
        .iter()
        .enumerate()
        .map(|(j, &g)| {
            let target = &image.targets[g];
            let label = if pred_boxes[j].iou(&target.bbox) >= cfg.positive_iou {
                target.class_id.index()
            } else {
                arch.background()
            };
            Assigned {
                latent: gt_latents[g],
                label,
                weight: weight_of(g),
            }
        })
        .collect();
    if assigned.iter().map(|a| a.weight).sum::<f64>() <= 0.0 {
        return Err(Error::ZeroWeightMass);
    }

    let mut d_out = vec![vec![0.0; arch.output_dim()]; p];
    let terms = loss_terms(&outputs, &assigned, cfg.class_weight, &mut d_out);
    if let Some((grad, scale)) = grad {
        for (ws, d) in spaces.iter_mut().zip(&d_out) {
            backward(params, ws, d, scale, grad);
        }
    }
    Ok(terms)
}

/// Mean of the per-image losses over the batch with unit weights, and its
/// gradient. Each image draws its step and noise from a seed taken from
/// `rng` in batch order.
pub fn supervised_loss<R: RngCore>(
    params: &DenoiserParams,
    batch: &[&TrainImage],
    process: &DiffusionProcess,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossGrad> {
    let mut grad = vec![0.0; params.values.len()];
    let loss = labeled_term(params, batch, process, cfg, rng, Some(&mut grad))?;
    Ok(LossGrad { loss, grad })
}

/// Same value as [`supervised_loss`] without the gradient.
pub fn supervised_loss_value<R: RngCore>(
    params: &DenoiserParams,
    batch: &[&TrainImage],
    process: &DiffusionProcess,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<f64> {
    labeled_term(params, batch, process, cfg, rng, None)
}

pub(crate) fn labeled_term<R: RngCore>(
    params: &DenoiserParams,
    batch: &[&TrainImage],
    process: &DiffusionProcess,
    cfg: &LossConfig,
    rng: &mut R,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate()?;
    let scale = 1.0 / batch.len() as f64;
    let mut sum = 0.0;
    for image in batch {
        let seed = rng.next_u64();
        let g = grad.as_deref_mut().map(|g| (g, scale));
        sum += image_loss(params, image, seed, process, cfg, Weighting::Unit, g)?.total;
    }
    Ok(sum / batch.len() as f64)
}
