//! DDIM reverse sampling from random boxes. `eta` scales the fresh noise
//! added at each step: 0 is deterministic given the starting boxes, 1 has
//! the variance of the matching ancestral sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::denoiser::{forward, softmax, DenoiserParams, Workspace};
use super::DiffusionProcess;
use crate::accumulator::DetectionRun;
use crate::error::{Error, Result};
use crate::features::IntegralFeatures;
use crate::ids::{ClassId, ImageId};
use crate::nms::Detection;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_boxes: usize,
    pub num_steps: usize,
    /// Multiplies the width and height of the initial random boxes.
    pub f_box_size: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub seed: u64,
}

fn default_eta() -> f64 {
    0.0
}

const STEP_NOISE_STREAM: u64 = 0x4e4f495345;

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_boxes: 300,
            num_steps: 10,
            f_box_size: 1.0,
            eta: default_eta(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_boxes == 0
            || self.num_steps == 0
            || !(self.f_box_size > 0.0 && self.f_box_size <= 1.0)
            || !(0.0..=1.0).contains(&self.eta)
        {
            return Err(Error::Config(format!("invalid sampler config {self:?}")));
        }
        Ok(())
    }
}

/// The `num_boxes` starting latents for `cfg.seed`: standard normal draws,
/// clamped to the signal range, with width and height shrunk by `f_box_size`
/// in unit space.
pub fn initial_latents(cfg: &SamplerConfig, process: &DiffusionProcess) -> Vec<[f64; 4]> {
    let codec = &process.codec;
    let mut rng = seeding::rng(cfg.seed);
    (0..cfg.num_boxes)
        .map(|_| {
            let mut z = [0.0; 4];
            for v in &mut z {
                *v = rng
                    .sample::<f64, _>(StandardNormal)
                    .clamp(-codec.scale, codec.scale);
            }
            for v in &mut z[2..] {
                *v = codec.to_signal(codec.to_unit(*v) * cfg.f_box_size);
            }
            z
        })
        .collect()
}

/// One run of the detector on one image. Every starting box yields one
/// detection; confidence is the softmax probability of the best foreground
/// class.
pub fn reverse_sample(
    features: &IntegralFeatures,
    params: &DenoiserParams,
    process: &DiffusionProcess,
    cfg: &SamplerConfig,
    image_id: ImageId,
    run_index: u32,
) -> Result<DetectionRun> {
    cfg.validate()?;
    let arch = params.arch;
    if features.roi_dim() != arch.roi_dim {
        return Err(Error::Config(format!(
            "{image_id}: features have {} channels, denoiser expects {}",
            features.roi_dim(),
            arch.roi_dim
        )));
    }
    let schedule = &process.schedule;
    let codec = &process.codec;
    let (iw, ih) = features.image_size();
    let steps = schedule.inference_timesteps(cfg.num_steps)?;
    let mut ws = Workspace::new(&arch);
    let mut probs = vec![0.0; arch.num_classes + 1];
    let mut detections = Vec::with_capacity(cfg.num_boxes);
    let mut noise = seeding::rng(seeding::derive(cfg.seed, &[STEP_NOISE_STREAM]));
    for mut z in initial_latents(cfg, process) {
        let mut z0 = z;
        for (i, &t) in steps.iter().enumerate() {
            ws.assemble(&arch, &z, t, features, codec);
            forward(params, &mut ws);
            for c in 0..4 {
                z0[c] = ws.output[c].clamp(-codec.scale, codec.scale);
            }
            let next = steps.get(i + 1).copied().unwrap_or(0);
            if next == 0 {
                // Re-read the refined box so its score describes what it covers.
                ws.assemble(&arch, &z0, t, features, codec);
                forward(params, &mut ws);
                for c in 0..4 {
                    z0[c] = ws.output[c].clamp(-codec.scale, codec.scale);
                }
                break;
            }
            let (ab, ab_next) = (schedule.alpha_bar(t)?, schedule.alpha_bar(next)?);
            let sigma = cfg.eta
                * ((1.0 - ab_next) / (1.0 - ab) * (1.0 - ab / ab_next))
                    .max(0.0)
                    .sqrt();
            let keep = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
            for c in 0..4 {
                let eps = (z[c] - ab.sqrt() * z0[c]) / (1.0 - ab).sqrt();
                let fresh: f64 = if sigma > 0.0 {
                    noise.sample(StandardNormal)
                } else {
                    0.0
                };
                z[c] = ab_next.sqrt() * z0[c] + keep * eps + sigma * fresh;
            }
        }
        softmax(&ws.output[4..], &mut probs);
        let (class, conf) = probs[..arch.num_classes].iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (k, &p)| if p > best.1 { (k, p) } else { best },
        );
        if !conf.is_finite() || z0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{image_id}: sampler produced a non-finite box"
            )));
        }
        detections.push(Detection::new(
            codec.decode(&z0, iw, ih),
            ClassId(class as u32),
            conf.clamp(0.0, 1.0),
        )?);
    }
    Ok(DetectionRun {
        image_id,
        run_index,
        detections,
    })
}
