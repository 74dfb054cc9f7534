//! A small diffusion box detector: boxes are noised in a normalized latent
//! space and a per-box denoiser, conditioned on scene features pooled over the
//! box, predicts the clean box and its class.

pub mod checkpoint;
pub mod denoiser;
pub mod latent;
pub mod loss;
pub mod sampler;
pub mod schedule;
pub mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::ToyDetector;
pub use denoiser::{denoise_step, Architecture, DenoiseOutput, DenoiserParams};
pub use latent::{forward_noise, BoxLatents, LatentCodec};
pub use loss::{supervised_loss, supervised_loss_value, LossConfig, LossGrad, Target, TrainImage};
pub use sampler::{initial_latents, reverse_sample, SamplerConfig};
pub use schedule::NoiseSchedule;
pub use train::{optimize, train, LossTrace, OptimizerConfig, OptimizerKind, TraceEntry};

/// Noise schedule plus the box coding it acts on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionProcess {
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
}

impl Default for DiffusionProcess {
    fn default() -> Self {
        DiffusionProcess {
            schedule: NoiseSchedule::cosine(1000).expect("valid default schedule"),
            codec: LatentCodec::default(),
        }
    }
}
