//! A trained detector and its on-disk form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::denoiser::{Architecture, DenoiserParams};
use super::latent::LatentCodec;
use super::schedule::NoiseSchedule;
use super::DiffusionProcess;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "stochdet-denoiser";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    pub params: DenoiserParams,
    pub process: DiffusionProcess,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    class_names: Vec<String>,
    codec: LatentCodec,
    /// `alpha_bar[0..=T]`.
    schedule: NoiseSchedule,
    architecture: Architecture,
    parameters: Vec<f64>,
}

impl ToyDetector {
    pub fn new(
        params: DenoiserParams,
        process: DiffusionProcess,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let d = ToyDetector {
            params,
            process,
            class_names,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.class_names.len() != self.params.arch.num_classes {
            return Err(Error::Integrity(format!(
                "{} class names for a {}-class denoiser",
                self.class_names.len(),
                self.params.arch.num_classes
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            class_names: self.class_names.clone(),
            codec: self.process.codec,
            schedule: self.process.schedule.clone(),
            architecture: self.params.arch,
            parameters: self.params.values.clone(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Parse {
            context: "checkpoint".into(),
            message: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: CheckpointFile =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
                context: format!("checkpoint at {}", e.path()),
                message: e.inner().to_string(),
            })?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        if file.parameters.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        ToyDetector::new(
            DenoiserParams {
                arch: file.architecture,
                values: file.parameters,
            },
            DiffusionProcess {
                schedule: file.schedule,
                codec: file.codec,
            },
            file.class_names,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
