//! Minibatch optimization of the denoiser.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::denoiser::DenoiserParams;
use super::loss::{supervised_loss, supervised_loss_value, LossConfig, LossGrad, TrainImage};
use super::DiffusionProcess;
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the gradient to at most this norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Images in the fixed probe set.
    pub probe_size: usize,
    /// Probe every this many steps (and always after the last).
    pub probe_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 3e-3,
            steps: 1500,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(10.0),
            seed: 0,
            probe_size: 16,
            probe_every: 25,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0)
            && self.probe_size > 0
            && self.probe_every > 0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    /// Loss of the minibatch used at this step, before the update. `None` at
    /// step 0.
    pub batch_loss: Option<f64>,
    /// Loss on the fixed probe set with fixed noise, after the update.
    pub probe_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn probes(&self) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .filter_map(|e| e.probe_loss.map(|p| (e.step, p)))
            .collect()
    }

    pub fn initial_probe(&self) -> Option<f64> {
        self.probes().first().map(|p| p.1)
    }

    pub fn final_probe(&self) -> Option<f64> {
        self.probes().last().map(|p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("step,batch_loss,probe_loss\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{}\n",
                e.step,
                fmt(e.batch_loss),
                fmt(e.probe_loss)
            ));
        }
        s
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Run `opt.steps` updates of `params`. `objective(params, step)` returns the
/// minibatch loss and gradient for 1-based `step`; `probe(params)` scores the
/// current parameters for the trace.
pub fn optimize<F, P>(
    mut params: DenoiserParams,
    opt: &OptimizerConfig,
    mut objective: F,
    mut probe: P,
) -> Result<(DenoiserParams, LossTrace)>
where
    F: FnMut(&DenoiserParams, usize) -> Result<LossGrad>,
    P: FnMut(&DenoiserParams) -> Result<f64>,
{
    opt.validate()?;
    params.validate()?;
    let n = params.values.len();
    let mut adam = Adam {
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };
    let mut trace = LossTrace::default();
    let checked = |step: usize, value: f64| {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::DivergedLoss { step, value })
        }
    };
    trace.entries.push(TraceEntry {
        step: 0,
        batch_loss: None,
        probe_loss: Some(checked(0, probe(&params)?)?),
    });
    for step in 1..=opt.steps {
        let LossGrad { loss, mut grad } = objective(&params, step)?;
        checked(step, loss)?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        checked(step, norm)?;
        if let Some(c) = opt.clip_norm {
            if norm > c {
                grad.iter_mut().for_each(|g| *g *= c / norm);
            }
        }
        let lr = opt.learning_rate;
        match opt.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                adam.t += 1;
                let c1 = 1.0 - opt.beta1.powi(adam.t);
                let c2 = 1.0 - opt.beta2.powi(adam.t);
                for i in 0..n {
                    let g = grad[i];
                    adam.m[i] = opt.beta1 * adam.m[i] + (1.0 - opt.beta1) * g;
                    adam.v[i] = opt.beta2 * adam.v[i] + (1.0 - opt.beta2) * g * g;
                    params.values[i] -=
                        lr * (adam.m[i] / c1) / ((adam.v[i] / c2).sqrt() + opt.epsilon);
                }
            }
        }
        let probe_loss = if step % opt.probe_every == 0 || step == opt.steps {
            Some(checked(step, probe(&params)?)?)
        } else {
            None
        };
        trace.entries.push(TraceEntry {
            step,
            batch_loss: Some(loss),
            probe_loss,
        });
    }
    Ok((params, trace))
}

pub(crate) const PROBE_STREAM: u64 = 0x50524f4245;

/// Supervised training on `dataset` with unit target weights.
pub fn train(
    params: DenoiserParams,
    dataset: &[TrainImage],
    process: &DiffusionProcess,
    loss_cfg: &LossConfig,
    opt: &OptimizerConfig,
) -> Result<(DenoiserParams, LossTrace)> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let probe_set: Vec<&TrainImage> = dataset.iter().take(opt.probe_size).collect();
    let batch_size = opt.batch_size.min(dataset.len());
    optimize(
        params,
        opt,
        |p, step| {
            let mut rng = seeding::rng(seeding::derive(opt.seed, &[step as u64]));
            let batch: Vec<&TrainImage> = sample(&mut rng, dataset.len(), batch_size)
                .into_iter()
                .map(|i| &dataset[i])
                .collect();
            supervised_loss(p, &batch, process, loss_cfg, &mut rng)
        },
        |p| {
            let mut rng = seeding::rng(seeding::derive(opt.seed, &[PROBE_STREAM]));
            supervised_loss_value(p, &probe_set, process, loss_cfg, &mut rng)
        },
    )
}
