use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative signal fractions `alpha_bar[0..=T]` with `alpha_bar[0] = 1`,
/// strictly decreasing and positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl TryFrom<Vec<f64>> for NoiseSchedule {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        NoiseSchedule::from_alpha_bar(v)
    }
}

impl From<NoiseSchedule> for Vec<f64> {
    fn from(s: NoiseSchedule) -> Self {
        s.alpha_bar
    }
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// Cosine schedule over `train_steps` steps, with per-step betas capped
    /// at 0.999 so the last step keeps a sliver of signal.
    pub fn cosine(train_steps: usize) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / train_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = Vec::with_capacity(train_steps + 1);
        alpha_bar.push(1.0);
        let mut prev_ideal = 1.0;
        let mut acc = 1.0;
        for t in 1..=train_steps {
            let ideal = f(t) / f0;
            let beta = (1.0 - ideal / prev_ideal).clamp(0.0, MAX_BETA);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
            prev_ideal = ideal;
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar[0] must be 1".into()));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0] && w[1] > 0.0) {
                return Err(Error::Config(
                    "alpha_bar must be strictly decreasing within (0, 1]".into(),
                ));
            }
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// `T`.
    pub fn train_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::StepOutOfRange {
            t,
            max: self.train_steps(),
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `num_steps` evenly strided timesteps from `T` down, e.g. `[1000, 900,
    /// ..., 100]` for 10 steps over 1000. The step after the last is 0.
    pub fn inference_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        let t_max = self.train_steps();
        if num_steps == 0 || num_steps > t_max {
            return Err(Error::Config(format!(
                "inference steps {num_steps} outside [1, {t_max}]"
            )));
        }
        Ok((0..num_steps)
            .map(|i| ((t_max * (num_steps - i)) as f64 / num_steps as f64).round() as usize)
            .collect())
    }
}
