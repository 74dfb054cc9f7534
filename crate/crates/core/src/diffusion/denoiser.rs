//! The per-box denoiser: a one-hidden-layer perceptron plus a linear skip
//! from input to output, with a hand-written backward pass.
//!
//! Input per box: the noisy latent (4), a sinusoidal embedding of the step,
//! and the scene features pooled over the box the latent currently decodes
//! to. Output: the predicted clean latent (4) and `num_classes + 1` logits,
//! the last one being background.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::latent::{BoxLatents, LatentCodec};
use crate::error::{Error, Result};
use crate::features::IntegralFeatures;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub time_embed_dim: usize,
    pub roi_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(num_classes: usize, hidden: usize) -> Self {
        Architecture {
            time_embed_dim: 16,
            roi_dim: 2 * (crate::features::GEOMETRY_CHANNELS + num_classes),
            hidden,
            num_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        4 + self.time_embed_dim + self.roi_dim
    }

    pub fn output_dim(&self) -> usize {
        4 + self.num_classes + 1
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        (self.hidden + self.output_dim()) * (self.input_dim() + 1) + self.output_dim() * self.hidden
    }

    fn offsets(&self) -> [usize; 5] {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.input_dim();
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output_dim() * self.hidden;
        let w3 = b2 + self.output_dim();
        [w1, b1, w2, b2, w3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_classes == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "invalid denoiser architecture {self:?}"
            )));
        }
        Ok(())
    }
}

/// All weights in one flat vector, laid out as `w1 (hidden x input)`, `b1`,
/// `w2 (output x hidden)`, `b2`, `w3 (output x input)`, matrices row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl DenoiserParams {
    /// Gaussian hidden-path weights with variance `1 / fan_in`; zero biases
    /// and skip weights.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeding::rng(seed);
        let [w1, b1, w2, b2, _] = arch.offsets();
        let mut values = vec![0.0; arch.num_params()];
        let s1 = (1.0 / arch.input_dim() as f64).sqrt();
        for v in &mut values[w1..b1] {
            *v = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        let s2 = (1.0 / arch.hidden as f64).sqrt();
        for v in &mut values[w2..b2] {
            *v = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(DenoiserParams { arch, values })
    }

    pub fn zeros(arch: Architecture) -> Self {
        DenoiserParams {
            arch,
            values: vec![0.0; arch.num_params()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.values.len() != self.arch.num_params() {
            return Err(Error::Integrity(format!(
                "parameter vector has {} values, architecture needs {}",
                self.values.len(),
                self.arch.num_params()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser parameters".into()));
        }
        Ok(())
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let [_, _, _, b2, w3] = self.arch.offsets();
        &mut self.values[b2..w3]
    }
}

pub fn time_embedding(t: usize, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
}

/// Reusable buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
    d_hidden: Vec<f64>,
}

impl Workspace {
    pub fn new(arch: &Architecture) -> Self {
        Workspace {
            input: vec![0.0; arch.input_dim()],
            hidden: vec![0.0; arch.hidden],
            output: vec![0.0; arch.output_dim()],
            d_hidden: vec![0.0; arch.hidden],
        }
    }

    /// Fill `input` for a box latent at step `t`.
    pub fn assemble(
        &mut self,
        arch: &Architecture,
        z: &[f64; 4],
        t: usize,
        features: &IntegralFeatures,
        codec: &LatentCodec,
    ) {
        let (iw, ih) = features.image_size();
        self.input[..4].copy_from_slice(z);
        let te = arch.time_embed_dim;
        time_embedding(t, te, &mut self.input[4..4 + te]);
        let bbox = codec.decode(z, iw, ih);
        features.roi_pool(&bbox, &mut self.input[4 + te..]);
    }
}

/// Forward pass on `ws.input`; result in `ws.output`.
pub fn forward(params: &DenoiserParams, ws: &mut Workspace) {
    let arch = &params.arch;
    let [w1, b1, w2, b2, w3] = arch.offsets();
    let d = arch.input_dim();
    let v = &params.values;
    for j in 0..arch.hidden {
        let row = &v[w1 + j * d..w1 + (j + 1) * d];
        let pre: f64 = row.iter().zip(&ws.input).map(|(w, x)| w * x).sum::<f64>() + v[b1 + j];
        ws.hidden[j] = pre.tanh();
    }
    for k in 0..arch.output_dim() {
        let row = &v[w2 + k * arch.hidden..w2 + (k + 1) * arch.hidden];
        let skip = &v[w3 + k * d..w3 + (k + 1) * d];
        ws.output[k] = row.iter().zip(&ws.hidden).map(|(w, h)| w * h).sum::<f64>()
            + skip.iter().zip(&ws.input).map(|(w, x)| w * x).sum::<f64>()
            + v[b2 + k];
    }
}

/// Accumulate `scale * d(output . d_output)/d(params)` into `grad`, using the
/// activations left in `ws` by the matching [`forward`] call.
pub fn backward(
    params: &DenoiserParams,
    ws: &mut Workspace,
    d_output: &[f64],
    scale: f64,
    grad: &mut [f64],
) {
    let arch = &params.arch;
    let [w1, b1, w2, b2, w3] = arch.offsets();
    let d = arch.input_dim();
    let hdim = arch.hidden;
    let v = &params.values;
    ws.d_hidden.iter_mut().for_each(|x| *x = 0.0);
    for (k, &g) in d_output.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let g = g * scale;
        grad[b2 + k] += g;
        for (gi, x) in grad[w3 + k * d..w3 + (k + 1) * d].iter_mut().zip(&ws.input) {
            *gi += g * x;
        }
        let row = w2 + k * hdim;
        for j in 0..hdim {
            grad[row + j] += g * ws.hidden[j];
            ws.d_hidden[j] += g * v[row + j];
        }
    }
    for j in 0..hdim {
        let h = ws.hidden[j];
        let dpre = ws.d_hidden[j] * (1.0 - h * h);
        if dpre == 0.0 {
            continue;
        }
        grad[b1 + j] += dpre;
        let row = w1 + j * d;
        for (gi, x) in grad[row..row + d].iter_mut().zip(&ws.input) {
            *gi += dpre * x;
        }
    }
}

/// Predictions for a whole set of latents.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    pub z0: Vec<[f64; 4]>,
    pub logits: Vec<Vec<f64>>,
}

/// One deterministic pass of the denoiser over every box in `zt`.
pub fn denoise_step(
    zt: &BoxLatents,
    features: &IntegralFeatures,
    params: &DenoiserParams,
    codec: &LatentCodec,
) -> Result<DenoiseOutput> {
    if features.roi_dim() != params.arch.roi_dim {
        return Err(Error::Config(format!(
            "scene features have {} channels, denoiser expects {}",
            features.roi_dim(),
            params.arch.roi_dim
        )));
    }
    let mut ws = Workspace::new(&params.arch);
    let mut out = DenoiseOutput {
        z0: Vec::with_capacity(zt.boxes.len()),
        logits: Vec::with_capacity(zt.boxes.len()),
    };
    for z in &zt.boxes {
        ws.assemble(&params.arch, z, zt.t, features, codec);
        forward(params, &mut ws);
        out.z0
            .push([ws.output[0], ws.output[1], ws.output[2], ws.output[3]]);
        out.logits.push(ws.output[4..].to_vec());
    }
    Ok(out)
}

/// Softmax in place, numerically shifted.
pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
