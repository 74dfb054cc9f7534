use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::boxgeom::Bbox;
use crate::error::{Error, Result};

/// Maps boxes to the diffusion signal space: `(cx, cy, w, h)` normalized by
/// the image size to `[0, 1]`, then affinely to `[-scale, scale]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentCodec {
    pub scale: f64,
}

impl Default for LatentCodec {
    fn default() -> Self {
        LatentCodec { scale: 2.0 }
    }
}

impl LatentCodec {
    #[inline]
    pub fn to_signal(&self, unit: f64) -> f64 {
        (2.0 * unit - 1.0) * self.scale
    }

    /// Clamped to `[0, 1]`.
    #[inline]
    pub fn to_unit(&self, z: f64) -> f64 {
        (z.clamp(-self.scale, self.scale) / self.scale + 1.0) * 0.5
    }

    pub fn encode(&self, b: &Bbox, image_width: f64, image_height: f64) -> [f64; 4] {
        let (cx, cy) = b.center();
        [
            self.to_signal(cx / image_width),
            self.to_signal(cy / image_height),
            self.to_signal(b.width() / image_width),
            self.to_signal(b.height() / image_height),
        ]
    }

    /// Latents are clamped to the signal range first, so any finite latent
    /// decodes to a valid box inside the image.
    pub fn decode(&self, z: &[f64; 4], image_width: f64, image_height: f64) -> Bbox {
        let cx = self.to_unit(z[0]) * image_width;
        let cy = self.to_unit(z[1]) * image_height;
        let w = self.to_unit(z[2]) * image_width;
        let h = self.to_unit(z[3]) * image_height;
        let x0 = (cx - 0.5 * w).clamp(0.0, image_width);
        let y0 = (cy - 0.5 * h).clamp(0.0, image_height);
        let x1 = (cx + 0.5 * w).clamp(x0, image_width);
        let y1 = (cy + 0.5 * h).clamp(y0, image_height);
        Bbox::new(x0, y0, x1, y1).expect("clamped latent decodes to a valid box")
    }
}

/// A set of box latents at diffusion step `t` (`t = 0` is clean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxLatents {
    pub t: usize,
    pub boxes: Vec<[f64; 4]>,
}

/// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`, `eps ~ N(0, I)`.
pub fn forward_noise<R: Rng + ?Sized>(
    z0: &BoxLatents,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<BoxLatents> {
    if z0.t != 0 {
        return Err(Error::Config(format!(
            "forward_noise expects clean latents, got step {}",
            z0.t
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let boxes = z0
        .boxes
        .iter()
        .map(|z| {
            let mut out = [0.0; 4];
            for (o, &v) in out.iter_mut().zip(z) {
                let eps: f64 = rng.sample(StandardNormal);
                *o = signal * v + noise * eps;
            }
            out
        })
        .collect();
    Ok(BoxLatents { t, boxes })
}
