//! Scene features: a coarse multi-channel grid over the image, and RoI
//! pooling of that grid over a box.
//!
//! Channel layout per cell (all values are cell means):
//!
//! | channel      | content                                             |
//! |--------------|-----------------------------------------------------|
//! | 0            | objectness density `sum_o d_o g_o`                  |
//! | 1..=4        | `sum_o d_o g_o * (cx, cy, w, h)_o`, image-normalized |
//! | 5..5+classes | `sum_o d_o g_o * class_vector_o`                    |
//!
//! where `g_o` is an unnormalized Gaussian blob (peak 1) centred on object
//! `o` and `d_o` its detectability. Pooling a box divides the attribute
//! channels by the pooled objectness, which yields the objectness-weighted
//! mean centre, size and class mix of whatever the box covers.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::boxgeom::Bbox;
use crate::error::{Error, Result};

pub const GEOMETRY_CHANNELS: usize = 5;

/// Pooled objectness below this density (per cell) is treated as this
/// density when normalizing the attribute channels.
const POOL_FLOOR: f64 = 0.1;
const RATIO_MIN: f64 = -0.5;
const RATIO_MAX: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub image_width: f64,
    pub image_height: f64,
    pub grid_width: usize,
    pub grid_height: usize,
    pub channels: usize,
    /// Cell-major: `data[(gy * grid_width + gx) * channels + c]`.
    pub data: Vec<f64>,
}

fn gaussian_cell_mean(a: f64, b: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma * std::f64::consts::SQRT_2;
    let mass = libm::erf((b - mu) / s) - libm::erf((a - mu) / s);
    sigma * (std::f64::consts::PI / 2.0).sqrt() * mass / (b - a)
}

impl FeatureGrid {
    pub fn zeros(
        image_width: f64,
        image_height: f64,
        grid_width: usize,
        grid_height: usize,
        num_classes: usize,
    ) -> Self {
        let channels = GEOMETRY_CHANNELS + num_classes;
        FeatureGrid {
            image_width,
            image_height,
            grid_width,
            grid_height,
            channels,
            data: vec![0.0; grid_width * grid_height * channels],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.channels - GEOMETRY_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_width == 0 || self.grid_height == 0 || self.channels <= GEOMETRY_CHANNELS {
            return Err(Error::Integrity(format!(
                "feature grid shape {}x{}x{} is empty",
                self.grid_width, self.grid_height, self.channels
            )));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::Integrity(
                "feature grid image size must be positive".into(),
            ));
        }
        if self.data.len() != self.grid_width * self.grid_height * self.channels {
            return Err(Error::Integrity(format!(
                "feature grid has {} values, shape needs {}",
                self.data.len(),
                self.grid_width * self.grid_height * self.channels
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(())
    }

    fn cell_size(&self) -> (f64, f64) {
        (
            self.image_width / self.grid_width as f64,
            self.image_height / self.grid_height as f64,
        )
    }

    /// Render one object's blob. `blob_scale` sets the Gaussian sigma as a
    /// fraction of the object's width/height; `class_vector` has one entry
    /// per class.
    pub fn splat(
        &mut self,
        bbox: &Bbox,
        detectability: f64,
        blob_scale: f64,
        class_vector: &[f64],
    ) {
        assert_eq!(class_vector.len(), self.num_classes());
        let (cw, ch) = self.cell_size();
        let (cx, cy) = bbox.center();
        let sx = (blob_scale * bbox.width()).max(0.5);
        let sy = (blob_scale * bbox.height()).max(0.5);
        let gx0 = (((cx - 4.0 * sx) / cw).floor().max(0.0)) as usize;
        let gx1 = (((cx + 4.0 * sx) / cw).ceil() as usize).min(self.grid_width);
        let gy0 = (((cy - 4.0 * sy) / ch).floor().max(0.0)) as usize;
        let gy1 = (((cy + 4.0 * sy) / ch).ceil() as usize).min(self.grid_height);
        if gx0 >= gx1 || gy0 >= gy1 {
            return;
        }
        let wx: Vec<f64> = (gx0..gx1)
            .map(|gx| gaussian_cell_mean(gx as f64 * cw, (gx + 1) as f64 * cw, cx, sx))
            .collect();
        let wy: Vec<f64> = (gy0..gy1)
            .map(|gy| gaussian_cell_mean(gy as f64 * ch, (gy + 1) as f64 * ch, cy, sy))
            .collect();
        let mut attrs = Vec::with_capacity(self.channels);
        attrs.push(1.0);
        attrs.push(cx / self.image_width);
        attrs.push(cy / self.image_height);
        attrs.push(bbox.width() / self.image_width);
        attrs.push(bbox.height() / self.image_height);
        attrs.extend_from_slice(class_vector);
        for (iy, gy) in (gy0..gy1).enumerate() {
            for (ix, gx) in (gx0..gx1).enumerate() {
                let g = detectability * wx[ix] * wy[iy];
                let base = (gy * self.grid_width + gx) * self.channels;
                for (c, a) in attrs.iter().enumerate() {
                    self.data[base + c] += g * a;
                }
            }
        }
    }

    /// Additive Gaussian clutter. Each cell gets objectness noise with std
    /// `objectness_std`, carried as a cell-sized phantom with a uniform class
    /// mix, so clutter pulls pooled attributes towards itself. Every
    /// attribute channel then gets independent noise with std `attribute_std`.
    pub fn add_noise<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        objectness_std: f64,
        attribute_std: f64,
    ) {
        let (cw, ch) = self.cell_size();
        let k = self.num_classes();
        for gy in 0..self.grid_height {
            for gx in 0..self.grid_width {
                let base = (gy * self.grid_width + gx) * self.channels;
                let e = objectness_std * rng.sample::<f64, _>(StandardNormal);
                let phantom = [
                    1.0,
                    (gx as f64 + 0.5) * cw / self.image_width,
                    (gy as f64 + 0.5) * ch / self.image_height,
                    cw / self.image_width,
                    ch / self.image_height,
                ];
                for (c, a) in phantom.iter().enumerate() {
                    self.data[base + c] += e * a;
                }
                for c in GEOMETRY_CHANNELS..self.channels {
                    self.data[base + c] += e / k as f64;
                }
                for c in 1..self.channels {
                    self.data[base + c] += attribute_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }

    pub fn integral(&self) -> IntegralFeatures {
        IntegralFeatures::new(self)
    }
}

/// Summed-area table over a [`FeatureGrid`]. Bilinear interpolation of the
/// table is exact for the piecewise-constant field the grid describes, so
/// boxes need not align with cells.
#[derive(Debug, Clone)]
pub struct IntegralFeatures {
    image_width: f64,
    image_height: f64,
    grid_width: usize,
    grid_height: usize,
    channels: usize,
    /// `(grid_height + 1) x (grid_width + 1) x channels`.
    sat: Vec<f64>,
}

impl IntegralFeatures {
    pub fn new(grid: &FeatureGrid) -> Self {
        let (gw, gh, nc) = (grid.grid_width, grid.grid_height, grid.channels);
        let stride = (gw + 1) * nc;
        let mut sat = vec![0.0; (gh + 1) * stride];
        for gy in 0..gh {
            let mut row = vec![0.0; nc];
            for gx in 0..gw {
                let cell = (gy * gw + gx) * nc;
                for c in 0..nc {
                    row[c] += grid.data[cell + c];
                    let below = gy * stride + (gx + 1) * nc + c;
                    sat[(gy + 1) * stride + (gx + 1) * nc + c] = sat[below] + row[c];
                }
            }
        }
        IntegralFeatures {
            image_width: grid.image_width,
            image_height: grid.image_height,
            grid_width: gw,
            grid_height: gh,
            channels: nc,
            sat,
        }
    }

    pub fn image_size(&self) -> (f64, f64) {
        (self.image_width, self.image_height)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.channels - GEOMETRY_CHANNELS
    }

    /// Length of the pooled vector written by [`roi_pool`](Self::roi_pool).
    pub fn roi_dim(&self) -> usize {
        2 * self.channels
    }

    /// Pool over `bbox` and over its central half: `out[..channels]` is
    /// [`pool_region`](Self::pool_region) of the box, the rest of the box
    /// with half its width and height.
    pub fn roi_pool(&self, bbox: &Bbox, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.roi_dim());
        let (outer, inner) = out.split_at_mut(self.channels);
        self.pool_region(bbox, outer);
        let (cx, cy) = bbox.center();
        let (hw, hh) = (0.25 * bbox.width(), 0.25 * bbox.height());
        let centre = Bbox::new(cx - hw, cy - hh, cx + hw, cy + hh).unwrap_or(*bbox);
        self.pool_region(&centre, inner);
    }

    fn node(&self, gx: usize, gy: usize, c: usize) -> f64 {
        self.sat[(gy * (self.grid_width + 1) + gx) * self.channels + c]
    }

    /// Integral over `[0, u] x [0, v]` in cell units, all channels, added
    /// into `out` with `sign`.
    fn corner(&self, u: f64, v: f64, sign: f64, out: &mut [f64]) {
        let i = (u.floor() as usize).min(self.grid_width - 1);
        let j = (v.floor() as usize).min(self.grid_height - 1);
        let fu = u - i as f64;
        let fv = v - j as f64;
        let w00 = (1.0 - fu) * (1.0 - fv);
        let w10 = fu * (1.0 - fv);
        let w01 = (1.0 - fu) * fv;
        let w11 = fu * fv;
        for (c, o) in out.iter_mut().enumerate() {
            let s = w00 * self.node(i, j, c)
                + w10 * self.node(i + 1, j, c)
                + w01 * self.node(i, j + 1, c)
                + w11 * self.node(i + 1, j + 1, c);
            *o += sign * s;
        }
    }

    /// Pool the grid over `bbox`. `out[0]` is the mean objectness density
    /// over the box; `out[1..]` are the attribute channels divided by the
    /// pooled objectness. Boxes thinner than one cell are widened to one
    /// cell around their centre.
    pub fn pool_region(&self, bbox: &Bbox, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let cw = self.image_width / self.grid_width as f64;
        let ch = self.image_height / self.grid_height as f64;
        let (u0, u1) = cell_span(bbox.x_min() / cw, bbox.x_max() / cw, self.grid_width as f64);
        let (v0, v1) = cell_span(
            bbox.y_min() / ch,
            bbox.y_max() / ch,
            self.grid_height as f64,
        );
        out.iter_mut().for_each(|o| *o = 0.0);
        self.corner(u1, v1, 1.0, out);
        self.corner(u0, v1, -1.0, out);
        self.corner(u1, v0, -1.0, out);
        self.corner(u0, v0, 1.0, out);
        let area = (u1 - u0) * (v1 - v0);
        let mass = out[0];
        let denom = mass.max(POOL_FLOOR * area);
        out[0] = mass / area;
        for o in out[1..].iter_mut() {
            *o = (*o / denom).clamp(RATIO_MIN, RATIO_MAX);
        }
    }
}

/// Clamp an interval to `[0, len]` and widen it to at least one cell.
fn cell_span(a: f64, b: f64, len: f64) -> (f64, f64) {
    let mut a = a.clamp(0.0, len);
    let mut b = b.clamp(0.0, len);
    if b - a < 1.0 {
        let mid = 0.5 * (a + b);
        a = (mid - 0.5).clamp(0.0, len - 1.0);
        b = a + 1.0;
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn grid_with_values() -> FeatureGrid {
        let mut g = FeatureGrid::zeros(40.0, 30.0, 4, 3, 1);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 13) as f64 / 13.0 + 0.1;
        }
        g
    }

    #[test]
    fn cell_aligned_pool_matches_direct_sum() {
        let g = grid_with_values();
        let sat = g.integral();
        // cells x in [1,3), y in [0,2)
        let b = Bbox::new(10.0, 0.0, 30.0, 20.0).unwrap();
        let mut out = vec![0.0; g.channels];
        sat.pool_region(&b, &mut out);
        let mut sums = vec![0.0; g.channels];
        for gy in 0..2 {
            for gx in 1..3 {
                for c in 0..g.channels {
                    sums[c] += g.data[(gy * 4 + gx) * g.channels + c];
                }
            }
        }
        assert!((out[0] - sums[0] / 4.0).abs() < 1e-12);
        for c in 1..g.channels {
            let expect = (sums[c] / sums[0].max(POOL_FLOOR * 4.0)).clamp(RATIO_MIN, RATIO_MAX);
            assert!((out[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fractional_pool_is_area_weighted() {
        let g = grid_with_values();
        let sat = g.integral();
        // x in [0.5, 1.5) cells, y in [0, 1): half of cell 0 and half of cell 1
        let b = Bbox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        let mut out = vec![0.0; g.channels];
        sat.pool_region(&b, &mut out);
        let expect = 0.5 * (g.data[0] + g.data[g.channels]);
        assert!((out[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn splat_recovers_attributes() {
        let mut g = FeatureGrid::zeros(256.0, 256.0, 64, 64, 2);
        // Cell-aligned box, so the pooled cell means integrate the blob exactly.
        let b = Bbox::from_center(100.0, 60.0, 40.0, 24.0).unwrap();
        g.splat(&b, 0.8, 0.5, &[0.0, 1.0]);
        let sat = g.integral();
        let mut out = vec![0.0; g.channels];
        sat.pool_region(&b, &mut out);
        // Peak 0.8 and the box spans +-1 sigma on both axes.
        let one_sigma_mean =
            (std::f64::consts::PI / 2.0).sqrt() * libm::erf(std::f64::consts::FRAC_1_SQRT_2);
        assert!(
            (out[0] - 0.8 * one_sigma_mean.powi(2)).abs() < 1e-9,
            "{}",
            out[0]
        );
        assert!((out[1] - 100.0 / 256.0).abs() < 1e-9);
        assert!((out[2] - 60.0 / 256.0).abs() < 1e-9);
        assert!((out[3] - 40.0 / 256.0).abs() < 1e-9);
        assert!((out[4] - 24.0 / 256.0).abs() < 1e-9);
        assert!(out[5].abs() < 1e-9 && (out[6] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_region_pools_to_zero() {
        let g = FeatureGrid::zeros(64.0, 64.0, 8, 8, 1);
        let mut out = vec![1.0; g.channels];
        g.integral()
            .pool_region(&Bbox::new(3.0, 3.0, 3.0, 3.0).unwrap(), &mut out);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noise_is_seeded() {
        let mut a = FeatureGrid::zeros(64.0, 64.0, 8, 8, 1);
        let mut b = a.clone();
        a.add_noise(&mut seeding::rng(3), 0.1, 0.05);
        b.add_noise(&mut seeding::rng(3), 0.1, 0.05);
        assert_eq!(a, b);
        assert!(a.validate().is_ok());
    }
}
