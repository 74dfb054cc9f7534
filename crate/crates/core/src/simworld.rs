//! Synthetic scenes with a controllable domain gap.
//!
//! A domain is described by a [`DomainConfig`]: how many objects a scene
//! holds, per-class log-normal size distributions, how visible objects are,
//! and how much clutter noise the scene features carry. Two presets ship
//! with the crate: `source` (few large objects) and `target` (many small,
//! faint objects).

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::boxgeom::{Bbox, SizeBucket, SizeThresholds};
use crate::error::{Error, Result};
use crate::evaluation::GtBox;
use crate::features::FeatureGrid;
use crate::ids::{ClassId, ImageId};
use crate::seeding;

const SOURCE_PRESET: &str = include_str!("../presets/source.toml");
const TARGET_PRESET: &str = include_str!("../presets/target.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    /// Poisson mean before clamping.
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

/// `d = base * s / (s + half_size)` for an object of linear size `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detectability {
    pub base: f64,
    pub half_size: f64,
}

impl Detectability {
    pub fn of(&self, linear_size: f64) -> f64 {
        self.base * linear_size / (linear_size + self.half_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub name: String,
    pub frequency: f64,
    /// Median of `sqrt(w * h)` in pixels.
    pub median_size: f64,
    /// Log-space standard deviation of the linear size.
    pub size_spread: f64,
    /// Median `h / w`.
    pub aspect: f64,
    pub aspect_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub name: String,
    pub seed: u64,
    pub image_width: f64,
    pub image_height: f64,
    /// Feature grid cells per image side.
    pub grid: usize,
    /// Blob sigma as a fraction of the object's width / height.
    pub blob_scale: f64,
    pub feature_noise: f64,
    pub attribute_noise: f64,
    /// Fraction of the class evidence spread uniformly over all classes.
    pub class_confusion: f64,
    pub objects: CountDistribution,
    pub detectability: Detectability,
    pub classes: Vec<ClassProfile>,
}

impl DomainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "source" => Self::from_toml(SOURCE_PRESET),
            "target" => Self::from_toml(TARGET_PRESET),
            other => Err(Error::Config(format!(
                "unknown domain preset '{other}' (expected source or target)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DomainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            context: "domain config".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("domain '{}': {msg}", self.name)));
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return bad("image size must be positive".into());
        }
        if self.grid == 0 {
            return bad("grid must be >= 1".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if !(self.blob_scale > 0.0) || self.feature_noise < 0.0 || self.attribute_noise < 0.0 {
            return bad("blob_scale must be positive and noise levels nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.class_confusion) {
            return bad("class_confusion must be in [0, 1)".into());
        }
        if self.objects.mean < 0.0 || self.objects.min > self.objects.max || self.objects.max == 0 {
            return bad("object count distribution is invalid".into());
        }
        if !(self.detectability.base > 0.0) || self.detectability.half_size < 0.0 {
            return bad("detectability parameters are invalid".into());
        }
        for c in &self.classes {
            if !(c.frequency > 0.0
                && c.median_size > 0.0
                && c.size_spread > 0.0
                && c.aspect > 0.0
                && c.aspect_spread > 0.0)
            {
                return bad(format!(
                    "class '{}' has non-positive distribution parameters",
                    c.name
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: Bbox,
    pub class_id: ClassId,
    pub detectability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: ImageId,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<SceneObject>,
    pub features: FeatureGrid,
}

impl Scene {
    pub fn ground_truth(&self) -> Vec<GtBox> {
        self.objects
            .iter()
            .map(|o| GtBox {
                bbox: o.bbox,
                class_id: o.class_id,
            })
            .collect()
    }
}

fn sample_class<R: Rng + ?Sized>(rng: &mut R, classes: &[ClassProfile]) -> usize {
    let total: f64 = classes.iter().map(|c| c.frequency).sum();
    let mut x = rng.random::<f64>() * total;
    for (i, c) in classes.iter().enumerate() {
        if x < c.frequency {
            return i;
        }
        x -= c.frequency;
    }
    classes.len() - 1
}

fn generate_scene(cfg: &DomainConfig, image_id: ImageId, seed: u64) -> Result<Scene> {
    let mut rng = seeding::rng(seed);
    let count = if cfg.objects.mean > 0.0 {
        let p = Poisson::new(cfg.objects.mean).map_err(|e| Error::Config(e.to_string()))?;
        p.sample(&mut rng) as usize
    } else {
        0
    }
    .clamp(cfg.objects.min, cfg.objects.max);

    let (iw, ih) = (cfg.image_width, cfg.image_height);
    let k = cfg.classes.len();
    let mut grid = FeatureGrid::zeros(iw, ih, cfg.grid, cfg.grid, k);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let ci = sample_class(&mut rng, &cfg.classes);
        let prof = &cfg.classes[ci];
        let size = LogNormal::new(prof.median_size.ln(), prof.size_spread)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng);
        let aspect = LogNormal::new(prof.aspect.ln(), prof.aspect_spread)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng);
        let w = (size / aspect.sqrt()).clamp(2.0, 0.9 * iw);
        let h = (size * aspect.sqrt()).clamp(2.0, 0.9 * ih);
        let x = rng.random::<f64>() * (iw - w);
        let y = rng.random::<f64>() * (ih - h);
        let bbox = Bbox::from_xywh(x, y, w, h)?.clip(iw, ih);
        let detectability = cfg.detectability.of((w * h).sqrt());
        let mut class_vector = vec![cfg.class_confusion / k as f64; k];
        class_vector[ci] += 1.0 - cfg.class_confusion;
        grid.splat(&bbox, detectability, cfg.blob_scale, &class_vector);
        objects.push(SceneObject {
            bbox,
            class_id: ClassId(ci as u32),
            detectability,
        });
    }
    grid.add_noise(&mut rng, cfg.feature_noise, cfg.attribute_noise);
    Ok(Scene {
        image_id,
        width: iw,
        height: ih,
        objects,
        features: grid,
    })
}

/// The scene with id `image_id` (ids start at 1).
pub fn scene(cfg: &DomainConfig, image_id: ImageId) -> Result<Scene> {
    cfg.validate()?;
    if image_id.0 == 0 {
        return Err(Error::Config("scene ids start at 1".into()));
    }
    generate_scene(
        cfg,
        image_id,
        seeding::derive(cfg.seed, &[0x5343454e45, image_id.0]),
    )
}

/// `n_scenes` scenes with image ids `1..=n_scenes`. Scene `i` depends only on
/// `(cfg, i)`.
pub fn generate_domain(cfg: &DomainConfig, n_scenes: usize) -> Result<Vec<Scene>> {
    generate_domain_range(cfg, 0, n_scenes)
}

/// Scenes `first + 1 ..= first + n_scenes` of the domain's infinite stream.
/// Useful for disjoint train / unlabeled / test splits.
pub fn generate_domain_range(
    cfg: &DomainConfig,
    first: usize,
    n_scenes: usize,
) -> Result<Vec<Scene>> {
    cfg.validate()?;
    if n_scenes == 0 {
        return Err(Error::Config("n_scenes must be >= 1".into()));
    }
    (first..first + n_scenes)
        .map(|i| scene(cfg, ImageId((i + 1) as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeHistogram {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
    pub total: usize,
    pub median_area: f64,
    /// Log-spaced area bins from 1 px^2 up to the image area.
    pub bins: Vec<AreaBin>,
}

impl SizeHistogram {
    pub fn count(&self, b: SizeBucket) -> usize {
        match b {
            SizeBucket::Small => self.small,
            SizeBucket::Medium => self.medium,
            SizeBucket::Large => self.large,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("area_lo,area_hi,count\n");
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{}", b.lo, b.hi, b.count);
        }
        s
    }
}

const HIST_BINS: usize = 24;

pub fn size_histogram(scenes: &[Scene], thresholds: &SizeThresholds) -> Result<SizeHistogram> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut areas: Vec<f64> = scenes
        .iter()
        .flat_map(|s| s.objects.iter().map(|o| o.bbox.area()))
        .collect();
    let max_area = scenes
        .iter()
        .map(|s| s.width * s.height)
        .fold(1.0f64, f64::max);
    let (mut small, mut medium, mut large) = (0, 0, 0);
    for &a in &areas {
        match thresholds.bucket_of_area(a) {
            SizeBucket::Small => small += 1,
            SizeBucket::Medium => medium += 1,
            SizeBucket::Large => large += 1,
        }
    }
    let log_max = max_area.ln();
    let mut bins: Vec<AreaBin> = (0..HIST_BINS)
        .map(|i| AreaBin {
            lo: if i == 0 {
                0.0
            } else {
                (log_max * i as f64 / HIST_BINS as f64).exp()
            },
            hi: (log_max * (i + 1) as f64 / HIST_BINS as f64).exp(),
            count: 0,
        })
        .collect();
    for &a in &areas {
        let i = if a <= 1.0 {
            0
        } else {
            ((a.ln() / log_max * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
        };
        bins[i].count += 1;
    }
    areas.sort_by(f64::total_cmp);
    let median_area = match areas.len() {
        0 => 0.0,
        n if n % 2 == 1 => areas[n / 2],
        n => 0.5 * (areas[n / 2 - 1] + areas[n / 2]),
    };
    Ok(SizeHistogram {
        small,
        medium,
        large,
        total: areas.len(),
        median_area,
        bins,
    })
}
