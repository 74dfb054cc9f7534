//! Experiment drivers behind the commands: toy training, multi-run
//! detection, the size-bucket sweep and the pseudo-label finetuning study.
//!
//! Work is spread over images, seeds and arms with rayon; every result is
//! collected in input order, so outputs do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use stochdet::boxgeom::Bbox;
use stochdet::diffusion::{
    reverse_sample, train, Architecture, DenoiserParams, DiffusionProcess, LossConfig, LossTrace,
    OptimizerConfig, SamplerConfig, Target, ToyDetector, TrainImage,
};
use stochdet::evaluation::{evaluate, EvalConfig, EvalReport, GtBox};
use stochdet::features::IntegralFeatures;
use stochdet::pseudolabel::{
    filter_by_regions, ground_truth_in_regions, make_pseudo_labels, unweighted, PseudoLabel,
    VerifiedRegionSet,
};
use stochdet::simworld::{generate_domain_range, DomainConfig, Scene};
use stochdet::ssl::{finetune, FinetuneConfig};
use stochdet::stats::{paired_t_test, PairedTest};
use stochdet::{
    accumulate, seeding, AccumulatedDetections, DetectionRun, Error, ImageId, NmsConfig, Result,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainingConfig {
    pub domain: DomainConfig,
    pub n_scenes: usize,
    pub hidden: usize,
    pub init_seed: u64,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for ToyTrainingConfig {
    fn default() -> Self {
        ToyTrainingConfig {
            domain: DomainConfig::preset("source").expect("bundled preset"),
            n_scenes: 200,
            hidden: 64,
            init_seed: 0,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedToy {
    pub detector: ToyDetector,
    pub trace: LossTrace,
}

pub fn train_toy(cfg: &ToyTrainingConfig) -> Result<TrainedToy> {
    let scenes = generate_domain_range(&cfg.domain, 0, cfg.n_scenes)?;
    let data: Vec<TrainImage> = scenes.iter().map(TrainImage::from_scene).collect();
    let arch = Architecture::new(cfg.domain.classes.len(), cfg.hidden);
    let params = DenoiserParams::init(arch, cfg.init_seed)?;
    let process = DiffusionProcess::default();
    let (params, trace) = train(params, &data, &process, &cfg.loss, &cfg.optimizer)?;
    let detector = ToyDetector::new(params, process, cfg.domain.class_names())?;
    Ok(TrainedToy { detector, trace })
}

/// Runs `runs` of the sampler on one image. Run `r` uses the seed
/// `run_seed(sampler.seed, image, r)`.
pub fn detect_runs(
    detector: &ToyDetector,
    features: &IntegralFeatures,
    image_id: ImageId,
    sampler: &SamplerConfig,
    runs: std::ops::RangeInclusive<u32>,
) -> Result<Vec<DetectionRun>> {
    runs.map(|r| {
        let cfg = SamplerConfig {
            seed: seeding::run_seed(sampler.seed, image_id.0, r),
            ..*sampler
        };
        reverse_sample(
            features,
            &detector.params,
            &detector.process,
            &cfg,
            image_id,
            r,
        )
    })
    .collect()
}

/// `n` runs per scene, accumulated, in scene order.
pub fn detect_accumulated(
    detector: &ToyDetector,
    scenes: &[Scene],
    sampler: &SamplerConfig,
    n: usize,
    nms: &NmsConfig,
) -> Result<Vec<AccumulatedDetections>> {
    scenes
        .par_iter()
        .map(|s| {
            let runs = detect_runs(
                detector,
                &s.features.integral(),
                s.image_id,
                sampler,
                1..=n as u32,
            )?;
            accumulate(&runs, nms)
        })
        .collect()
}

pub fn ground_truth_map(scenes: &[Scene]) -> BTreeMap<ImageId, Vec<GtBox>> {
    scenes
        .iter()
        .map(|s| (s.image_id, s.ground_truth()))
        .collect()
}

pub fn evaluate_scenes(
    acc: &[AccumulatedDetections],
    scenes: &[Scene],
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let dets = acc
        .iter()
        .map(|a| (a.image_id, a.detections.clone()))
        .collect();
    evaluate(&dets, &ground_truth_map(scenes), eval)
}

/// Scope order used by [`BucketScores`].
pub const SCOPES: [&str; 4] = ["all", "small", "medium", "large"];

/// mAP@[.50:.95] and mAP@.5 per scope, in [`SCOPES`] order. `None` where
/// the scope had nothing to score.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketScores {
    pub map: [Option<f64>; 4],
    pub map50: [Option<f64>; 4],
}

impl BucketScores {
    pub fn from_report(r: &EvalReport) -> Self {
        let mut s = BucketScores::default();
        for (i, scope) in r.scopes().enumerate().take(4) {
            s.map[i] = scope.map;
            s.map50[i] = scope.map50;
        }
        s
    }
}

fn scope_index(name: &str) -> Result<usize> {
    SCOPES.iter().position(|s| *s == name).ok_or_else(|| {
        Error::Config(format!(
            "unknown scope `{name}` (expected one of {SCOPES:?})"
        ))
    })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Runs,
    Boxes,
    FBoxSize,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Runs => "runs",
            SweepAxis::Boxes => "boxes",
            SweepAxis::FBoxSize => "f_box_size",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            SweepAxis::Runs => "accumulator runs (n)",
            SweepAxis::Boxes => "boxes",
            SweepAxis::FBoxSize => "f_box_size",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepColumn {
    pub axis: SweepAxis,
    pub value: f64,
}

impl SweepColumn {
    pub fn label(&self) -> String {
        match self.axis {
            SweepAxis::FBoxSize => format!("{:.2}", self.value),
            _ => format!("{}", self.value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub domain: DomainConfig,
    pub n_seeds: usize,
    pub scenes_per_seed: usize,
    pub seed: u64,
    pub base_boxes: usize,
    pub num_steps: usize,
    pub eta: f64,
    pub runs: Vec<usize>,
    /// Each entry must equal `runs[i] * base_boxes`, so a box budget is
    /// compared against the same number of boxes spread over runs.
    pub boxes: Vec<usize>,
    pub f_box_sizes: Vec<f64>,
    pub nms_iou: f64,
    pub class_agnostic: bool,
    pub max_detections: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            domain: DomainConfig::preset("target").expect("bundled preset"),
            n_seeds: 100,
            scenes_per_seed: 8,
            seed: 0,
            base_boxes: 300,
            num_steps: 10,
            eta: 0.0,
            runs: vec![1, 9, 18],
            boxes: vec![300, 2700, 5400],
            f_box_sizes: vec![1.0, 0.75, 0.5],
            nms_iou: 0.5,
            class_agnostic: false,
            max_detections: 100,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 || self.scenes_per_seed == 0 || self.base_boxes == 0 {
            return Err(Error::Config(
                "sweep needs at least one seed, scene and box".into(),
            ));
        }
        if self.runs.iter().any(|&n| n == 0) {
            return Err(Error::Config("run counts must be >= 1".into()));
        }
        if !self.boxes.is_empty() {
            let matches = self.boxes.len() == self.runs.len()
                && self
                    .boxes
                    .iter()
                    .zip(&self.runs)
                    .all(|(&b, &n)| b == n * self.base_boxes);
            if !matches {
                return Err(Error::Config(format!(
                    "box budgets {:?} must equal runs {:?} times {} boxes",
                    self.boxes, self.runs, self.base_boxes
                )));
            }
        }
        if self.f_box_sizes.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("f_box_size values must be in (0, 1]".into()));
        }
        NmsConfig::new(self.nms_iou, self.class_agnostic)?;
        Ok(())
    }

    pub fn columns(&self) -> Vec<SweepColumn> {
        let col = |axis| move |v: f64| SweepColumn { axis, value: v };
        self.runs
            .iter()
            .map(|&n| col(SweepAxis::Runs)(n as f64))
            .chain(self.boxes.iter().map(|&b| col(SweepAxis::Boxes)(b as f64)))
            .chain(
                self.f_box_sizes
                    .iter()
                    .map(|&f| col(SweepAxis::FBoxSize)(f)),
            )
            .collect()
    }

    fn eval_config(&self, class_names: Vec<String>) -> EvalConfig {
        EvalConfig {
            max_detections: self.max_detections,
            ..EvalConfig::coco(class_names)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub columns: Vec<SweepColumn>,
    /// `per_seed[seed][column]`.
    pub per_seed: Vec<Vec<BucketScores>>,
}

impl SweepResult {
    /// Per-seed mAP@[.50:.95] of one column in one scope.
    pub fn series(&self, axis: SweepAxis, value: f64, scope: &str) -> Result<Vec<Option<f64>>> {
        let s = scope_index(scope)?;
        let c = self
            .columns
            .iter()
            .position(|c| c.axis == axis && (c.value - value).abs() < 1e-9)
            .ok_or_else(|| Error::Config(format!("no sweep column {axis:?} = {value}")))?;
        Ok(self.per_seed.iter().map(|row| row[c].map[s]).collect())
    }

    pub fn mean(&self, axis: SweepAxis, value: f64, scope: &str) -> Result<Option<f64>> {
        Ok(mean_defined(self.series(axis, value, scope)?.into_iter()))
    }

    /// Paired test of column `a` over column `b` on the seeds where both are
    /// defined.
    pub fn compare(&self, axis: SweepAxis, a: f64, b: f64, scope: &str) -> Result<PairedTest> {
        let (xa, xb) = (self.series(axis, a, scope)?, self.series(axis, b, scope)?);
        let (va, vb): (Vec<f64>, Vec<f64>) = xa
            .iter()
            .zip(&xb)
            .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
            .unzip();
        paired_t_test(&va, &vb)
    }

    /// Rows small/medium/large, columns grouped by axis.
    pub fn to_table(&self) -> String {
        let mut groups: Vec<(SweepAxis, Vec<usize>)> = Vec::new();
        for (i, c) in self.columns.iter().enumerate() {
            match groups.last_mut() {
                Some((axis, idx)) if *axis == c.axis => idx.push(i),
                _ => groups.push((c.axis, vec![i])),
            }
        }
        let w = 8;
        let mut head = format!("{:<8}", "");
        let mut sub = format!("{:<8}", "size");
        for (axis, idx) in &groups {
            let span = idx.len() * (w + 1);
            let _ = write!(head, " {:<span$}", axis.title(), span = span - 1);
            for &i in idx {
                let _ = write!(sub, " {:>w$}", self.columns[i].label());
            }
        }
        let mut out = format!("{}\n{}\n", head.trim_end(), sub);
        for scope in &SCOPES[1..] {
            let mut line = format!("{scope:<8}");
            for (axis, idx) in &groups {
                for &i in idx {
                    let m = self
                        .mean(*axis, self.columns[i].value, scope)
                        .ok()
                        .flatten();
                    let _ = write!(line, " {:>w$}", fmt_opt(m));
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,value,scope,mean_map,mean_map50,seeds_defined\n");
        for (ci, c) in self.columns.iter().enumerate() {
            for (si, scope) in SCOPES.iter().enumerate() {
                let maps = self.per_seed.iter().map(|r| r[ci].map[si]);
                let map50 = self.per_seed.iter().map(|r| r[ci].map50[si]);
                let defined = self
                    .per_seed
                    .iter()
                    .filter(|r| r[ci].map[si].is_some())
                    .count();
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    c.axis.key(),
                    c.value,
                    scope,
                    fmt_opt(mean_defined(maps)),
                    fmt_opt(mean_defined(map50)),
                    defined
                );
            }
        }
        s
    }
}

fn sweep_seed(
    detector: &ToyDetector,
    cfg: &SweepConfig,
    columns: &[SweepColumn],
    seed_index: usize,
) -> Result<Vec<BucketScores>> {
    let scenes = generate_domain_range(
        &cfg.domain,
        seed_index * cfg.scenes_per_seed,
        cfg.scenes_per_seed,
    )?;
    let nms = NmsConfig::new(cfg.nms_iou, cfg.class_agnostic)?;
    let eval = cfg.eval_config(detector.class_names.clone());
    let base = SamplerConfig {
        num_boxes: cfg.base_boxes,
        num_steps: cfg.num_steps,
        f_box_size: 1.0,
        eta: cfg.eta,
        seed: seeding::derive(cfg.seed, &[seed_index as u64]),
    };
    let max_runs = cfg.runs.iter().copied().max().unwrap_or(1) as u32;
    // Per scene: all runs at the base setting, then single runs for the other
    // settings. A single run with the base setting and run index 1 is shared.
    let per_scene: Vec<(Vec<DetectionRun>, BTreeMap<(usize, u64), DetectionRun>)> = scenes
        .iter()
        .map(|s| {
            let feats = s.features.integral();
            let runs = detect_runs(detector, &feats, s.image_id, &base, 1..=max_runs)?;
            let mut singles = BTreeMap::new();
            for c in columns {
                let sampler = match c.axis {
                    SweepAxis::Runs => continue,
                    SweepAxis::Boxes => SamplerConfig {
                        num_boxes: c.value as usize,
                        ..base
                    },
                    SweepAxis::FBoxSize => SamplerConfig {
                        f_box_size: c.value,
                        ..base
                    },
                };
                let key = (sampler.num_boxes, sampler.f_box_size.to_bits());
                if key == (base.num_boxes, 1.0f64.to_bits()) || singles.contains_key(&key) {
                    continue;
                }
                let run = detect_runs(detector, &feats, s.image_id, &sampler, 1..=1)?.remove(0);
                singles.insert(key, run);
            }
            Ok((runs, singles))
        })
        .collect::<Result<_>>()?;
    columns
        .iter()
        .map(|c| {
            let acc: Vec<AccumulatedDetections> = per_scene
                .iter()
                .map(|(runs, singles)| match c.axis {
                    SweepAxis::Runs => accumulate(&runs[..c.value as usize], &nms),
                    _ => {
                        let (b, f) = match c.axis {
                            SweepAxis::Boxes => (c.value as usize, 1.0f64),
                            _ => (cfg.base_boxes, c.value),
                        };
                        match singles.get(&(b, f.to_bits())) {
                            Some(run) => accumulate(std::slice::from_ref(run), &nms),
                            None => accumulate(&runs[..1], &nms),
                        }
                    }
                })
                .collect::<Result<_>>()?;
            Ok(BucketScores::from_report(&evaluate_scenes(
                &acc, &scenes, &eval,
            )?))
        })
        .collect()
}

/// Evaluate every column on `n_seeds` disjoint groups of scenes. Group `s`
/// holds scenes `s * k + 1 ..= (s + 1) * k` of the domain and samples with
/// seeds derived from `(seed, s)`, so all columns see the same scenes.
pub fn run_sweep(detector: &ToyDetector, cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let columns = cfg.columns();
    let per_seed = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|s| sweep_seed(detector, cfg, &columns, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { columns, per_seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    SingleRunPseudo,
    AccumulatedPseudo,
    VerifiedPseudo,
    VerifiedGroundTruth,
    WeightedUnverified,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Baseline,
        Arm::SingleRunPseudo,
        Arm::AccumulatedPseudo,
        Arm::VerifiedPseudo,
        Arm::VerifiedGroundTruth,
        Arm::WeightedUnverified,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::SingleRunPseudo => "single-run pseudo",
            Arm::AccumulatedPseudo => "accumulated pseudo",
            Arm::VerifiedPseudo => "verified pseudo",
            Arm::VerifiedGroundTruth => "verified GT",
            Arm::WeightedUnverified => "weighted unverified",
        }
    }
}

/// Model that labels the unlabeled scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Teacher {
    /// The source-trained detector as given.
    Source,
    /// The detector after finetuning on the labeled scenes alone.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub domain: DomainConfig,
    pub n_seeds: usize,
    pub seed: u64,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    pub test_count: usize,
    /// Runs accumulated for pseudo-labels (the single-run arm uses 1).
    pub pseudo_runs: usize,
    /// Runs accumulated when scoring each arm on the test scenes.
    pub eval_runs: usize,
    pub threshold: f64,
    pub containment: f64,
    /// Verified regions extend each correct pseudo-label by this fraction of
    /// its size on every side.
    pub region_margin: f64,
    pub num_boxes: usize,
    pub num_steps: usize,
    pub eta: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub finetune: FinetuneConfig,
    pub teacher: Teacher,
    pub arms: Vec<Arm>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            domain: DomainConfig::preset("target").expect("bundled preset"),
            n_seeds: 5,
            seed: 0,
            labeled_count: 50,
            unlabeled_count: 100,
            test_count: 30,
            pseudo_runs: 18,
            eval_runs: 18,
            threshold: 0.5,
            containment: 1.0,
            region_margin: 0.25,
            num_boxes: 300,
            num_steps: 10,
            eta: 0.0,
            nms_iou: 0.5,
            max_detections: 100,
            finetune: FinetuneConfig {
                optimizer: OptimizerConfig {
                    steps: 300,
                    learning_rate: 1e-3,
                    ..OptimizerConfig::default()
                },
                ..FinetuneConfig::default()
            },
            teacher: Teacher::Baseline,
            arms: Arm::ALL.to_vec(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0
            || self.labeled_count == 0
            || self.test_count == 0
            || self.pseudo_runs == 0
            || self.eval_runs == 0
        {
            return Err(Error::Config(
                "study needs seeds, labeled and test scenes, and runs".into(),
            ));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("study needs at least one arm".into()));
        }
        if !(0.0..1.0).contains(&self.threshold)
            || !(self.containment > 0.0 && self.containment <= 1.0)
            || self.region_margin < 0.0
        {
            return Err(Error::Config(
                "threshold, containment or region margin out of range".into(),
            ));
        }
        NmsConfig::new(self.nms_iou, false)?;
        Ok(())
    }
}

/// Regions an annotator would mark: each pseudo-label that matches a ground
/// truth object of its class at IoU 0.5 or more, grown by `margin` of its
/// size on every side and clipped to the image.
pub fn synthesize_regions(
    labels: &[PseudoLabel],
    scenes: &[Scene],
    margin: f64,
) -> VerifiedRegionSet {
    let by_id: BTreeMap<ImageId, &Scene> = scenes.iter().map(|s| (s.image_id, s)).collect();
    let mut regions: BTreeMap<ImageId, Vec<Bbox>> =
        scenes.iter().map(|s| (s.image_id, Vec::new())).collect();
    for l in labels {
        let Some(scene) = by_id.get(&l.image_id) else {
            continue;
        };
        let correct = scene
            .objects
            .iter()
            .any(|o| o.class_id == l.class_id && o.bbox.iou(&l.bbox) >= 0.5);
        if correct {
            let grow = margin * l.bbox.width().max(l.bbox.height());
            regions
                .get_mut(&l.image_id)
                .expect("scene present")
                .push(l.bbox.expand(grow).clip(scene.width, scene.height));
        }
    }
    VerifiedRegionSet { regions }
}

/// Training images carrying `labels` as targets; images with no label are
/// left out.
pub fn labeled_images(scenes: &[Scene], labels: &[PseudoLabel]) -> Vec<TrainImage> {
    let mut by_id: BTreeMap<ImageId, Vec<Target>> = BTreeMap::new();
    for l in labels {
        by_id.entry(l.image_id).or_default().push(Target {
            bbox: l.bbox,
            class_id: l.class_id,
            weight: l.weight,
        });
    }
    scenes
        .iter()
        .filter_map(|s| {
            by_id.remove(&s.image_id).map(|targets| TrainImage {
                image_id: s.image_id,
                features: s.features.integral(),
                targets,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub pseudo_labels: usize,
    pub scores: BucketScores,
    pub final_probe_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub arms: Vec<Arm>,
    /// `per_seed[seed][arm]`.
    pub per_seed: Vec<Vec<ArmOutcome>>,
}

impl StudyResult {
    pub fn series(&self, arm: Arm, scope: &str) -> Result<Vec<Option<f64>>> {
        let s = scope_index(scope)?;
        let a = self
            .arms
            .iter()
            .position(|x| *x == arm)
            .ok_or_else(|| Error::Config(format!("arm {arm:?} was not run")))?;
        Ok(self
            .per_seed
            .iter()
            .map(|row| row[a].scores.map[s])
            .collect())
    }

    pub fn mean(&self, arm: Arm, scope: &str) -> Result<Option<f64>> {
        Ok(mean_defined(self.series(arm, scope)?.into_iter()))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>8} {:>8} {:>8}\n",
            "arm", "mAP", "small", "mAP@.5"
        );
        for arm in &self.arms {
            let m = |scope| self.mean(*arm, scope).ok().flatten();
            let a = self.arms.iter().position(|x| x == arm).expect("listed");
            let m50 = mean_defined(self.per_seed.iter().map(|r| r[a].scores.map50[0]));
            let _ = writeln!(
                s,
                "{:<22} {:>8} {:>8} {:>8}",
                arm.label(),
                fmt_opt(m("all")),
                fmt_opt(m("small")),
                fmt_opt(m50)
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,arm,pseudo_labels,map,map_small,map50\n");
        for (i, row) in self.per_seed.iter().enumerate() {
            for o in row {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    i,
                    o.arm.label(),
                    o.pseudo_labels,
                    fmt_opt(o.scores.map[0]),
                    fmt_opt(o.scores.map[1]),
                    fmt_opt(o.scores.map50[0])
                );
            }
        }
        s
    }
}

fn study_seed(detector: &ToyDetector, cfg: &StudyConfig, s: usize) -> Result<Vec<ArmOutcome>> {
    let domain = cfg
        .domain
        .clone()
        .with_seed(seeding::derive(cfg.domain.seed, &[s as u64]));
    let labeled_scenes = generate_domain_range(&domain, 0, cfg.labeled_count)?;
    let unlabeled_scenes = if cfg.unlabeled_count > 0 {
        generate_domain_range(&domain, cfg.labeled_count, cfg.unlabeled_count)?
    } else {
        Vec::new()
    };
    let test_scenes = generate_domain_range(
        &domain,
        cfg.labeled_count + cfg.unlabeled_count,
        cfg.test_count,
    )?;
    let nms = NmsConfig::new(cfg.nms_iou, false)?;
    let sampler = |stream: u64| SamplerConfig {
        num_boxes: cfg.num_boxes,
        num_steps: cfg.num_steps,
        f_box_size: 1.0,
        eta: cfg.eta,
        seed: seeding::derive(cfg.seed, &[s as u64, stream]),
    };

    let labeled = labeled_images(
        &labeled_scenes,
        &labeled_scenes
            .iter()
            .flat_map(gt_labels)
            .collect::<Vec<_>>(),
    );
    let mut finetune_cfg = cfg.finetune;
    finetune_cfg.optimizer.seed = seeding::derive(cfg.seed, &[s as u64, 2]);
    let eval_sampler = sampler(3);
    let eval = EvalConfig {
        max_detections: cfg.max_detections,
        ..EvalConfig::coco(detector.class_names.clone())
    };
    let tune = |labels: &[PseudoLabel]| -> Result<(ToyDetector, Option<f64>)> {
        let unlabeled = labeled_images(&unlabeled_scenes, labels);
        let (params, trace) = finetune(
            detector.params.clone(),
            &labeled,
            &unlabeled,
            &detector.process,
            &finetune_cfg,
        )?;
        Ok((
            ToyDetector {
                params,
                ..detector.clone()
            },
            trace.final_probe(),
        ))
    };
    let score = |arm: Arm,
                 tuned: &ToyDetector,
                 pseudo_labels: usize,
                 final_probe_loss|
     -> Result<ArmOutcome> {
        let acc = detect_accumulated(tuned, &test_scenes, &eval_sampler, cfg.eval_runs, &nms)?;
        Ok(ArmOutcome {
            arm,
            pseudo_labels,
            scores: BucketScores::from_report(&evaluate_scenes(&acc, &test_scenes, &eval)?),
            final_probe_loss,
        })
    };

    let baseline = match cfg.teacher {
        Teacher::Baseline => Some(tune(&[])?),
        Teacher::Source => None,
    };
    let teacher = baseline.as_ref().map_or(detector, |(d, _)| d);
    let pseudo_sampler = sampler(1);
    let runs: Vec<Vec<DetectionRun>> = unlabeled_scenes
        .par_iter()
        .map(|sc| {
            detect_runs(
                teacher,
                &sc.features.integral(),
                sc.image_id,
                &pseudo_sampler,
                1..=cfg.pseudo_runs as u32,
            )
        })
        .collect::<Result<_>>()?;
    let mut single = Vec::new();
    let mut accumulated = Vec::new();
    for r in &runs {
        single.extend(make_pseudo_labels(
            &accumulate(&r[..1], &nms)?,
            cfg.threshold,
        )?);
        accumulated.extend(make_pseudo_labels(&accumulate(r, &nms)?, cfg.threshold)?);
    }
    let regions = synthesize_regions(&accumulated, &unlabeled_scenes, cfg.region_margin);

    cfg.arms
        .par_iter()
        .map(|&arm| {
            let labels: Vec<PseudoLabel> = match arm {
                Arm::Baseline => {
                    if let Some((tuned, probe)) = &baseline {
                        return score(arm, tuned, 0, *probe);
                    }
                    Vec::new()
                }
                Arm::SingleRunPseudo => unweighted(&single),
                Arm::AccumulatedPseudo => unweighted(&accumulated),
                Arm::VerifiedPseudo => {
                    unweighted(&filter_by_regions(&accumulated, &regions, cfg.containment)?)
                }
                Arm::VerifiedGroundTruth => ground_truth_in_regions(
                    &ground_truth_map(&unlabeled_scenes),
                    &regions,
                    cfg.containment,
                )?,
                Arm::WeightedUnverified => accumulated.clone(),
            };
            let (tuned, probe) = tune(&labels)?;
            score(arm, &tuned, labels.len(), probe)
        })
        .collect()
}

fn gt_labels(scene: &Scene) -> Vec<PseudoLabel> {
    scene
        .objects
        .iter()
        .map(|o| PseudoLabel {
            image_id: scene.image_id,
            bbox: o.bbox,
            class_id: o.class_id,
            weight: 1.0,
            provenance: stochdet::pseudolabel::Provenance::GroundTruth,
        })
        .collect()
}

/// Finetune the detector once per arm and seed, starting from the same
/// parameters with the same optimizer seed, and score each on held-out
/// target scenes.
pub fn run_study(detector: &ToyDetector, cfg: &StudyConfig) -> Result<StudyResult> {
    cfg.validate()?;
    let per_seed = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|s| study_seed(detector, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult {
        arms: cfg.arms.clone(),
        per_seed,
    })
}
