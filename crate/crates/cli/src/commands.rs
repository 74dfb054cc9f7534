use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use stochdet::dataio::{AnnotationFile, DetectionFile, Metadata, RunManifest, SceneFile};
use stochdet::diffusion::{LossConfig, OptimizerConfig, OptimizerKind, SamplerConfig, ToyDetector};
use stochdet::evaluation::{evaluate, EvalConfig, EvalReport};
use stochdet::pseudolabel::{
    filter_by_regions, ground_truth_in_regions, make_pseudo_labels, unweighted, VerifiedRegionSet,
};
use stochdet::simworld::{generate_domain_range, size_histogram, DomainConfig};
use stochdet::ssl::{FinetuneConfig, WeightGranularity};
use stochdet::{accumulate, AccumulatedDetections, Error, NmsConfig, Result, SizeThresholds};

use crate::experiments::{
    self, Arm, StudyConfig, SweepAxis, SweepConfig, Teacher, ToyTrainingConfig,
};
use crate::{
    metadata, to_json_pretty, write_file, AccumulateArgs, Cli, Command, DetectArgs, DomainArgs,
    EvalArgs, FinetuneArgs, Format, GlobalArgs, Granularity, MapVariant, Optimizer,
    PseudolabelArgs, SimulateArgs, SweepArgs, TeacherArg, TrainToyArgs,
};

/// Key added to accumulated detection records carrying the run count.
pub const N_RUNS_KEY: &str = "n_runs";

struct Ctx<'a> {
    global: &'a GlobalArgs,
}

impl Ctx<'_> {
    fn out(&self) -> &Path {
        &self.global.out_dir
    }

    fn info(&self, msg: impl AsRef<str>) {
        if self.global.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = write_file(self.out(), name, contents)?;
        self.info(format!("wrote {}", p.display()));
        Ok(())
    }

    fn finish(&self, meta: &Metadata, text: &str, json: &Value) -> Result<()> {
        self.write("metadata.json", &to_json_pretty(meta)?)?;
        if !self.global.quiet {
            match self.global.format {
                Format::Text => print!("{text}"),
                Format::Json => println!("{}", to_json_pretty(json)?),
            }
        }
        Ok(())
    }
}

/// Run one parsed command line inside a pool of `--jobs` threads.
pub fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.global.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let ctx = Ctx {
        global: &cli.global,
    };
    pool.install(|| match &cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::TrainToy(a) => train_toy(&ctx, a),
        Command::Detect(a) => detect(&ctx, a),
        Command::Accumulate(a) => accumulate_cmd(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Pseudolabel(a) => pseudolabel(&ctx, a),
        Command::Finetune(a) => finetune(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
    })
}

fn load_domain(preset: &str, file: Option<&Path>) -> Result<DomainConfig> {
    match file {
        Some(p) => DomainConfig::from_toml(&std::fs::read_to_string(p)?),
        None => DomainConfig::preset(preset),
    }
}

fn domain_of(a: &DomainArgs) -> Result<DomainConfig> {
    load_domain(&a.domain, a.domain_config.as_deref())
}

#[derive(Serialize)]
struct Resolved<'a, A, C> {
    args: &'a A,
    resolved: C,
}

fn simulate(ctx: &Ctx, a: &SimulateArgs) -> Result<()> {
    let mut domain = domain_of(&a.domain)?;
    if let Some(s) = ctx.global.seed {
        domain = domain.with_seed(s);
    }
    let scenes = generate_domain_range(&domain, a.first, a.count)?;
    let names = domain.class_names();
    ctx.write(
        "scenes.json",
        &SceneFile::new(&domain, &scenes, a.embed_features).to_json()?,
    )?;
    ctx.write(
        "annotations.json",
        &AnnotationFile::from_scenes(&scenes, &names).to_json()?,
    )?;
    let hist = size_histogram(&scenes, &SizeThresholds::default())?;
    ctx.write("size_histogram.csv", &hist.to_csv())?;

    let counts: BTreeMap<&str, usize> = stochdet::SizeBucket::ALL
        .iter()
        .map(|b| (b.name(), hist.count(*b)))
        .collect();
    let total: usize = counts.values().sum();
    let mut text = format!(
        "{} scenes from domain '{}', {} objects\n",
        scenes.len(),
        domain.name,
        total
    );
    for (name, c) in &counts {
        let _ = writeln!(
            text,
            "{name:<8} {c:>7} {:>6.1}%",
            100.0 * *c as f64 / total.max(1) as f64
        );
    }
    let meta = metadata(
        "simulate",
        domain.seed,
        &Resolved {
            args: a,
            resolved: &domain,
        },
    )?;
    ctx.finish(
        &meta,
        &text,
        &json!({ "scenes": scenes.len(), "objects": total, "buckets": counts }),
    )
}

fn train_toy(ctx: &Ctx, a: &TrainToyArgs) -> Result<()> {
    let seed = ctx.global.seed.unwrap_or(0);
    let defaults = OptimizerConfig::default();
    let cfg = ToyTrainingConfig {
        domain: domain_of(&a.domain)?,
        n_scenes: a.scenes,
        hidden: a.hidden,
        init_seed: seed,
        loss: LossConfig {
            num_proposals: a.proposals.unwrap_or(LossConfig::default().num_proposals),
            ..LossConfig::default()
        },
        optimizer: OptimizerConfig {
            kind: match a.optimizer {
                Some(Optimizer::Sgd) => OptimizerKind::Sgd,
                _ => OptimizerKind::Adam,
            },
            learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
            steps: a.steps.unwrap_or(defaults.steps),
            batch_size: a.batch_size.unwrap_or(defaults.batch_size),
            seed,
            ..defaults
        },
    };
    let trained = experiments::train_toy(&cfg)?;
    ctx.write("checkpoint.json", &trained.detector.to_json()?)?;
    ctx.write("loss_trace.csv", &trained.trace.to_csv())?;
    let (first, last) = (trained.trace.initial_probe(), trained.trace.final_probe());
    let ratio = first.zip(last).map(|(f, l)| l / f);
    let text = format!(
        "probe loss {} -> {} (ratio {})\n",
        fmt(first),
        fmt(last),
        fmt(ratio)
    );
    let meta = metadata(
        "train-toy",
        seed,
        &Resolved {
            args: a,
            resolved: &cfg,
        },
    )?;
    ctx.finish(
        &meta,
        &text,
        &json!({ "initial_probe": first, "final_probe": last, "ratio": ratio }),
    )
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

fn detect(ctx: &Ctx, a: &DetectArgs) -> Result<()> {
    let seed = ctx.global.seed.unwrap_or(0);
    if a.runs == 0 {
        return Err(Error::Config("--runs must be >= 1".into()));
    }
    let detector = ToyDetector::load(&a.checkpoint)?;
    let scenes = SceneFile::load(&a.scenes)?.scenes()?;
    let sampler = SamplerConfig {
        num_boxes: a.boxes,
        num_steps: a.steps,
        f_box_size: a.f_box_size,
        eta: a.eta,
        seed,
    };
    sampler.validate()?;
    use rayon::prelude::*;
    let runs: Vec<_> = scenes
        .par_iter()
        .map(|s| {
            experiments::detect_runs(
                &detector,
                &s.features.integral(),
                s.image_id,
                &sampler,
                1..=a.runs as u32,
            )
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    ctx.write(
        "detections.json",
        &DetectionFile::from_runs(&runs).to_json()?,
    )?;
    let meta = metadata(
        "detect",
        seed,
        &Resolved {
            args: a,
            resolved: &sampler,
        },
    )?;
    let manifest = RunManifest {
        checkpoint: a.checkpoint.display().to_string(),
        n_runs: a.runs,
        seeds: vec![seed; a.runs],
        sampler,
        metadata: meta.clone(),
        extra: Default::default(),
    };
    ctx.write("manifest.json", &manifest.to_json()?)?;
    let n_dets: usize = runs.iter().map(|r| r.detections.len()).sum();
    let text = format!(
        "{} images x {} runs, {} detections\n",
        scenes.len(),
        a.runs,
        n_dets
    );
    ctx.finish(
        &meta,
        &text,
        &json!({ "images": scenes.len(), "runs": a.runs, "detections": n_dets }),
    )
}

/// Accumulate every image of a multi-run file, optionally keeping only the
/// first `max_runs` runs.
pub fn accumulate_file(
    file: &DetectionFile,
    nms: &NmsConfig,
    max_runs: Option<usize>,
) -> Result<Vec<AccumulatedDetections>> {
    use rayon::prelude::*;
    let per_image: Vec<_> = file.runs()?.into_iter().collect();
    per_image
        .par_iter()
        .map(|(_, runs)| {
            let runs = match max_runs {
                Some(n) => &runs[..n.min(runs.len())],
                None => &runs[..],
            };
            accumulate(runs, nms)
        })
        .collect()
}

fn accumulate_cmd(ctx: &Ctx, a: &AccumulateArgs) -> Result<()> {
    if a.max_runs == Some(0) {
        return Err(Error::Config("--max-runs must be >= 1".into()));
    }
    let nms = NmsConfig::new(a.iou_thr, a.class_agnostic)?;
    let file = DetectionFile::load(&a.runs_file)?;
    let acc = accumulate_file(&file, &nms, a.max_runs)?;
    let mut out = DetectionFile::from_accumulated(&acc);
    let n_runs: BTreeMap<_, _> = acc.iter().map(|x| (x.image_id, x.n_runs)).collect();
    for r in &mut out.records {
        r.extra
            .insert(N_RUNS_KEY.into(), json!(n_runs[&r.image_id]));
    }
    ctx.write("accumulated.json", &out.to_json()?)?;
    let text = format!(
        "{} images, {} detections in, {} kept\n",
        acc.len(),
        file.records.len(),
        out.records.len()
    );
    let meta = metadata("accumulate", 0, a)?;
    ctx.finish(
        &meta,
        &text,
        &json!({ "images": acc.len(), "input": file.records.len(), "kept": out.records.len() }),
    )
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let ann = AnnotationFile::load(&a.annotations)?;
    let gts = ann.ground_truth()?;
    let mut dets = DetectionFile::load(&a.detections)?.by_image()?;
    for id in gts.keys() {
        dets.entry(*id).or_default();
    }
    let cfg = EvalConfig {
        max_detections: a.max_detections,
        ..EvalConfig::coco(ann.class_names()?)
    };
    let report = evaluate(&dets, &gts, &cfg)?;
    let scopes: Vec<String> = a.buckets.iter().map(|b| b.trim().to_lowercase()).collect();
    for s in &scopes {
        if !experiments::SCOPES.contains(&s.as_str()) {
            return Err(Error::Config(format!(
                "unknown bucket '{s}' (expected all, small, medium or large)"
            )));
        }
    }
    ctx.write("report.json", &to_json_pretty(&report)?)?;
    ctx.write("report.txt", &report.to_text())?;
    ctx.write("pr.csv", &report.pr_csv())?;
    let headline = |r: &EvalReport, scope: &str| {
        r.scopes()
            .find(|s| s.scope == scope)
            .and_then(|s| match a.map_variant {
                MapVariant::Coco => s.map,
                MapVariant::Map50 => s.map50,
            })
    };
    let label = match a.map_variant {
        MapVariant::Coco => "mAP@[.50:.95]",
        MapVariant::Map50 => "mAP@.50",
    };
    let mut text = format!("{:<8} {:>14}\n", "scope", label);
    let mut values = serde_json::Map::new();
    for s in &scopes {
        let v = headline(&report, s);
        let _ = writeln!(
            text,
            "{s:<8} {:>14}",
            v.map_or("-".into(), |x| format!("{x:.4}"))
        );
        values.insert(s.clone(), json!(v));
    }
    let meta = metadata("eval", 0, a)?;
    ctx.finish(
        &meta,
        &text,
        &json!({ "variant": a.map_variant, "map": values }),
    )
}

fn pseudolabel(ctx: &Ctx, a: &PseudolabelArgs) -> Result<()> {
    let scene_file = SceneFile::load(&a.scenes)?;
    let names = scene_file.domain.class_names();
    let (w, h) = (
        scene_file.domain.image_width,
        scene_file.domain.image_height,
    );
    let images: Vec<_> = scene_file
        .scenes
        .iter()
        .map(|s| (s.image_id, w, h))
        .collect();
    let sizes: BTreeMap<_, _> = images.iter().map(|&(id, w, h)| (id, (w, h))).collect();

    let file = DetectionFile::load(&a.detections)?;
    let mut n_runs: BTreeMap<_, usize> = BTreeMap::new();
    for r in &file.records {
        let n = r.extra.get(N_RUNS_KEY).and_then(Value::as_u64).unwrap_or(1) as usize;
        n_runs.insert(r.image_id, n);
    }
    let mut labels = Vec::new();
    for (image_id, detections) in file.by_image()? {
        if !sizes.contains_key(&image_id) {
            return Err(Error::MismatchedImageIds(format!(
                "image {image_id} is not in the scene file"
            )));
        }
        let acc = AccumulatedDetections {
            image_id,
            n_runs: n_runs[&image_id],
            detections,
        };
        labels.extend(make_pseudo_labels(&acc, a.threshold)?);
    }
    if let Some(path) = &a.regions {
        let regions: VerifiedRegionSet = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Parse {
                context: path.display().to_string(),
                message: e.to_string(),
            })?;
        regions.validate(&sizes)?;
        labels = match &a.ground_truth {
            Some(gt) => ground_truth_in_regions(
                &AnnotationFile::load(gt)?.ground_truth()?,
                &regions,
                a.containment,
            )?,
            None => unweighted(&filter_by_regions(&labels, &regions, a.containment)?),
        };
    }
    if a.unweighted {
        labels = unweighted(&labels);
    }
    ctx.write(
        "pseudolabels.json",
        &AnnotationFile::from_pseudo_labels(&images, &labels, &names).to_json()?,
    )?;
    let mass: f64 = labels.iter().map(|l| l.weight).sum();
    let text = format!("{} pseudo-labels, total weight {:.4}\n", labels.len(), mass);
    let meta = metadata("pseudolabel", 0, a)?;
    ctx.finish(
        &meta,
        &text,
        &json!({ "labels": labels.len(), "weight_sum": mass }),
    )
}

fn parse_arm(s: &str) -> Result<Arm> {
    serde_json::from_value(json!(s.trim().replace('-', "_"))).map_err(|_| {
        Error::Config(format!(
            "unknown arm '{s}' (expected baseline, single_run_pseudo, accumulated_pseudo, verified_pseudo, verified_ground_truth or weighted_unverified)"
        ))
    })
}

fn finetune(ctx: &Ctx, a: &FinetuneArgs) -> Result<()> {
    let seed = ctx.global.seed.unwrap_or(0);
    let detector = ToyDetector::load(&a.checkpoint)?;
    let defaults = StudyConfig::default();
    let mut ft: FinetuneConfig = defaults.finetune;
    ft.granularity = match a.weight_granularity {
        Granularity::Box => WeightGranularity::Box,
        Granularity::Image => WeightGranularity::Image,
    };
    if let Some(s) = a.steps {
        ft.optimizer.steps = s;
    }
    if let Some(lr) = a.learning_rate {
        ft.optimizer.learning_rate = lr;
    }
    let arms = if a.arms.is_empty() {
        Arm::ALL.to_vec()
    } else {
        a.arms.iter().map(|s| parse_arm(s)).collect::<Result<_>>()?
    };
    let cfg = StudyConfig {
        domain: load_domain(&a.domain, a.domain_config.as_deref())?,
        n_seeds: a.seeds,
        seed,
        labeled_count: a.labeled_count,
        unlabeled_count: a.unlabeled_count,
        test_count: a.test_count,
        pseudo_runs: a.pseudo_runs,
        eval_runs: a.eval_runs,
        threshold: a.threshold,
        finetune: ft,
        teacher: match a.teacher {
            TeacherArg::Source => Teacher::Source,
            TeacherArg::Baseline => Teacher::Baseline,
        },
        arms,
        ..defaults
    };
    let result = experiments::run_study(&detector, &cfg)?;
    let table = result.to_table();
    ctx.write("study.json", &to_json_pretty(&result)?)?;
    ctx.write("study.csv", &result.to_csv())?;
    ctx.write("study.txt", &table)?;
    let meta = metadata(
        "finetune",
        seed,
        &Resolved {
            args: a,
            resolved: &cfg,
        },
    )?;
    ctx.finish(
        &meta,
        &table,
        &serde_json::to_value(&result).map_err(|e| Error::Config(e.to_string()))?,
    )
}

fn sweep(ctx: &Ctx, a: &SweepArgs) -> Result<()> {
    let seed = ctx.global.seed.unwrap_or(0);
    let detector = ToyDetector::load(&a.checkpoint)?;
    let cfg = SweepConfig {
        domain: load_domain(&a.domain, a.domain_config.as_deref())?,
        n_seeds: a.seeds,
        scenes_per_seed: a.scenes_per_seed,
        seed,
        base_boxes: a.base_boxes,
        num_steps: a.steps,
        eta: a.eta,
        runs: a.runs.clone(),
        boxes: a.boxes.clone(),
        f_box_sizes: a.f_box_sizes.clone(),
        nms_iou: a.iou_thr,
        ..SweepConfig::default()
    };
    let result = experiments::run_sweep(&detector, &cfg)?;
    let mut table = result.to_table();
    let tests = sweep_tests(&result, &cfg);
    if !tests.is_empty() {
        table.push('\n');
        for t in &tests {
            let _ = writeln!(
                table,
                "{:<8} {:?} {} vs {}: mean diff {:+.4}, p = {:.3e}",
                t.scope, t.axis, t.a, t.b, t.mean_diff, t.p_greater
            );
        }
    }
    ctx.write(
        "sweep.json",
        &to_json_pretty(&json!({ "result": result, "tests": tests }))?,
    )?;
    ctx.write("sweep.csv", &result.to_csv())?;
    ctx.write("sweep.txt", &table)?;
    let meta = metadata(
        "sweep",
        seed,
        &Resolved {
            args: a,
            resolved: &cfg,
        },
    )?;
    ctx.finish(&meta, &table, &json!({ "result": result, "tests": tests }))
}

#[derive(Serialize)]
struct SweepTest {
    scope: &'static str,
    axis: SweepAxis,
    a: f64,
    b: f64,
    mean_diff: f64,
    p_greater: f64,
}

/// For each axis, the last setting against the first, per scope.
fn sweep_tests(result: &experiments::SweepResult, cfg: &SweepConfig) -> Vec<SweepTest> {
    let axes: [(SweepAxis, Vec<f64>); 3] = [
        (
            SweepAxis::Runs,
            cfg.runs.iter().map(|&n| n as f64).collect(),
        ),
        (
            SweepAxis::Boxes,
            cfg.boxes.iter().map(|&b| b as f64).collect(),
        ),
        (SweepAxis::FBoxSize, cfg.f_box_sizes.clone()),
    ];
    let mut out = Vec::new();
    for (axis, values) in axes {
        let (Some(&first), Some(&last)) = (values.first(), values.last()) else {
            continue;
        };
        if values.len() < 2 {
            continue;
        }
        for scope in experiments::SCOPES {
            if let Ok(t) = result.compare(axis, last, first, scope) {
                out.push(SweepTest {
                    scope,
                    axis,
                    a: last,
                    b: first,
                    mean_diff: t.mean_diff,
                    p_greater: t.p_greater,
                });
            }
        }
    }
    out
}
