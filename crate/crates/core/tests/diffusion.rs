use stochdet::diffusion::{
    forward_noise, initial_latents, reverse_sample, train, Architecture, BoxLatents,
    DenoiserParams, DiffusionProcess, LossConfig, OptimizerConfig, SamplerConfig, TrainImage,
};
use stochdet::ids::ImageId;
use stochdet::matching::hungarian;
use stochdet::seeding;
use stochdet::simworld::{generate_domain, DomainConfig};

const DRAWS: usize = 10_000;

#[test]
fn forward_noise_moments_within_three_sigma() {
    let process = DiffusionProcess::default();
    let z0 = [0.7, -1.2, 0.1, 1.9];
    let t_max = process.schedule.train_steps();
    for t in [1, t_max / 2, t_max] {
        let clean = BoxLatents {
            t: 0,
            boxes: vec![z0; DRAWS],
        };
        let noisy =
            forward_noise(&clean, t, &process.schedule, &mut seeding::rng(t as u64)).unwrap();
        let ab = process.schedule.alpha_bar(t).unwrap();
        let n = DRAWS as f64;
        for c in 0..4 {
            let xs: Vec<f64> = noisy.boxes.iter().map(|z| z[c]).collect();
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            let want_var = 1.0 - ab;
            let mean_sigma = (want_var / n).sqrt();
            let var_sigma = want_var * (2.0 / (n - 1.0)).sqrt();
            assert!(
                (mean - ab.sqrt() * z0[c]).abs() <= 3.0 * mean_sigma,
                "t={t} c={c} mean {mean}"
            );
            assert!(
                (var - want_var).abs() <= 3.0 * var_sigma,
                "t={t} c={c} var {var}"
            );
        }
    }
}

#[test]
fn noising_to_step_zero_is_identity() {
    let process = DiffusionProcess::default();
    let clean = BoxLatents {
        t: 0,
        boxes: vec![[0.3, -0.4, 1.0, 0.0]],
    };
    let out = forward_noise(&clean, 0, &process.schedule, &mut seeding::rng(0)).unwrap();
    assert_eq!(out.boxes, clean.boxes);
    assert!(forward_noise(&clean, 1001, &process.schedule, &mut seeding::rng(0)).is_err());
}

#[test]
fn half_box_size_quarters_initial_area() {
    let process = DiffusionProcess::default();
    let codec = process.codec;
    let areas = |f: f64| {
        let cfg = SamplerConfig {
            num_boxes: DRAWS,
            f_box_size: f,
            seed: 9,
            ..SamplerConfig::default()
        };
        let boxes = initial_latents(&cfg, &process);
        let unclipped = boxes
            .iter()
            .map(|z| codec.to_unit(z[2]) * codec.to_unit(z[3]) * 512.0 * 512.0)
            .sum::<f64>();
        let clipped = boxes
            .iter()
            .map(|z| codec.decode(z, 512.0, 512.0).area())
            .sum::<f64>();
        (unclipped / DRAWS as f64, clipped / DRAWS as f64)
    };
    let (half, full) = (areas(0.5), areas(1.0));
    let ratio = half.0 / full.0;
    assert!((ratio - 0.25).abs() < 0.01, "area ratio {ratio}");
    // Clipping to the image trims large boxes more, so the clipped ratio sits above a quarter.
    let clipped = half.1 / full.1;
    assert!(
        (0.25..0.3).contains(&clipped),
        "clipped area ratio {clipped}"
    );
}

fn trained_on_tiny_set() -> (
    DenoiserParams,
    DiffusionProcess,
    Vec<stochdet::simworld::Scene>,
) {
    let mut domain = DomainConfig::preset("source").unwrap();
    domain.grid = 16;
    let scenes = generate_domain(&domain, 4).unwrap();
    let data: Vec<TrainImage> = scenes.iter().map(TrainImage::from_scene).collect();
    let process = DiffusionProcess::default();
    let params = DenoiserParams::init(Architecture::new(4, 16), 1).unwrap();
    let opt = OptimizerConfig {
        steps: 20,
        batch_size: 4,
        ..OptimizerConfig::default()
    };
    let cfg = LossConfig {
        num_proposals: 16,
        ..LossConfig::default()
    };
    let (p, _) = train(params, &data, &process, &cfg, &opt).unwrap();
    (p, process, scenes)
}

/// Disagreement of two runs: mean `1 - IoU` over an optimal one-to-one
/// matching of their boxes.
#[test]
fn distinct_seeds_give_distinct_runs() {
    let (params, process, scenes) = trained_on_tiny_set();
    let feats = scenes[0].features.integral();
    let mut disagreement = 0.0;
    for pair in 0..100u64 {
        let run = |seed| {
            let cfg = SamplerConfig {
                num_boxes: 20,
                seed,
                ..SamplerConfig::default()
            };
            reverse_sample(&feats, &params, &process, &cfg, ImageId(1), 1).unwrap()
        };
        let (a, b) = (run(2 * pair), run(2 * pair + 1));
        assert_ne!(a.detections, b.detections, "pair {pair}");
        let n = a.detections.len();
        let cost: Vec<f64> = a
            .detections
            .iter()
            .flat_map(|x| b.detections.iter().map(move |y| 1.0 - x.bbox.iou(&y.bbox)))
            .collect();
        let m = hungarian(&cost, n, n);
        let total: f64 = m
            .iter()
            .enumerate()
            .map(|(i, j)| cost[i * n + j.unwrap()])
            .sum();
        disagreement += total / n as f64;
    }
    assert!(disagreement / 100.0 > 0.0);
}

#[test]
fn zero_steps_and_zero_rate_leave_params_unchanged() {
    let mut domain = DomainConfig::preset("source").unwrap();
    domain.grid = 16;
    let data: Vec<TrainImage> = generate_domain(&domain, 3)
        .unwrap()
        .iter()
        .map(TrainImage::from_scene)
        .collect();
    let process = DiffusionProcess::default();
    let params = DenoiserParams::init(Architecture::new(4, 8), 4).unwrap();
    let cfg = LossConfig {
        num_proposals: 8,
        ..LossConfig::default()
    };

    let none = OptimizerConfig {
        steps: 0,
        ..OptimizerConfig::default()
    };
    assert_eq!(
        train(params.clone(), &data, &process, &cfg, &none)
            .unwrap()
            .0,
        params
    );

    let frozen = OptimizerConfig {
        steps: 6,
        learning_rate: 0.0,
        probe_every: 1,
        ..OptimizerConfig::default()
    };
    let (p, trace) = train(params.clone(), &data, &process, &cfg, &frozen).unwrap();
    assert_eq!(p, params);
    let probes = trace.probes();
    assert_eq!(probes.len(), 7);
    assert!(probes.iter().all(|(_, v)| *v == probes[0].1));
}

#[test]
fn training_is_seed_deterministic() {
    let (a, _, _) = trained_on_tiny_set();
    let (b, _, _) = trained_on_tiny_set();
    assert_eq!(a, b);
}
