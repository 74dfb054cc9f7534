use stochdet::boxgeom::Bbox;
use stochdet::diffusion::{
    supervised_loss, supervised_loss_value, Architecture, DenoiserParams, DiffusionProcess,
    LossConfig, Target, TrainImage,
};
use stochdet::ids::{ClassId, ImageId};
use stochdet::seeding;
use stochdet::simworld::{generate_domain, DomainConfig};
use stochdet::ssl::{ssl_loss, ssl_loss_value, SslBatch, WeightGranularity};

const H: f64 = 1e-5;
const MAX_REL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

fn images(n: usize, seed: u64) -> Vec<TrainImage> {
    let mut d = DomainConfig::preset("source").unwrap().with_seed(seed);
    d.grid = 16;
    generate_domain(&d, n)
        .unwrap()
        .iter()
        .map(TrainImage::from_scene)
        .collect()
}

fn small_model() -> (DenoiserParams, DiffusionProcess, LossConfig) {
    let arch = Architecture::new(4, 6);
    (
        DenoiserParams::init(arch, 21).unwrap(),
        DiffusionProcess::default(),
        LossConfig {
            num_proposals: 8,
            ..LossConfig::default()
        },
    )
}

fn max_relative_error(
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    params: &DenoiserParams,
) -> (f64, usize) {
    let mut worst = (0.0, 0);
    let mut v = params.values.clone();
    for i in 0..v.len() {
        let x = v[i];
        v[i] = x + H;
        let up = f(&v);
        v[i] = x - H;
        let down = f(&v);
        v[i] = x;
        let numeric = (up - down) / (2.0 * H);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}

#[test]
fn supervised_gradient_matches_finite_differences() {
    let (params, process, cfg) = small_model();
    let data = images(2, 5);
    let batch: Vec<&TrainImage> = data.iter().collect();
    let lg = supervised_loss(&params, &batch, &process, &cfg, &mut seeding::rng(77)).unwrap();
    let (worst, at) = max_relative_error(
        &lg.grad,
        |v| {
            let p = DenoiserParams {
                arch: params.arch,
                values: v.to_vec(),
            };
            supervised_loss_value(&p, &batch, &process, &cfg, &mut seeding::rng(77)).unwrap()
        },
        &params,
    );
    assert!(
        worst < MAX_REL,
        "relative error {worst:e} at parameter {at}"
    );
}

fn with_confidences(mut img: TrainImage, seed: u64) -> TrainImage {
    let mut rng = seeding::rng(seed);
    for t in &mut img.targets {
        t.weight = 0.5 + 0.5 * rand::Rng::random::<f64>(&mut rng);
    }
    img
}

#[test]
fn ssl_gradient_matches_finite_differences() {
    let (params, process, cfg) = small_model();
    let data = images(2, 6);
    let labeled = [&data[0]];
    let pseudo = with_confidences(data[1].clone(), 3);
    let unlabeled = [&pseudo];
    let batch = SslBatch {
        labeled: &labeled,
        unlabeled: &unlabeled,
    };
    for g in [WeightGranularity::Box, WeightGranularity::Image] {
        let (_, grad) =
            ssl_loss(&params, &batch, &process, &cfg, g, &mut seeding::rng(12)).unwrap();
        let (worst, at) = max_relative_error(
            &grad,
            |v| {
                let p = DenoiserParams {
                    arch: params.arch,
                    values: v.to_vec(),
                };
                ssl_loss_value(&p, &batch, &process, &cfg, g, &mut seeding::rng(12))
                    .unwrap()
                    .total
            },
            &params,
        );
        assert!(
            worst < MAX_REL,
            "{g:?}: relative error {worst:e} at parameter {at}"
        );
    }
}

#[test]
fn hand_built_scene_gradient() {
    let (params, process, cfg) = small_model();
    let mut grid = stochdet::features::FeatureGrid::zeros(64.0, 64.0, 8, 8, 4);
    let targets: Vec<Target> = [(4.0, 4.0, 20.0, 30.0, 0u32), (30.0, 10.0, 60.0, 24.0, 2)]
        .iter()
        .map(|&(a, b, c, d, k)| {
            let bbox = Bbox::new(a, b, c, d).unwrap();
            let mut cv = [0.0; 4];
            cv[k as usize] = 1.0;
            grid.splat(&bbox, 1.0, 0.5, &cv);
            Target {
                bbox,
                class_id: ClassId(k),
                weight: 1.0,
            }
        })
        .collect();
    let img = TrainImage {
        image_id: ImageId(1),
        features: grid.integral(),
        targets,
    };
    let lg = supervised_loss(&params, &[&img], &process, &cfg, &mut seeding::rng(1)).unwrap();
    let (worst, _) = max_relative_error(
        &lg.grad,
        |v| {
            let p = DenoiserParams {
                arch: params.arch,
                values: v.to_vec(),
            };
            supervised_loss_value(&p, &[&img], &process, &cfg, &mut seeding::rng(1)).unwrap()
        },
        &params,
    );
    assert!(worst < MAX_REL, "{worst:e}");
}
