//! Finite-difference gradient checker on a d=8, k=4, G=16 student.

use hydra_plan::geom::Pose;
use hydra_plan::model::{
    batch_loss, imitation_target, loss_and_gradient, EnvEncoder, HeadLayout, ImitationTarget, ModelConfig, Sample, StudentModel,
};
use hydra_plan::vocab::Vocabulary;
use hydra_plan::world::{Observation, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: usize = 10;
const STEP: f64 = 1e-4;

fn random_vocab(rng: &mut ChaCha8Rng, k: usize) -> Vocabulary {
    let trajs = (0..k)
        .map(|_| {
            let v: f64 = rng.gen_range(0.0..12.0);
            let w: f64 = rng.gen_range(-0.5..0.5);
            Trajectory {
                poses: (0..H)
                    .map(|j| {
                        let t = j as f64 * 0.1;
                        let th = w * t;
                        Pose::new(v * t * (0.5 * th).cos(), v * t * (0.5 * th).sin(), th)
                    })
                    .collect(),
                dt: 0.1,
            }
        })
        .collect();
    Vocabulary::new(trajs, 1.0).unwrap()
}

fn random_obs(rng: &mut ChaCha8Rng, g: usize) -> Observation {
    Observation {
        grid_size: g,
        cell_size: 2.5,
        bev_raster: (0..2 * g * g).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen() }).collect(),
        ego_status: [rng.gen_range(0.0..12.0), rng.gen_range(-0.3..0.3), rng.gen_range(-0.1..0.1), rng.gen_range(-1.0..1.0)],
    }
}

/// Central differences over every parameter against the analytic gradient.
pub fn worst_gradient_error(heads: HeadLayout, encoder: EnvEncoder, ffn_hidden: usize, draw: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
    let cfg = ModelConfig {
        grid_size: 16,
        horizon_steps: H,
        d_model: 8,
        encoder,
        encoder_hidden: vec![12],
        traj_hidden: 10,
        ffn_hidden,
        heads,
        ..ModelConfig::default()
    };
    let k = 4;
    let mut model = StudentModel::new(cfg, draw).unwrap();
    // Perturb biases away from zero so every block is exercised.
    for p in model.params.iter_mut() {
        *p += rng.gen_range(-0.05..0.05);
    }
    let vocab = random_vocab(&mut rng, k);
    let obs: Vec<Observation> = (0..2).map(|_| random_obs(&mut rng, 16)).collect();
    let targets: Vec<ImitationTarget> = (0..2)
        .map(|_| imitation_target(&vocab, vocab.get(rng.gen_range(0..k)), 2.0).unwrap())
        .collect();
    let nh = heads.num_heads();
    let head_targets: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..k * nh).map(|_| if rng.gen_bool(0.5) { rng.gen() } else { 1.0 }).collect())
        .collect();
    let batch: Vec<Sample> = (0..2)
        .map(|i| Sample {
            observation: &obs[i],
            target: &targets[i],
            head_targets: &head_targets[i],
        })
        .collect();
    let lambda = 0.7;
    let (_, grad) = loss_and_gradient(&model, &batch, &vocab, lambda).unwrap();
    let mut worst = (0.0f64, String::new());
    for i in 0..model.params.len() {
        let orig = model.params[i];
        model.params[i] = orig + STEP;
        let up = batch_loss(&model, &batch, &vocab, lambda).unwrap().total;
        model.params[i] = orig - STEP;
        let down = batch_loss(&model, &batch, &vocab, lambda).unwrap().total;
        model.params[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grad[i];
        // Relative error with an absolute floor for entries that are
        // numerically zero (below the finite-difference noise level).
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, format!("{} [{i}] analytic {analytic:e} numeric {numeric:e}", model.layout.role_of(i)));
        }
    }
    worst
}

