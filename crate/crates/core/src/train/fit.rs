use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Distillation, ExperimentConfig, InferenceMode, SplitData};
use crate::error::{Error, Result};
use crate::infer::{argmax_first, select_index, CostWeights};
use crate::model::{batch_loss, train_step, Adam, Checkpoint, Sample, StudentModel};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// 0 is the untrained model.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_imitation: f64,
    pub train_distillation: f64,
    pub val_pdm: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: usize,
    pub curve: Vec<CurveRow>,
}

impl FitResult {
    pub fn best_val_pdm(&self) -> f64 {
        self.curve[self.best_epoch].val_pdm
    }

    pub fn final_val_pdm(&self) -> f64 {
        self.curve.last().map(|r| r.val_pdm).unwrap_or(0.0)
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_imitation,train_distillation,val_pdm\n");
        for r in &self.curve {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_imitation, r.train_distillation, r.val_pdm
            ));
        }
        out
    }
}

/// Mean teacher PDM (0..1) of the model's selections on a split.
pub fn validation_pdm(
    model: &StudentModel,
    data: &SplitData,
    vocab: &Vocabulary,
    mode: InferenceMode,
    weights: &CostWeights,
) -> Result<f64> {
    let bundles = model.forward_many(&data.observations, vocab)?;
    let total: f64 = bundles
        .iter()
        .zip(&data.labels)
        .map(|(b, l)| {
            let i = match mode {
                InferenceMode::ArgmaxImitation => argmax_first(&b.imitation),
                _ => select_index(b, weights),
            };
            crate::metrics::pdm_score(&l.scores[i])
        })
        .sum();
    Ok(total / data.len().max(1) as f64)
}

/// Train one student. Minibatches are drawn from a per-epoch shuffle seeded
/// by `model_seed`; the checkpoint with the best validation PDM is kept,
/// earliest epoch winning ties.
pub fn fit(cfg: &ExperimentConfig, data: &Dataset, distillation: Distillation, model_seed: u64) -> Result<FitResult> {
    cfg.validate()?;
    let vocab = &data.vocab;
    let vocab_hash = vocab.content_hash();
    let heads = distillation.heads();
    let lambda = cfg.lambda_kd(distillation);
    let mode = distillation.validation_mode();
    let weights = cfg.inference.default_weights;
    let mut model = StudentModel::new(cfg.model_config(distillation), model_seed)?;
    let mut opt = Adam::new(cfg.optim.adam.clone(), model.params.len());
    let head_targets: Vec<Vec<f64>> = data.train.labels.iter().map(|l| heads.targets(l)).collect();
    let n = data.train.len();

    let tag = |ckpt: Checkpoint, epoch: usize| {
        ckpt.with_tag("distillation", distillation.name())
            .with_tag("model_seed", model_seed)
            .with_tag("epoch", epoch)
    };
    let all: Vec<Sample> = (0..n)
        .map(|i| Sample {
            observation: &data.train.observations[i],
            target: &data.train.targets[i],
            head_targets: &head_targets[i],
        })
        .collect();
    let initial = batch_loss(&model, &all, vocab, lambda)?;
    drop(all);
    let mut curve = vec![CurveRow {
        epoch: 0,
        train_loss: initial.total,
        train_imitation: initial.imitation,
        train_distillation: initial.distillation,
        val_pdm: validation_pdm(&model, &data.val, vocab, mode, &weights)?,
    }];
    let mut best = (0usize, curve[0].val_pdm, model.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(model_seed ^ 0x7368_7566_666c_6521);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.optim.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_im, mut sum_kd) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.optim.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| Sample {
                    observation: &data.train.observations[i],
                    target: &data.train.targets[i],
                    head_targets: &head_targets[i],
                })
                .collect();
            let report = train_step(&mut model, &mut opt, &batch, vocab, lambda).map_err(|e| Error::Stage {
                stage: format!("fit {} seed {model_seed} epoch {epoch}", distillation.name()),
                source: Box::new(e),
            })?;
            let w = chunk.len() as f64;
            sum += report.total * w;
            sum_im += report.imitation * w;
            sum_kd += report.distillation * w;
        }
        let val_pdm = validation_pdm(&model, &data.val, vocab, mode, &weights)?;
        curve.push(CurveRow {
            epoch,
            train_loss: sum / n as f64,
            train_imitation: sum_im / n as f64,
            train_distillation: sum_kd / n as f64,
            val_pdm,
        });
        if val_pdm > best.1 {
            best = (epoch, val_pdm, model.clone());
        }
    }
    let last_epoch = cfg.optim.epochs;
    debug_assert!(best.1 >= curve[last_epoch].val_pdm);
    Ok(FitResult {
        best: tag(Checkpoint::new(best.2, vocab_hash.clone()), best.0),
        last: tag(Checkpoint::new(model, vocab_hash), last_epoch),
        best_epoch: best.0,
        curve,
    })
}
