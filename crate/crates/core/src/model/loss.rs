use serde::{Deserialize, Serialize};

use super::PredictionBundle;
use crate::error::{Error, Result};
use crate::vocab::{flatten, squared_distance, Vocabulary};
use crate::world::Trajectory;

/// Floor applied to every probability before taking a log.
pub const LOG_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationTarget {
    pub y: Vec<f64>,
}

impl ImitationTarget {
    pub fn argmax(&self) -> usize {
        crate::infer::argmax_first(&self.y)
    }
}

/// Median of the flattened pairwise distances between vocabulary entries.
pub fn median_pairwise_distance(vocab: &Vocabulary) -> f64 {
    let k = vocab.len();
    if k < 2 {
        return 1.0;
    }
    let mut d: Vec<f64> = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            d.push(squared_distance(vocab.flat_entry(i), vocab.flat_entry(j)).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Softmax over `-‖expert - T_i‖² / σ²`; the expert must be in the ego frame.
pub fn imitation_target(vocab: &Vocabulary, expert: &Trajectory, sigma: f64) -> Result<ImitationTarget> {
    if expert.len() != vocab.horizon_steps() {
        return Err(Error::shape(format!(
            "expert has {} poses, vocabulary horizon is {}",
            expert.len(),
            vocab.horizon_steps()
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config("imitation temperature must be finite and > 0"));
    }
    let e = flatten(expert, vocab.heading_weight());
    let inv = 1.0 / (sigma * sigma);
    let mut y: Vec<f64> = (0..vocab.len())
        .map(|i| -squared_distance(&e, vocab.flat_entry(i)) * inv)
        .collect();
    super::linalg::softmax_in_place(&mut y);
    Ok(ImitationTarget { y })
}

pub fn imitation_loss(bundle: &PredictionBundle, target: &ImitationTarget) -> f64 {
    debug_assert_eq!(bundle.imitation.len(), target.y.len());
    -bundle
        .imitation
        .iter()
        .zip(&target.y)
        .map(|(p, y)| y * p.clamp(LOG_EPS, 1.0).ln())
        .sum::<f64>()
}

/// Mean soft-label binary cross-entropy over all entries and heads.
/// `targets` is row-major `k × num_heads`, as produced by `HeadLayout::targets`.
pub fn distillation_loss(bundle: &PredictionBundle, targets: &[f64]) -> f64 {
    debug_assert_eq!(bundle.metric_scores.len(), targets.len());
    let n = targets.len();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = bundle
        .metric_scores
        .iter()
        .zip(targets)
        .map(|(s, t)| bce(*s, *t))
        .sum();
    sum / n as f64
}

pub(crate) fn bce(s: f64, t: f64) -> f64 {
    let s = s.clamp(LOG_EPS, 1.0 - LOG_EPS);
    -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
}

/// d bce / d s, zero where the clamp is active.
pub(crate) fn bce_grad(s: f64, t: f64) -> f64 {
    if s < LOG_EPS || s > 1.0 - LOG_EPS {
        0.0
    } else {
        -(t / s) + (1.0 - t) / (1.0 - s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::model::HeadLayout;

    fn straight(v: f64, y0: f64, h: usize) -> Trajectory {
        Trajectory {
            poses: (0..h).map(|j| Pose::new(v * j as f64 * 0.1, y0, 0.0)).collect(),
            dt: 0.1,
        }
    }

    fn bundle(imitation: Vec<f64>, metric_scores: Vec<f64>) -> PredictionBundle {
        PredictionBundle {
            imitation,
            metric_scores,
            heads: HeadLayout::PdmOnly,
        }
    }

    #[test]
    fn target_peaks_on_matching_entry() {
        let vocab = Vocabulary::new(vec![straight(5.0, 0.0, 10), straight(5.0, 30.0, 10), straight(5.0, -30.0, 10)], 1.0).unwrap();
        let y = imitation_target(&vocab, &straight(5.0, 0.0, 10), 1.0).unwrap().y;
        assert!(y[0] > 0.999);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equidistant_entries_split_mass() {
        let vocab = Vocabulary::new(vec![straight(5.0, 1.0, 10), straight(5.0, -1.0, 10), straight(5.0, 50.0, 10)], 1.0).unwrap();
        let y = imitation_target(&vocab, &straight(5.0, 0.0, 10), 0.5).unwrap().y;
        assert!((y[0] - 0.5).abs() < 1e-9 && (y[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn single_entry_target_is_one() {
        let vocab = Vocabulary::new(vec![straight(3.0, 0.0, 4)], 1.0).unwrap();
        let y = imitation_target(&vocab, &straight(9.0, 2.0, 4), 0.1).unwrap().y;
        assert_eq!(y, vec![1.0]);
    }

    #[test]
    fn imitation_loss_examples() {
        let target = ImitationTarget { y: vec![0.2, 0.3, 0.5] };
        let entropy: f64 = -target.y.iter().map(|y| y * y.ln()).sum::<f64>();
        let b = bundle(target.y.clone(), vec![0.5; 3]);
        assert!((imitation_loss(&b, &target) - entropy).abs() < 1e-12);

        let onehot = ImitationTarget { y: vec![0.0, 1.0, 0.0] };
        assert_eq!(imitation_loss(&bundle(vec![0.0, 1.0, 0.0], vec![0.5; 3]), &onehot), 0.0);

        let mut y = vec![0.0; 8];
        y[3] = 1.0;
        let uniform = bundle(vec![0.125; 8], vec![0.5; 8]);
        assert!((imitation_loss(&uniform, &ImitationTarget { y }) - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn distillation_loss_examples() {
        let b = bundle(vec![0.5, 0.5], vec![0.5, 0.5]);
        assert!((distillation_loss(&b, &[1.0, 0.0]) - 2f64.ln()).abs() < 1e-12);
        let b = bundle(vec![0.5, 0.5], vec![1.0 - LOG_EPS, LOG_EPS]);
        assert!(distillation_loss(&b, &[1.0, 0.0]) < 1.1e-6);
    }
}
