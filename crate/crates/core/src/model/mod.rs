//! Student network: scores every vocabulary entry with an imitation
//! probability and one logistic score per distilled teacher metric.
//!
//! Layout of the forward pass for one observation:
//!
//! ```text
//! F_env  = tanh-MLP(raster patches) + P      -> n_tokens × d
//! E      = W_e · ego_status + b_e            -> d
//! M_i    = W_2 · tanh(W_1 · traj_i + b_1) + b_2   (shared by all observations)
//! V'_i   = M_i + E
//! A_i    = softmax_j((W_q V'_i)·(W_k F_j) / sqrt(d)) · (W_v F_j)
//! h_i    = tanh(V'_i + A_i)
//! S^im   = softmax_i(w_im · h_i + b_im)
//! S^m_i  = sigmoid(w_m · h_i + b_m)
//! ```

mod checkpoint;
mod layout;
mod linalg;
mod loss;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{pdm_score, TeacherLabels, NUM_METRICS};
use crate::vocab::Vocabulary;
use crate::world::{Observation, EGO_STATUS_DIM};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use layout::{Block, ParamLayout};
pub use loss::{
    distillation_loss, imitation_loss, imitation_target, median_pairwise_distance, ImitationTarget, LOG_EPS,
};
pub use train::{batch_loss, loss_and_gradient, train_step, Adam, AdamConfig, Batch, LossReport, Sample};

use linalg::{axpy, dot, softmax_in_place};

/// How the raster becomes environment tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvEncoder {
    /// One MLP over the whole flattened raster emitting `tokens × d` values.
    Global { tokens: usize },
    /// A shared MLP over non-overlapping `size × size` patches (both
    /// channels), one token per patch plus a learned position embedding.
    Patch { size: usize },
}

/// Which teacher targets the metric heads fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadLayout {
    /// One head per sub-metric, columns (NC, DAC, TTC, C, EP).
    MultiTarget,
    /// A single head fitting the aggregate PDM score.
    PdmOnly,
}

impl HeadLayout {
    pub fn num_heads(self) -> usize {
        match self {
            HeadLayout::MultiTarget => NUM_METRICS,
            HeadLayout::PdmOnly => 1,
        }
    }

    /// Per-entry soft targets for the heads, row-major `k × num_heads`.
    pub fn targets(self, labels: &TeacherLabels) -> Vec<f64> {
        match self {
            HeadLayout::MultiTarget => labels.scores.iter().flat_map(|s| s.to_array()).collect(),
            HeadLayout::PdmOnly => labels.scores.iter().map(pdm_score).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid_size: usize,
    pub horizon_steps: usize,
    pub d_model: usize,
    pub encoder: EnvEncoder,
    pub encoder_hidden: Vec<usize>,
    pub traj_hidden: usize,
    /// Width of the residual feed-forward layer after attention; 0 disables it.
    pub ffn_hidden: usize,
    pub heads: HeadLayout,
    /// Multiplier applied to flattened trajectories before the embedding MLP.
    pub traj_input_scale: f64,
    /// Per-component multipliers for the ego status vector.
    pub ego_input_scale: [f64; EGO_STATUS_DIM],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_size: 32,
            horizon_steps: 40,
            d_model: 64,
            encoder: EnvEncoder::Patch { size: 8 },
            encoder_hidden: vec![64],
            traj_hidden: 64,
            ffn_hidden: 64,
            heads: HeadLayout::MultiTarget,
            traj_input_scale: 0.05,
            ego_input_scale: [0.1, 2.0, 5.0, 1.0],
        }
    }
}

impl ModelConfig {
    pub fn raster_len(&self) -> usize {
        Observation::CHANNELS * self.grid_size * self.grid_size
    }

    pub fn traj_dim(&self) -> usize {
        self.horizon_steps * 3
    }

    pub fn n_tokens(&self) -> usize {
        match self.encoder {
            EnvEncoder::Global { tokens } => tokens,
            EnvEncoder::Patch { size } => (self.grid_size / size.max(1)).pow(2),
        }
    }

    /// Rows the encoder MLP is applied to, with their input and output widths.
    pub(crate) fn encoder_shape(&self) -> (usize, usize, usize) {
        match self.encoder {
            EnvEncoder::Global { tokens } => (1, self.raster_len(), tokens * self.d_model),
            EnvEncoder::Patch { size } => (self.n_tokens(), Observation::CHANNELS * size * size, self.d_model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.horizon_steps == 0 || self.d_model == 0 || self.n_tokens() == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if let EnvEncoder::Patch { size } = self.encoder {
            if size == 0 || self.grid_size % size != 0 {
                return Err(Error::config(format!(
                    "patch size {size} must divide the grid size {}",
                    self.grid_size
                )));
            }
        }
        if self.traj_hidden == 0 || self.encoder_hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        if !(self.traj_input_scale > 0.0) || self.ego_input_scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("input scales must be finite and positive"));
        }
        Ok(())
    }
}

/// Student outputs for one observation over a `k`-entry vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    /// Softmax distribution over entries.
    pub imitation: Vec<f64>,
    /// Row-major `k × num_heads` logistic scores.
    pub metric_scores: Vec<f64>,
    pub heads: HeadLayout,
}

impl PredictionBundle {
    pub fn k(&self) -> usize {
        self.imitation.len()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.num_heads()
    }

    pub fn metric(&self, i: usize, m: usize) -> f64 {
        self.metric_scores[i * self.num_heads() + m]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let h = self.num_heads();
        &self.metric_scores[i * h..(i + 1) * h]
    }

    pub fn is_valid(&self) -> bool {
        let sum: f64 = self.imitation.iter().sum();
        self.metric_scores.len() == self.k() * self.num_heads()
            && (sum - 1.0).abs() < 1e-6
            && self.imitation.iter().all(|p| (0.0..=1.0).contains(p))
            && self.metric_scores.iter().all(|s| *s > 0.0 && *s < 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

impl StudentModel {
    /// Xavier-uniform weights and zero biases from a seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in layout.blocks() {
            if block.is_bias() {
                continue;
            }
            let (rows, cols) = block.shape;
            let limit = (6.0 / (rows + cols) as f64).sqrt() * block.init_gain;
            for p in &mut params[block.range()] {
                *p = rng.gen_range(-limit..=limit);
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        let params = vec![0.0; layout.total()];
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn param(&self, role: &str) -> &[f64] {
        &self.params[self.layout.block(role).range()]
    }

    pub(crate) fn check_inputs(&self, obs: &Observation, vocab: &Vocabulary) -> Result<()> {
        if obs.bev_raster.len() != self.config.raster_len() || obs.grid_size != self.config.grid_size {
            return Err(Error::shape(format!(
                "observation raster {}×{} does not match model grid {}",
                obs.grid_size, obs.grid_size, self.config.grid_size
            )));
        }
        if vocab.horizon_steps() != self.config.horizon_steps {
            return Err(Error::shape(format!(
                "vocabulary horizon {} does not match model horizon {}",
                vocab.horizon_steps(),
                self.config.horizon_steps
            )));
        }
        Ok(())
    }

    /// Per-vocabulary activations shared by every observation.
    pub(crate) fn encode_vocab(&self, vocab: &Vocabulary) -> VocabEncoding {
        let c = &self.config;
        let d = c.d_model;
        let hid = c.traj_hidden;
        let dim = c.traj_dim();
        let k = vocab.len();
        let w1 = self.param("traj.0.w");
        let b1 = self.param("traj.0.b");
        let w2 = self.param("traj.1.w");
        let b2 = self.param("traj.1.b");
        let wq = self.param("attn.q");
        let mut input = vec![0.0; k * dim];
        for (dst, src) in input.iter_mut().zip(vocab.flat()) {
            *dst = src * c.traj_input_scale;
        }
        let mut hidden = vec![0.0; k * hid];
        let mut m = vec![0.0; k * d];
        let mut qm = vec![0.0; k * d];
        for i in 0..k {
            let x = &input[i * dim..(i + 1) * dim];
            let g = &mut hidden[i * hid..(i + 1) * hid];
            for o in 0..hid {
                g[o] = (dot(&w1[o * dim..(o + 1) * dim], x) + b1[o]).tanh();
            }
            let mi = &mut m[i * d..(i + 1) * d];
            for o in 0..d {
                mi[o] = dot(&w2[o * hid..(o + 1) * hid], g) + b2[o];
            }
            let qi = &mut qm[i * d..(i + 1) * d];
            for o in 0..d {
                qi[o] = dot(&wq[o * d..(o + 1) * d], &m[i * d..(i + 1) * d]);
            }
        }
        VocabEncoding {
            k,
            input,
            hidden,
            m,
            qm,
        }
    }

    pub(crate) fn forward_cached(&self, obs: &Observation, venc: &VocabEncoding) -> ForwardCache {
        let c = &self.config;
        let d = c.d_model;
        let t = c.n_tokens();
        let k = venc.k;
        let nh = c.heads.num_heads();

        // Environment encoder.
        let (rows, _, _) = c.encoder_shape();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(c.encoder_hidden.len() + 2);
        acts.push(self.encoder_input(obs));
        for l in 0..self.layout.encoder_layers() {
            let w = self.param(&format!("enc.{l}.w"));
            let b = self.param(&format!("enc.{l}.b"));
            let input = acts.last().unwrap();
            let n_in = input.len() / rows;
            let n_out = b.len();
            let mut out = vec![0.0; rows * n_out];
            for r in 0..rows {
                let x = &input[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    out[r * n_out + o] = (dot(&w[o * n_in..(o + 1) * n_in], x) + b[o]).tanh();
                }
            }
            acts.push(out);
        }
        let mut f_env = acts.last().unwrap().clone();
        if let EnvEncoder::Patch { .. } = c.encoder {
            axpy(1.0, self.param("enc.pos"), &mut f_env);
        }

        let ego_in: Vec<f64> = obs
            .ego_status
            .iter()
            .zip(&c.ego_input_scale)
            .map(|(v, s)| v * s)
            .collect();
        let we = self.param("ego.w");
        let be = self.param("ego.b");
        let e: Vec<f64> = (0..d)
            .map(|o| dot(&we[o * EGO_STATUS_DIM..(o + 1) * EGO_STATUS_DIM], &ego_in) + be[o])
            .collect();

        let wq = self.param("attn.q");
        let wk = self.param("attn.k");
        let wv = self.param("attn.v");
        let q_e: Vec<f64> = (0..d).map(|o| dot(&wq[o * d..(o + 1) * d], &e)).collect();
        let mut keys = vec![0.0; t * d];
        let mut values = vec![0.0; t * d];
        for j in 0..t {
            let fj = &f_env[j * d..(j + 1) * d];
            for o in 0..d {
                keys[j * d + o] = dot(&wk[o * d..(o + 1) * d], fj);
                values[j * d + o] = dot(&wv[o * d..(o + 1) * d], fj);
            }
        }

        let scale = 1.0 / (d as f64).sqrt();
        let w_im = self.param("head.im.w");
        let b_im = self.param("head.im.b")[0];
        let w_m = self.param("head.metric.w");
        let b_m = self.param("head.metric.b");
        let mut attn = vec![0.0; k * t];
        let fh = c.ffn_hidden;
        let mut h = vec![0.0; k * d];
        let mut ffn = vec![0.0; k * fh];
        let mut out = vec![0.0; k * d];
        let ffn_params = (fh > 0).then(|| {
            (
                self.param("ffn.0.w"),
                self.param("ffn.0.b"),
                self.param("ffn.1.w"),
                self.param("ffn.1.b"),
            )
        });
        let mut logit_im = vec![0.0; k];
        let mut metric = vec![0.0; k * nh];
        let mut q = vec![0.0; d];
        let mut u = vec![0.0; d];
        for i in 0..k {
            for o in 0..d {
                q[o] = venc.qm[i * d + o] + q_e[o];
            }
            let a = &mut attn[i * t..(i + 1) * t];
            for j in 0..t {
                a[j] = dot(&q, &keys[j * d..(j + 1) * d]) * scale;
            }
            softmax_in_place(a);
            for o in 0..d {
                u[o] = venc.m[i * d + o] + e[o];
            }
            for j in 0..t {
                let aj = a[j];
                for (uo, vo) in u.iter_mut().zip(&values[j * d..(j + 1) * d]) {
                    *uo += aj * vo;
                }
            }
            let hi = &mut h[i * d..(i + 1) * d];
            for o in 0..d {
                hi[o] = u[o].tanh();
            }
            let oi = &mut out[i * d..(i + 1) * d];
            oi.copy_from_slice(hi);
            if let Some((w1, b1, w2, b2)) = ffn_params {
                let fi = &mut ffn[i * fh..(i + 1) * fh];
                for o in 0..fh {
                    fi[o] = (dot(&w1[o * d..(o + 1) * d], hi) + b1[o]).tanh();
                }
                for o in 0..d {
                    oi[o] += dot(&w2[o * fh..(o + 1) * fh], fi) + b2[o];
                }
            }
            logit_im[i] = dot(w_im, oi) + b_im;
            for m in 0..nh {
                let z = dot(&w_m[m * d..(m + 1) * d], oi) + b_m[m];
                metric[i * nh + m] = sigmoid(z);
            }
        }
        let mut imitation = logit_im.clone();
        softmax_in_place(&mut imitation);
        ForwardCache {
            acts,
            f_env,
            ego_in,
            e,
            q_e,
            keys,
            values,
            attn,
            h,
            ffn,
            out,
            imitation,
            metric,
        }
    }

    /// Encoder input rows: the raster itself, or its patches in row-major
    /// patch order with both channels concatenated.
    fn encoder_input(&self, obs: &Observation) -> Vec<f64> {
        match self.config.encoder {
            EnvEncoder::Global { .. } => obs.bev_raster.clone(),
            EnvEncoder::Patch { size } => {
                let g = obs.grid_size;
                let per = g / size;
                let mut out = Vec::with_capacity(obs.bev_raster.len());
                for pr in 0..per {
                    for pc in 0..per {
                        for ch in 0..Observation::CHANNELS {
                            for r in pr * size..(pr + 1) * size {
                                let start = obs.index(ch, r, pc * size);
                                out.extend_from_slice(&obs.bev_raster[start..start + size]);
                            }
                        }
                    }
                }
                out
            }
        }
    }

    /// Score every vocabulary entry for one observation.
    pub fn forward(&self, obs: &Observation, vocab: &Vocabulary) -> Result<PredictionBundle> {
        self.check_inputs(obs, vocab)?;
        let venc = self.encode_vocab(vocab);
        Ok(self.forward_cached(obs, &venc).into_bundle(self.config.heads))
    }

    /// Forward many observations against one vocabulary encoding.
    pub fn forward_many(&self, observations: &[Observation], vocab: &Vocabulary) -> Result<Vec<PredictionBundle>> {
        use rayon::prelude::*;
        for obs in observations {
            self.check_inputs(obs, vocab)?;
        }
        if observations.is_empty() {
            return Ok(Vec::new());
        }
        let venc = self.encode_vocab(vocab);
        Ok(observations
            .par_iter()
            .map(|o| self.forward_cached(o, &venc).into_bundle(self.config.heads))
            .collect())
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) struct VocabEncoding {
    pub k: usize,
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub m: Vec<f64>,
    pub qm: Vec<f64>,
}

pub(crate) struct ForwardCache {
    /// Encoder activations, `acts[0]` is the (patched) raster.
    pub acts: Vec<Vec<f64>>,
    /// Environment tokens, `n_tokens × d`.
    pub f_env: Vec<f64>,
    pub ego_in: Vec<f64>,
    pub e: Vec<f64>,
    pub q_e: Vec<f64>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub attn: Vec<f64>,
    /// Attention block output, `k × d`.
    pub h: Vec<f64>,
    /// Feed-forward hidden activations, `k × ffn_hidden`.
    pub ffn: Vec<f64>,
    /// Latents the heads read: `h` plus the feed-forward residual.
    pub out: Vec<f64>,
    pub imitation: Vec<f64>,
    pub metric: Vec<f64>,
}

impl ForwardCache {
    fn into_bundle(self, heads: HeadLayout) -> PredictionBundle {
        PredictionBundle {
            imitation: self.imitation,
            metric_scores: self.metric,
            heads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::world::Trajectory;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            grid_size: 16,
            horizon_steps: 6,
            d_model: 8,
            encoder: EnvEncoder::Global { tokens: 3 },
            encoder_hidden: vec![5],
            traj_hidden: 7,
            ffn_hidden: 6,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_vocab(k: usize, h: usize, seed: u64) -> Vocabulary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = (0..k)
            .map(|_| {
                let v: f64 = rng.gen_range(1.0..10.0);
                let w: f64 = rng.gen_range(-0.4..0.4);
                Trajectory {
                    poses: (0..h)
                        .map(|j| {
                            let t = j as f64 * 0.1;
                            Pose::new(v * t, 0.5 * w * v * t * t, w * t)
                        })
                        .collect(),
                    dt: 0.1,
                }
            })
            .collect();
        Vocabulary::new(trajs, 1.0).unwrap()
    }

    pub(crate) fn tiny_obs(g: usize, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Observation {
            grid_size: g,
            cell_size: 2.0,
            bev_raster: (0..2 * g * g).map(|_| rng.gen::<f64>()).collect(),
            ego_status: [rng.gen_range(0.0..10.0), 0.1, -0.05, 0.3],
        }
    }

    #[test]
    fn single_entry_vocab_has_unit_imitation() {
        let model = StudentModel::new(tiny_config(), 1).unwrap();
        let b = model.forward(&tiny_obs(16, 2), &tiny_vocab(1, 6, 3)).unwrap();
        assert_eq!(b.imitation, vec![1.0]);
    }

    #[test]
    fn zero_parameters_give_half_scores() {
        let model = StudentModel::zeros(tiny_config()).unwrap();
        let b = model.forward(&tiny_obs(16, 2), &tiny_vocab(5, 6, 3)).unwrap();
        assert!(b.metric_scores.iter().all(|&s| s == 0.5));
        assert_eq!(b.metric_scores.len(), 5 * NUM_METRICS);
        assert!(b.imitation.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic_and_valid() {
        let model = StudentModel::new(tiny_config(), 4).unwrap();
        let obs = tiny_obs(16, 5);
        let vocab = tiny_vocab(9, 6, 6);
        let a = model.forward(&obs, &vocab).unwrap();
        let b = model.forward(&obs, &vocab).unwrap();
        assert_eq!(a, b);
        assert!(a.is_valid());
        let many = model.forward_many(&[obs.clone(), obs], &vocab).unwrap();
        assert_eq!(many[0], a);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = StudentModel::new(tiny_config(), 4).unwrap();
        assert!(matches!(
            model.forward(&tiny_obs(20, 5), &tiny_vocab(3, 6, 1)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            model.forward(&tiny_obs(16, 5), &tiny_vocab(3, 7, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn permuting_the_vocabulary_permutes_outputs() {
        let model = StudentModel::new(tiny_config(), 8).unwrap();
        let obs = tiny_obs(16, 9);
        let vocab = tiny_vocab(6, 6, 10);
        let perm = [3, 0, 5, 1, 4, 2];
        let a = model.forward(&obs, &vocab).unwrap();
        let b = model.forward(&obs, &vocab.permuted(&perm).unwrap()).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert!((b.imitation[new] - a.imitation[old]).abs() < 1e-12);
            for m in 0..NUM_METRICS {
                assert!((b.metric(new, m) - a.metric(old, m)).abs() < 1e-12);
            }
        }
    }
}
