use serde::{Deserialize, Serialize};

use super::linalg::{axpy, dot, matvec_t_acc, outer_acc};
use super::loss::{bce, bce_grad, ImitationTarget, LOG_EPS};
use super::{EnvEncoder, ForwardCache, StudentModel, VocabEncoding};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;
use crate::world::{Observation, EGO_STATUS_DIM};

/// One training example: an observation with its imitation target and the
/// per-head soft targets (row-major `k × num_heads`).
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub observation: &'a Observation,
    pub target: &'a ImitationTarget,
    pub head_targets: &'a [f64],
}

pub type Batch<'a> = [Sample<'a>];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub imitation: f64,
    pub distillation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = &self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
    }
}

fn check_batch(model: &StudentModel, batch: &Batch, vocab: &Vocabulary) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let k = vocab.len();
    let nh = model.config.heads.num_heads();
    for s in batch {
        model.check_inputs(s.observation, vocab)?;
        if s.target.y.len() != k || s.head_targets.len() != k * nh {
            return Err(Error::shape(format!(
                "batch targets sized {}/{} for k={k} with {nh} heads",
                s.target.y.len(),
                s.head_targets.len()
            )));
        }
    }
    Ok(())
}

/// Mean of `L_im + λ_kd · L_kd` over the batch, without gradients.
pub fn batch_loss(model: &StudentModel, batch: &Batch, vocab: &Vocabulary, lambda_kd: f64) -> Result<LossReport> {
    check_batch(model, batch, vocab)?;
    let venc = model.encode_vocab(vocab);
    let mut report = LossReport::default();
    for s in batch {
        let fc = model.forward_cached(s.observation, &venc);
        accumulate_losses(&mut report, &fc, s, lambda_kd);
    }
    Ok(scale_report(report, batch.len()))
}

fn accumulate_losses(report: &mut LossReport, fc: &ForwardCache, s: &Sample, lambda_kd: f64) {
    let im: f64 = -fc
        .imitation
        .iter()
        .zip(&s.target.y)
        .map(|(p, y)| y * p.clamp(LOG_EPS, 1.0).ln())
        .sum::<f64>();
    let kd = fc.metric.iter().zip(s.head_targets).map(|(a, t)| bce(*a, *t)).sum::<f64>() / fc.metric.len() as f64;
    report.imitation += im;
    report.distillation += kd;
    report.total += im + lambda_kd * kd;
}

fn scale_report(r: LossReport, n: usize) -> LossReport {
    let inv = 1.0 / n as f64;
    LossReport {
        total: r.total * inv,
        imitation: r.imitation * inv,
        distillation: r.distillation * inv,
    }
}

/// Batch loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradient(
    model: &StudentModel,
    batch: &Batch,
    vocab: &Vocabulary,
    lambda_kd: f64,
) -> Result<(LossReport, Vec<f64>)> {
    check_batch(model, batch, vocab)?;
    let venc = model.encode_vocab(vocab);
    let c = &model.config;
    let d = c.d_model;
    let k = venc.k;
    let mut grad = vec![0.0; model.layout.total()];
    // Gradients reaching the shared vocabulary latents M and the queries' M part.
    let mut d_m = vec![0.0; k * d];
    let mut d_qm = vec![0.0; k * d];
    let mut report = LossReport::default();
    let inv_b = 1.0 / batch.len() as f64;
    for s in batch {
        let fc = model.forward_cached(s.observation, &venc);
        accumulate_losses(&mut report, &fc, s, lambda_kd);
        sample_backward(model, &venc, &fc, s, lambda_kd, inv_b, &mut grad, &mut d_m, &mut d_qm);
    }
    vocab_backward(model, &venc, &d_m, &d_qm, &mut grad);
    let report = scale_report(report, batch.len());
    Ok((report, grad))
}

#[allow(clippy::too_many_arguments)]
fn sample_backward(
    model: &StudentModel,
    venc: &VocabEncoding,
    fc: &ForwardCache,
    s: &Sample,
    lambda_kd: f64,
    scale: f64,
    grad: &mut [f64],
    d_m: &mut [f64],
    d_qm: &mut [f64],
) {
    let c = &model.config;
    let layout = &model.layout;
    let d = c.d_model;
    let t = c.n_tokens();
    let k = venc.k;
    let nh = c.heads.num_heads();
    let att_scale = 1.0 / (d as f64).sqrt();

    // Imitation logits.
    let p = &fc.imitation;
    let g: Vec<f64> = p
        .iter()
        .zip(&s.target.y)
        .map(|(pi, yi)| if *pi >= LOG_EPS { -yi / pi } else { 0.0 })
        .collect();
    let pg = dot(p, &g);
    let dz: Vec<f64> = (0..k).map(|i| scale * p[i] * (g[i] - pg)).collect();

    // Metric logits.
    let kd_scale = scale * lambda_kd / (k * nh) as f64;
    let da: Vec<f64> = fc
        .metric
        .iter()
        .zip(s.head_targets)
        .map(|(sv, tv)| kd_scale * bce_grad(*sv, *tv) * sv * (1.0 - sv))
        .collect();

    let w_im = model.param("head.im.w");
    let w_m = model.param("head.metric.w");
    let wq = model.param("attn.q");
    let b_w_im = layout.block("head.im.w").offset;
    let b_b_im = layout.block("head.im.b").offset;
    let b_w_m = layout.block("head.metric.w").offset;
    let b_b_m = layout.block("head.metric.b").offset;
    let b_wq = layout.block("attn.q").offset;

    let mut d_e = vec![0.0; d];
    let mut d_keys = vec![0.0; t * d];
    let mut d_values = vec![0.0; t * d];
    let mut sum_dq = vec![0.0; d];
    let mut du = vec![0.0; d];
    let mut dq = vec![0.0; d];
    let mut d_att = vec![0.0; t];
    let mut q = vec![0.0; d];
    let fh = c.ffn_hidden;
    let ffn = (fh > 0).then(|| {
        (
            model.param("ffn.0.w"),
            model.param("ffn.1.w"),
            layout.block("ffn.0.w").offset,
            layout.block("ffn.0.b").offset,
            layout.block("ffn.1.w").offset,
            layout.block("ffn.1.b").offset,
        )
    });
    let mut d_ffn = vec![0.0; fh];
    for i in 0..k {
        let hi = &fc.h[i * d..(i + 1) * d];
        let oi = &fc.out[i * d..(i + 1) * d];
        // d out
        du.iter_mut().zip(w_im).for_each(|(o, w)| *o = dz[i] * w);
        grad[b_b_im] += dz[i];
        axpy(dz[i], oi, &mut grad[b_w_im..b_w_im + d]);
        for m in 0..nh {
            let a = da[i * nh + m];
            if a != 0.0 {
                axpy(a, &w_m[m * d..(m + 1) * d], &mut du);
                axpy(a, oi, &mut grad[b_w_m + m * d..b_w_m + (m + 1) * d]);
                grad[b_b_m + m] += a;
            }
        }
        if let Some((w1, w2, o_w1, o_b1, o_w2, o_b2)) = ffn {
            let fi = &fc.ffn[i * fh..(i + 1) * fh];
            outer_acc(&mut grad[o_w2..o_w2 + d * fh], &du, fi);
            axpy(1.0, &du, &mut grad[o_b2..o_b2 + d]);
            d_ffn.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_acc(w2, &du, &mut d_ffn);
            for (g, f) in d_ffn.iter_mut().zip(fi) {
                *g *= 1.0 - f * f;
            }
            outer_acc(&mut grad[o_w1..o_w1 + fh * d], &d_ffn, hi);
            axpy(1.0, &d_ffn, &mut grad[o_b1..o_b1 + fh]);
            matvec_t_acc(w1, &d_ffn, &mut du);
        }
        for (o, h) in du.iter_mut().zip(hi) {
            *o *= 1.0 - h * h;
        }
        axpy(1.0, &du, &mut d_m[i * d..(i + 1) * d]);
        axpy(1.0, &du, &mut d_e);

        let ai = &fc.attn[i * t..(i + 1) * t];
        for j in 0..t {
            axpy(ai[j], &du, &mut d_values[j * d..(j + 1) * d]);
            d_att[j] = dot(&du, &fc.values[j * d..(j + 1) * d]);
        }
        let ad = dot(ai, &d_att);
        for o in 0..d {
            q[o] = venc.qm[i * d + o] + fc.q_e[o];
        }
        dq.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..t {
            let ds = ai[j] * (d_att[j] - ad) * att_scale;
            if ds != 0.0 {
                axpy(ds, &fc.keys[j * d..(j + 1) * d], &mut dq);
                axpy(ds, &q, &mut d_keys[j * d..(j + 1) * d]);
            }
        }
        axpy(1.0, &dq, &mut d_qm[i * d..(i + 1) * d]);
        axpy(1.0, &dq, &mut sum_dq);
    }

    // Query contribution through E.
    outer_acc(&mut grad[b_wq..b_wq + d * d], &sum_dq, &fc.e);
    matvec_t_acc(wq, &sum_dq, &mut d_e);

    // Keys and values from the environment tokens.
    let f_env = &fc.f_env;
    let mut d_f = vec![0.0; t * d];
    for (role, dproj) in [("attn.k", &d_keys), ("attn.v", &d_values)] {
        let off = layout.block(role).offset;
        let w = model.param(role);
        for j in 0..t {
            let fj = &f_env[j * d..(j + 1) * d];
            let gj = &dproj[j * d..(j + 1) * d];
            outer_acc(&mut grad[off..off + d * d], gj, fj);
            matvec_t_acc(w, gj, &mut d_f[j * d..(j + 1) * d]);
        }
    }

    // Ego projection.
    let b_we = layout.block("ego.w").offset;
    let b_be = layout.block("ego.b").offset;
    outer_acc(&mut grad[b_we..b_we + d * EGO_STATUS_DIM], &d_e, &fc.ego_in);
    axpy(1.0, &d_e, &mut grad[b_be..b_be + d]);

    // Encoder stack, applied row-wise.
    if let EnvEncoder::Patch { .. } = c.encoder {
        axpy(1.0, &d_f, &mut grad[layout.block("enc.pos").range()]);
    }
    let (rows, _, _) = c.encoder_shape();
    let mut d_act = d_f;
    for l in (0..layout.encoder_layers()).rev() {
        let out = &fc.acts[l + 1];
        let input = &fc.acts[l];
        let n_out = out.len() / rows;
        let n_in = input.len() / rows;
        let wb = layout.block(&format!("enc.{l}.w"));
        let bb = layout.block(&format!("enc.{l}.b"));
        let mut next = if l > 0 { vec![0.0; input.len()] } else { Vec::new() };
        for r in 0..rows {
            let d_pre: Vec<f64> = d_act[r * n_out..(r + 1) * n_out]
                .iter()
                .zip(&out[r * n_out..(r + 1) * n_out])
                .map(|(g, a)| g * (1.0 - a * a))
                .collect();
            let x = &input[r * n_in..(r + 1) * n_in];
            outer_acc(&mut grad[wb.range()], &d_pre, x);
            axpy(1.0, &d_pre, &mut grad[bb.range()]);
            if l > 0 {
                matvec_t_acc(&model.params[wb.range()], &d_pre, &mut next[r * n_in..(r + 1) * n_in]);
            }
        }
        d_act = next;
    }
}

/// Back-propagate the batch-accumulated latent gradients through W_q and the
/// vocabulary MLP, once per batch.
fn vocab_backward(model: &StudentModel, venc: &VocabEncoding, d_m: &[f64], d_qm: &[f64], grad: &mut [f64]) {
    let c = &model.config;
    let layout = &model.layout;
    let d = c.d_model;
    let hid = c.traj_hidden;
    let dim = c.traj_dim();
    let wq = model.param("attn.q");
    let w2 = model.param("traj.1.w");
    let b_wq = layout.block("attn.q").offset;
    let r_w1 = layout.block("traj.0.w").range();
    let r_b1 = layout.block("traj.0.b").range();
    let r_w2 = layout.block("traj.1.w").range();
    let r_b2 = layout.block("traj.1.b").range();
    let mut dmi = vec![0.0; d];
    let mut dg = vec![0.0; hid];
    for i in 0..venc.k {
        let mi = &venc.m[i * d..(i + 1) * d];
        let dqi = &d_qm[i * d..(i + 1) * d];
        outer_acc(&mut grad[b_wq..b_wq + d * d], dqi, mi);
        dmi.copy_from_slice(&d_m[i * d..(i + 1) * d]);
        matvec_t_acc(wq, dqi, &mut dmi);

        let gi = &venc.hidden[i * hid..(i + 1) * hid];
        outer_acc(&mut grad[r_w2.clone()], &dmi, gi);
        axpy(1.0, &dmi, &mut grad[r_b2.clone()]);
        dg.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_acc(w2, &dmi, &mut dg);
        for (o, gv) in dg.iter_mut().zip(gi) {
            *o *= 1.0 - gv * gv;
        }
        outer_acc(&mut grad[r_w1.clone()], &dg, &venc.input[i * dim..(i + 1) * dim]);
        axpy(1.0, &dg, &mut grad[r_b1.clone()]);
    }
}

/// One Adam step on the batch objective. The model is left untouched when
/// the loss or any gradient component is non-finite.
pub fn train_step(
    model: &mut StudentModel,
    opt: &mut Adam,
    batch: &Batch,
    vocab: &Vocabulary,
    lambda_kd: f64,
) -> Result<LossReport> {
    let (report, grad) = loss_and_gradient(model, batch, vocab, lambda_kd)?;
    for (name, v) in [
        ("loss.total", report.total),
        ("loss.imitation", report.imitation),
        ("loss.distillation", report.distillation),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                role: name.into(),
                detail: format!("value {v} at optimizer step {}", opt.steps() + 1),
            });
        }
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        let role = model.layout.role_of(i).to_string();
        let offset = i - model.layout.block(&role).offset;
        return Err(Error::NonFinite {
            detail: format!("gradient {} at element {offset}, optimizer step {}", grad[i], opt.steps() + 1),
            role: format!("grad.{role}"),
        });
    }
    if let Some(i) = model.params.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            role: model.layout.role_of(i).to_string(),
            detail: "parameter is not finite".into(),
        });
    }
    opt.update(&mut model.params, &grad);
    Ok(report)
}
