//! The alternating region/paired training loop, the β gate and AdamW.
//!
//! Each step draws a region batch (object boxes with class-label captions)
//! and a paired batch (images with free captions), builds both forward
//! graphs, sums the five losses and applies a single optimizer update.

use std::time::Instant;

use patchsum_tensor::Tensor;
use rand::Rng;

use crate::config::{RunConfig, TrainConfig};
use crate::error::{config, Error, Result};
use crate::model::Model;
use crate::objectives::{
    bbox_to_patch_labels, hard_negative_sample, itc_logits, itc_loss, itm_loss, mlm_loss, mlm_mask, prefix_lm_loss, ptm_loss,
    total_loss_tensor, LossBundle,
};
use crate::params::ParamStore;
use crate::rng::{step_stream, Stream};
use crate::synth::{generate, SampleKind, SynthSample, SEP};

/// Optimizer moments, β-gate state and counters. Randomness is a pure
/// function of `(seed, step)`, so the step counter is the RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub beta: f64,
    /// Exponential moving average of the PTM loss; seeded by the first value.
    pub ptm_ema: Option<f64>,
    /// First step that ran with the gate open.
    pub gate_opened_at: Option<usize>,
    /// First and second AdamW moments per parameter, in store order.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl TrainState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            step: 0,
            epoch: 0,
            beta: 0.0,
            ptm_ema: None,
            gate_opened_at: None,
            moments: params.iter().map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()])).collect(),
        }
    }

    /// Folds this step's PTM loss into the EMA and opens the gate once the
    /// EMA drops below the threshold. The gate never closes again.
    pub fn observe_ptm(&mut self, loss: f64, decay: f64, threshold: f64) {
        let ema = match self.ptm_ema {
            None => loss,
            Some(prev) => decay * prev + (1.0 - decay) * loss,
        };
        self.ptm_ema = Some(ema);
        if self.gate_opened_at.is_none() && ema < threshold {
            self.gate_opened_at = Some(self.step + 1);
        }
    }
}

/// β for the current step: 0 until the PTM gate opens, then a linear ramp
/// to `beta_max` over `warmup_steps`. Never below the previous value.
pub fn beta_schedule(state: &TrainState, beta_max: f64, warmup_steps: usize) -> f64 {
    let ramp = match state.gate_opened_at {
        None => 0.0,
        Some(_) if warmup_steps == 0 => beta_max,
        Some(g) => beta_max * ((state.step.saturating_sub(g)) as f64 / warmup_steps as f64).min(1.0),
    };
    ramp.max(state.beta).min(beta_max)
}

/// Linear warm-up to `lr`, then cosine decay reaching `lr_min` at the last step.
pub fn learning_rate(step: usize, total_steps: usize, t: &TrainConfig) -> f64 {
    if step < t.warmup_iters {
        return t.lr * (step + 1) as f64 / t.warmup_iters as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(t.warmup_iters);
    if span == 0 {
        return if step + 1 >= total_steps { t.lr_min } else { t.lr };
    }
    let progress = ((step - t.warmup_iters) as f64 / span as f64).min(1.0);
    t.lr_min + 0.5 * (t.lr - t.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Collects gradients in store order; untouched parameters get zeros.
pub fn gradients(params: &ParamStore) -> Result<Vec<Vec<f64>>> {
    params
        .iter()
        .map(|p| {
            let g = p.get().grad_or_zeros();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {}", p.name())));
            }
            Ok(g)
        })
        .collect()
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One AdamW update with decoupled weight decay on matrices only. Uses
/// `state.step + 1` for bias correction; does not advance the step.
pub fn optimize(params: &ParamStore, grads: &[Vec<f64>], state: &mut TrainState, t: &TrainConfig, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.moments.len() != params.len() {
        return Err(Error::State("gradient/moment count does not match the parameter store".into()));
    }
    let k = (state.step + 1) as i32;
    let (b1, b2) = (t.adam_beta1, t.adam_beta2);
    let (c1, c2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.moments.iter_mut()) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {}", p.name())));
        }
        let decay = if p.decays() { lr * t.weight_decay } else { 0.0 };
        let mut data = p.get().data().to_vec();
        for i in 0..data.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + t.adam_eps);
            data[i] = data[i] * (1.0 - decay) - lr * update;
        }
        p.set_data(data)?;
    }
    Ok(())
}

/// Region and paired batches for one step.
pub fn batches_for_step(
    seed: u64,
    step: usize,
    t: &TrainConfig,
    cfg: &RunConfig,
) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    let mut rng = step_stream(seed, Stream::Data, step as u64);
    let size = cfg.image_size as u32;
    let region = (0..t.batch_o).map(|_| generate(rng.gen(), SampleKind::Region, size)).collect::<Result<_>>()?;
    let paired = (0..t.batch_d).map(|_| generate(rng.gen(), SampleKind::Paired, size)).collect::<Result<_>>()?;
    Ok((region, paired))
}

/// The summed loss graph for one step, before backward.
pub struct StepLosses {
    pub total: Tensor,
    pub bundle: LossBundle,
    /// Retained patches u and summary seeds s of the paired forwards.
    pub kept: usize,
    pub seeds: usize,
}

/// Mean PTM loss over a region batch (zero for an empty batch).
pub fn region_loss(model: &Model, batch: &[SynthSample]) -> Result<Tensor> {
    if batch.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let cfg = &model.cfg;
    let mut acc: Option<Tensor> = None;
    for s in batch {
        let bbox = s.bbox.ok_or_else(|| config(format!("region sample {} has no box", s.seed)))?;
        let y = bbox_to_patch_labels(&bbox, cfg.image_size, cfg.patch_size)?;
        let text = model.text_encode(&s.caption)?;
        let l = ptm_loss(&model.ptm_scores(&s.image(), &text)?, &y)?;
        acc = Some(match acc {
            None => l,
            Some(a) => a.add(&l)?,
        });
    }
    Ok(acc.expect("non-empty batch").scale(1.0 / batch.len() as f64))
}

/// Builds all five losses for one step. `rng_step` selects the masking and
/// negative-sampling streams.
pub fn step_losses(
    model: &Model,
    region: &[SynthSample],
    paired: &[SynthSample],
    beta: f64,
    mlm_rate: f64,
    seed: u64,
    rng_step: usize,
) -> Result<StepLosses> {
    let b = paired.len();
    if b < 2 {
        return Err(config(format!("paired batch needs at least 2 samples, got {b}")));
    }
    let ptm = region_loss(model, region)?;

    let mut texts = Vec::with_capacity(b);
    let mut summaries = Vec::with_capacity(b);
    let mut img_emb = Vec::with_capacity(b);
    let mut txt_emb = Vec::with_capacity(b);
    let (mut kept, mut seeds) = (0, 0);
    for s in paired {
        let text = model.text_encode(&s.caption)?;
        let vision = model.vit_forward(&s.image(), &text, beta)?;
        let summary = model.summarize(&vision)?;
        kept = vision.seq.patch_count();
        seeds = summary.patch_count();
        img_emb.push(model.heads.itc_image.forward(&vision.image_cls()?)?);
        txt_emb.push(model.heads.itc_text.forward(&text.t_cls)?);
        texts.push(text);
        summaries.push(summary);
    }
    let img = Tensor::concat_rows(&img_emb.iter().collect::<Vec<_>>())?;
    let txt = Tensor::concat_rows(&txt_emb.iter().collect::<Vec<_>>())?;
    let inv_temp = model.heads.inv_temp.get();
    let itc = itc_loss(&img, &txt, &inv_temp)?;

    let sim = itc_logits(&img, &txt, &inv_temp)?;
    let mut neg_rng = step_stream(seed, Stream::Negatives, rng_step as u64);
    let negatives = hard_negative_sample(sim.data(), b, &mut neg_rng)?;
    let mut itm_logits = Vec::with_capacity(2 * b);
    let mut itm_labels = Vec::with_capacity(2 * b);
    for i in 0..b {
        for (j, label) in [(i, 1.0), (negatives[i], 0.0)] {
            let joint = model.fuse(&summaries[i], &texts[j])?.joint_row()?;
            itm_logits.push(model.itm_logit(&joint)?);
            itm_labels.push(label);
        }
    }
    let itm = itm_loss(&Tensor::concat_rows(&itm_logits.iter().collect::<Vec<_>>())?, &itm_labels)?;

    let mut mask_rng = step_stream(seed, Stream::Masking, rng_step as u64);
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut lm_rows = Vec::new();
    let mut lm_targets = Vec::new();
    for (i, s) in paired.iter().enumerate() {
        let (masked, positions) = mlm_mask(&s.caption, mlm_rate, &mut mask_rng)?;
        let fused = model.fuse(&summaries[i], &model.text_encode(&masked)?)?;
        let rows: Vec<usize> = positions.iter().map(|&p| fused.image_len + 1 + p).collect();
        mlm_rows.push(model.vocab_logits(&fused.states.gather_rows(&rows)?)?);
        mlm_targets.extend(positions.iter().map(|&p| s.caption[p]));

        let split = s.caption.len() / 2;
        let fused = model.fuse(&summaries[i], &model.text_encode(&s.caption[..split])?)?;
        lm_rows.push(model.decode(&fused, &s.caption[split..])?);
        lm_targets.extend_from_slice(&s.caption[split..]);
        lm_targets.push(SEP);
    }
    let mlm = mlm_loss(&Tensor::concat_rows(&mlm_rows.iter().collect::<Vec<_>>())?, &mlm_targets)?;
    let prefix = prefix_lm_loss(&Tensor::concat_rows(&lm_rows.iter().collect::<Vec<_>>())?, &lm_targets)?;

    let (total, bundle) = total_loss_tensor([&itc, &itm, &mlm, &prefix, &ptm])?;
    Ok(StepLosses { total, bundle, kept, seeds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub beta: f64,
    pub lr: f64,
    pub losses: LossBundle,
    pub grad_norm: f64,
    pub ptm_ema: f64,
    pub kept: usize,
    pub seeds: usize,
    pub wall_ms: f64,
}

/// One iteration: both forwards, one backward over the sum, one update.
pub fn train_step(
    model: &Model,
    region: &[SynthSample],
    paired: &[SynthSample],
    state: &mut TrainState,
    t: &TrainConfig,
) -> Result<StepReport> {
    let start = Instant::now();
    let beta = beta_schedule(state, model.cfg.beta_max, t.beta_warmup_steps);
    state.beta = beta;
    let params = model.params();
    params.zero_grad();
    let losses = step_losses(model, region, paired, beta, t.mlm_rate, model.cfg.seed, state.step)?;
    losses.total.backward()?;
    let mut grads = gradients(params)?;
    let grad_norm = clip_grad_norm(&mut grads, t.clip);
    let lr = learning_rate(state.step, t.steps, t);
    optimize(params, &grads, state, t, lr)?;
    let report_step = state.step;
    state.observe_ptm(losses.bundle.ptm, t.ema_decay, t.ema_threshold);
    state.step += 1;
    Ok(StepReport {
        step: report_step,
        beta,
        lr,
        losses: losses.bundle,
        grad_norm,
        ptm_ema: state.ptm_ema.unwrap_or(f64::NAN),
        kept: losses.kept,
        seeds: losses.seeds,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Runs `t.steps - state.step` further steps, calling `on_step` after each.
pub fn train<F>(model: &Model, state: &mut TrainState, t: &TrainConfig, mut on_step: F) -> Result<()>
where
    F: FnMut(&StepReport, &TrainState) -> Result<()>,
{
    while state.step < t.steps {
        let (region, paired) = batches_for_step(model.cfg.seed, state.step, t, &model.cfg)?;
        let report = train_step(model, &region, &paired, state, t)?;
        on_step(&report, state)?;
    }
    Ok(())
}

/// Area under the ROC curve, ties counted half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (pos, neg) = labels.iter().fold((0usize, 0usize), |(p, n), &l| if l { (p + 1, n) } else { (p, n + 1) });
    if pos == 0 || neg == 0 {
        return None;
    }
    // Sum of positive ranks with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// Pooled patch-label AUC of the TSPS scores over region samples.
pub fn ptm_auc(model: &Model, region: &[SynthSample]) -> Result<f64> {
    let frozen = model.frozen()?;
    let cfg = &model.cfg;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in region {
        let bbox = s.bbox.ok_or_else(|| config(format!("region sample {} has no box", s.seed)))?;
        let y = bbox_to_patch_labels(&bbox, cfg.image_size, cfg.patch_size)?;
        let text = frozen.text_encode(&s.caption)?;
        scores.extend_from_slice(frozen.ptm_scores(&s.image(), &text)?.data());
        labels.extend(y.labels.iter().map(|&l| l == 1));
    }
    auc(&scores, &labels).ok_or_else(|| Error::Data("AUC needs both positive and negative patches".into()))
}

/// Held-out region and paired samples drawn from their own stream.
pub fn held_out(seed: u64, count: usize, cfg: &RunConfig) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    let mut rng = crate::rng::stream(seed, Stream::HeldOut);
    let size = cfg.image_size as u32;
    let region = (0..count).map(|_| generate(rng.gen(), SampleKind::Region, size)).collect::<Result<_>>()?;
    let paired = (0..count).map(|_| generate(rng.gen(), SampleKind::Paired, size)).collect::<Result<_>>()?;
    Ok((region, paired))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub losses: LossBundle,
    pub ptm_auc: f64,
    pub samples: usize,
}

/// Mean losses over consecutive paired chunks of `batch` plus the PTM AUC.
pub fn evaluate(
    model: &Model,
    region: &[SynthSample],
    paired: &[SynthSample],
    beta: f64,
    batch: usize,
    mlm_rate: f64,
) -> Result<EvalReport> {
    let frozen = model.frozen()?;
    let batch = batch.max(2);
    let chunks: Vec<_> = paired.chunks(batch).filter(|c| c.len() >= 2).collect();
    if chunks.is_empty() {
        return Err(config("evaluation needs at least 2 paired samples"));
    }
    let region_chunks: Vec<_> = region.chunks(region.len().div_ceil(chunks.len()).max(1)).collect();
    let mut sums = [0.0; 5];
    for (i, chunk) in chunks.iter().enumerate() {
        let r = region_chunks.get(i).copied().unwrap_or(&[]);
        let l = step_losses(&frozen, r, chunk, beta, mlm_rate, model.cfg.seed ^ 0x5eed, i)?;
        for (s, v) in sums.iter_mut().zip(l.bundle.parts()) {
            *s += v;
        }
    }
    let n = chunks.len() as f64;
    let losses = crate::objectives::total_loss(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, sums[4] / n)?;
    Ok(EvalReport { losses, ptm_auc: ptm_auc(&frozen, region)?, samples: paired.len() })
}
