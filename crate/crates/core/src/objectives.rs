//! The five pretraining losses and the label transformations feeding them.

use patchsum_tensor::Tensor;
use rand::Rng;

use crate::error::{config, data, Error, Result};
use crate::synth::{Vocab, MASK};

/// Clamp applied to every probability before taking a log.
pub const LOG_EPS: f64 = 1e-7;

/// Axis-aligned box in source-image pixels: `[x, x+w) × [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl BoundingBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self { x, y, w, h }
    }
}

/// Binary patch labels `Y` in row-major grid order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLabelMask {
    pub labels: Vec<u8>,
}

impl PatchLabelMask {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| y as f64).collect()
    }
}

/// Labels a patch 1 iff its pixel square and the box share positive area.
/// Edge contact alone does not count.
pub fn bbox_to_patch_labels(b: &BoundingBox, image_size: usize, patch_size: usize) -> Result<PatchLabelMask> {
    if patch_size == 0 || image_size % patch_size != 0 {
        return Err(config(format!("image size {image_size} is not divisible by patch size {patch_size}")));
    }
    if b.w <= 0 || b.h <= 0 {
        return Err(data(format!("degenerate box {}×{}", b.w, b.h)));
    }
    let size = image_size as i64;
    let (x0, y0, x1, y1) = (b.x.max(0), b.y.max(0), (b.x + b.w).min(size), (b.y + b.h).min(size));
    if x0 >= x1 || y0 >= y1 {
        return Err(data(format!("box ({}, {}, {}, {}) lies outside the {image_size}² image", b.x, b.y, b.w, b.h)));
    }
    let p = patch_size as i64;
    let g = image_size / patch_size;
    let mut labels = vec![0u8; g * g];
    for r in 0..g as i64 {
        for c in 0..g as i64 {
            let hit = (c * p).max(x0) < ((c + 1) * p).min(x1) && (r * p).max(y0) < ((r + 1) * p).min(y1);
            labels[(r as usize) * g + c as usize] = hit as u8;
        }
    }
    Ok(PatchLabelMask { labels })
}

/// Token ids of `"this is a <label>"`.
pub fn class_label_to_text(label: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    if label.trim().is_empty() {
        return Err(data("empty class label"));
    }
    vocab.encode(&format!("this is a {label}"))
}

/// Binary cross-entropy between TSPS scores and patch labels.
pub fn ptm_loss(a: &Tensor, y: &PatchLabelMask) -> Result<Tensor> {
    Ok(a.binary_cross_entropy(&y.as_f64(), LOG_EPS)?)
}

/// Scaled cosine similarities `[B×B]` between image and text embeddings.
pub fn itc_logits(img: &Tensor, txt: &Tensor, inv_temp: &Tensor) -> Result<Tensor> {
    let i = img.l2_normalize_rows(1e-12)?;
    let t = txt.l2_normalize_rows(1e-12)?;
    Ok(i.matmul_nt(&t)?.mul_scalar_tensor(inv_temp)?)
}

/// Symmetric in-batch InfoNCE with matched pairs on the diagonal.
pub fn itc_loss(img: &Tensor, txt: &Tensor, inv_temp: &Tensor) -> Result<Tensor> {
    let b = img.rows();
    if b < 2 {
        return Err(config(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    let logits = itc_logits(img, txt, inv_temp)?;
    let diag: Vec<usize> = (0..b).collect();
    let i2t = logits.cross_entropy_rows(&diag)?;
    let t2i = logits.transpose()?.cross_entropy_rows(&diag)?;
    Ok(i2t.add(&t2i)?.scale(0.5))
}

/// For each row `i`, draws one column `j ≠ i` with probability
/// `∝ exp(sim[i][j])`. Rows whose off-diagonal weights are all zero (e.g.
/// every entry −∞) fall back to uniform.
pub fn hard_negative_sample<R: Rng>(sim: &[f64], b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if b < 2 {
        return Err(config(format!("negative sampling needs a batch of at least 2, got {b}")));
    }
    if sim.len() != b * b {
        return Err(data(format!("similarity matrix has {} entries, expected {}", sim.len(), b * b)));
    }
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let row = &sim[i * b..(i + 1) * b];
        let max =
            row.iter().enumerate().filter(|&(j, v)| j != i && !v.is_nan()).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, &v)| if j == i || !max.is_finite() || v.is_nan() { 0.0 } else { (v - max).exp() })
            .collect();
        let mut total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            weights = (0..b).map(|j| if j == i { 0.0 } else { 1.0 }).collect();
            total = (b - 1) as f64;
        }
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (j, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            acc += w;
            pick = Some(j);
            if target < acc {
                break;
            }
        }
        out.push(pick.expect("at least one positive weight"));
    }
    Ok(out)
}

/// Match probability BCE on raw ITM logits (one per pair).
pub fn itm_loss(logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    Ok(logits.sigmoid().binary_cross_entropy(labels, LOG_EPS)?)
}

/// Replaces each non-special token by [MASK] with probability `rate`,
/// forcing one position when none is drawn. Returns masked ids and the
/// masked positions in increasing order.
pub fn mlm_mask<R: Rng>(ids: &[usize], rate: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| !Vocab::is_special(ids[i])).collect();
    if candidates.is_empty() {
        return Err(data("no maskable token: every id is special"));
    }
    let mut positions: Vec<usize> = candidates.iter().copied().filter(|_| rng.gen::<f64>() < rate).collect();
    if positions.is_empty() {
        positions.push(candidates[rng.gen_range(0..candidates.len())]);
    }
    let mut masked = ids.to_vec();
    for &p in &positions {
        masked[p] = MASK;
    }
    Ok((masked, positions))
}

/// Mean cross-entropy of vocabulary logits at the masked positions.
pub fn mlm_loss(logits: &Tensor, original: &[usize]) -> Result<Tensor> {
    if original.is_empty() {
        return Err(data("no masked positions"));
    }
    Ok(logits.cross_entropy_rows(original)?)
}

/// Mean next-token cross-entropy of decoder logits `[T×V]` against targets.
pub fn prefix_lm_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(data("empty generation target"));
    }
    Ok(logits.cross_entropy_rows(targets)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub prefix: f64,
    pub ptm: f64,
    pub total: f64,
}

impl LossBundle {
    pub const NAMES: [&'static str; 5] = ["itc", "itm", "mlm", "prefix", "ptm"];

    pub fn parts(&self) -> [f64; 5] {
        [self.itc, self.itm, self.mlm, self.prefix, self.ptm]
    }
}

/// Unweighted sum in the fixed order itc → itm → mlm → prefix → ptm.
pub fn total_loss(itc: f64, itm: f64, mlm: f64, prefix: f64, ptm: f64) -> Result<LossBundle> {
    for (name, v) in LossBundle::NAMES.iter().zip([itc, itm, mlm, prefix, ptm]) {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBundle { itc, itm, mlm, prefix, ptm, total: itc + itm + mlm + prefix + ptm })
}

/// Graph-side counterpart of [`total_loss`], summed in the same order.
pub fn total_loss_tensor(parts: [&Tensor; 5]) -> Result<(Tensor, LossBundle)> {
    let bundle = total_loss(parts[0].item(), parts[1].item(), parts[2].item(), parts[3].item(), parts[4].item())?;
    let total = parts[0].add(parts[1])?.add(parts[2])?.add(parts[3])?.add(parts[4])?;
    Ok((total, bundle))
}
