//! Text-aware patch scoring, saliency mixing, in-backbone key patch
//! extraction and post-backbone patch abstraction.

use patchsum_tensor::Tensor;
use rand::Rng;

use crate::config::{keep_count, NormKind};
use crate::error::{config, Error, Result};
use crate::nn::{CrossBlock, LayerNorm, Linear};
use crate::params::ParamBuilder;

/// Added to every discarded-patch saliency before renormalizing, so the
/// fusion token stays defined when all discarded scores are zero.
pub const FUSION_WEIGHT_EPS: f64 = 1e-6;

/// Visual token states; slot 0 is the image [CLS].
#[derive(Debug, Clone)]
pub struct PatchSequence {
    /// `[(1 + patches + fused) × d]`.
    pub states: Tensor,
    /// Original grid index of the [CLS] slot (−1) and of each patch slot.
    pub grid_indices: Vec<i64>,
    /// Whether a final fusion token follows the patch slots.
    pub fused: bool,
}

impl PatchSequence {
    pub fn full(states: Tensor) -> Self {
        let n = states.rows() - 1;
        Self { states, grid_indices: std::iter::once(-1).chain(0..n as i64).collect(), fused: false }
    }

    /// Number of patch slots, excluding [CLS] and the fusion token.
    pub fn patch_count(&self) -> usize {
        self.grid_indices.len() - 1
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scores captured at the extraction layer.
#[derive(Debug, Clone)]
pub struct SaliencyRecord {
    /// TSPS alignment scores in (0, 1).
    pub a: Tensor,
    /// Head-mean [CLS] attention to each patch.
    pub p: Tensor,
    /// Mixed saliency `β·F(a) + (1−β)·F(p)`.
    pub a_dot: Tensor,
    pub beta: f64,
    pub norm: NormKind,
}

/// Three-layer MLP over `[patch ; text CLS]`, sigmoid output.
#[derive(Debug, Clone)]
pub struct Tsps {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Tsps {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d: usize, hidden: usize) -> Result<Self> {
        pb.push("tsps");
        let t = Self {
            l1: Linear::new(pb, "l1", 2 * d, hidden)?,
            l2: Linear::new(pb, "l2", hidden, hidden)?,
            l3: Linear::new(pb, "l3", hidden, 1)?,
        };
        pb.pop();
        Ok(t)
    }

    /// Pre-sigmoid logits, one per patch row.
    pub fn logits(&self, patches: &Tensor, t_cls: &Tensor) -> Result<Tensor> {
        let n = patches.rows();
        let text = t_cls.reshape(vec![1, t_cls.numel()])?.gather_rows(&vec![0; n])?;
        let h = Tensor::concat_cols(&[patches, &text])?;
        let h = self.l1.forward(&h)?.gelu();
        let h = self.l2.forward(&h)?.gelu();
        Ok(self.l3.forward(&h)?.reshape(vec![n])?)
    }

    /// `a_i = sigmoid(F([h_i ; t_cls]))`.
    pub fn score(&self, patches: &Tensor, t_cls: &Tensor) -> Result<Tensor> {
        Ok(self.logits(patches, t_cls)?.sigmoid())
    }
}

pub fn normalize(v: &Tensor, kind: NormKind) -> Result<Tensor> {
    Ok(match kind {
        NormKind::MinMax => v.minmax_normalize()?,
        NormKind::Softmax => v.reshape(vec![1, v.numel()])?.softmax_rows()?.reshape(vec![v.numel()])?,
    })
}

/// `ȧ = β·F(a) + (1−β)·F(p)`. A zero-weight term is left out of the graph
/// entirely, so at β = 0 nothing flows back into `a`.
pub fn mix_saliency(a: &Tensor, p: &Tensor, beta: f64, kind: NormKind) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(config(format!("β={beta} outside [0, 1]")));
    }
    if a.numel() != p.numel() {
        return Err(
            patchsum_tensor::TensorError::Shape { op: "mix_saliency", lhs: a.shape().to_vec(), rhs: p.shape().to_vec() }.into()
        );
    }
    if beta == 1.0 {
        return normalize(a, kind);
    }
    if beta == 0.0 {
        return normalize(p, kind);
    }
    Ok(normalize(a, kind)?.scale(beta).add(&normalize(p, kind)?.scale(1.0 - beta))?)
}

/// Positions of the `k` largest scores, returned in increasing position
/// order. Ties go to the lower position.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut keep = order[..k.min(scores.len())].to_vec();
    keep.sort_unstable();
    keep
}

/// Keeps [CLS] and the `⌊n·α⌋` most salient patches in their original
/// order, optionally appending one saliency-weighted average of the rest.
pub fn kpe_select(seq: &PatchSequence, a_dot: &Tensor, alpha: f64, fusion: bool) -> Result<PatchSequence> {
    let n = seq.patch_count();
    if seq.fused {
        return Err(Error::State("sequence already carries a fusion token".into()));
    }
    if a_dot.numel() != n {
        return Err(config(format!("{} saliency scores for {n} patches", a_dot.numel())));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(config(format!("kpe.alpha={alpha} must lie in (0, 1]")));
    }
    let u = keep_count(n, alpha);
    if u == 0 {
        return Err(config(format!("kpe.alpha={alpha} keeps no patch out of {n}")));
    }
    if u == n {
        return Ok(seq.clone());
    }
    let kept = top_k(a_dot.data(), u);
    let mut rows = vec![0];
    rows.extend(kept.iter().map(|&i| i + 1));
    let mut states = seq.states.gather_rows(&rows)?;
    let grid_indices = rows.iter().map(|&r| seq.grid_indices[r]).collect();
    if fusion {
        let mut is_kept = vec![false; n];
        kept.iter().for_each(|&i| is_kept[i] = true);
        let dropped: Vec<usize> = (0..n).filter(|&i| !is_kept[i]).collect();
        let w = a_dot
            .gather_elements(&dropped, vec![dropped.len()])?
            .add_scalar(FUSION_WEIGHT_EPS)
            .normalize_sum()?
            .reshape(vec![1, dropped.len()])?;
        let dropped_rows: Vec<usize> = dropped.iter().map(|&i| i + 1).collect();
        let token = w.matmul(&seq.states.gather_rows(&dropped_rows)?)?;
        states = Tensor::concat_rows(&[&states, &token])?;
    }
    Ok(PatchSequence { states, grid_indices, fused: fusion })
}

/// Picks [CLS] plus the `⌊γ·u⌋` retained patches with the highest
/// extraction-layer saliency. The fusion token is never a seed.
pub fn tpa_select(final_seq: &PatchSequence, a_dot_at_k: &Tensor, gamma: f64) -> Result<PatchSequence> {
    let u = final_seq.patch_count();
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(config(format!("tpa.gamma={gamma} must lie in (0, 1]")));
    }
    let s = keep_count(u, gamma);
    if s == 0 {
        return Err(config(format!("tpa.gamma={gamma} keeps no seed out of {u} patches")));
    }
    let saliency = a_dot_at_k.data();
    let scores = final_seq.grid_indices[1..]
        .iter()
        .map(|&g| {
            saliency
                .get(g as usize)
                .copied()
                .ok_or_else(|| config(format!("grid index {g} outside {} saliency scores", saliency.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = vec![0];
    rows.extend(top_k(&scores, s).into_iter().map(|i| i + 1));
    Ok(PatchSequence {
        states: final_seq.states.gather_rows(&rows)?,
        grid_indices: rows.iter().map(|&r| final_seq.grid_indices[r]).collect(),
        fused: false,
    })
}

/// Patch abstraction decoder: seeds attend to themselves, then to the whole
/// backbone output.
#[derive(Debug, Clone)]
pub struct Pad {
    pub blocks: Vec<CrossBlock>,
    pub ln: LayerNorm,
}

impl Pad {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, layers: usize, d: usize, heads: usize, mult: usize) -> Result<Self> {
        pb.push("pad");
        let blocks =
            (0..layers).map(|i| CrossBlock::new(pb, &format!("block{i}"), d, heads, mult)).collect::<Result<Vec<_>>>()?;
        let ln = LayerNorm::new(pb, "ln", d)?;
        pb.pop();
        Ok(Self { blocks, ln })
    }
}

/// Condenses `full` into exactly `seeds.len()` summary slots.
pub fn pad_forward(seeds: &PatchSequence, full: &PatchSequence, pad: &Pad) -> Result<PatchSequence> {
    if full.is_empty() || full.grid_indices.is_empty() {
        return Err(Error::State("abstraction over an empty sequence".into()));
    }
    let mut x = seeds.states.clone();
    for block in &pad.blocks {
        x = block.forward(&x, &full.states)?;
    }
    Ok(PatchSequence { states: pad.ln.forward(&x)?, grid_indices: seeds.grid_indices.clone(), fused: false })
}
