//! Transformer building blocks on top of the autodiff tensor.

use patchsum_tensor::Tensor;
use rand::Rng;

use crate::error::Result;
use crate::params::{Param, ParamBuilder};

pub const LN_EPS: f64 = 1e-5;

/// `x·W + b` with `W` stored as `[in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, input: usize, output: usize) -> Result<Self> {
        pb.push(name);
        let w = pb.normal("w", vec![input, output])?;
        let b = pb.filled("b", vec![output], 0.0)?;
        pb.pop();
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w.get())?.add_row(&self.b.get())?)
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize) -> Result<Self> {
        pb.push(name);
        let gain = pb.filled("gain", vec![d], 1.0)?;
        let bias = pb.filled("bias", vec![d], 0.0)?;
        pb.pop();
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(&self.gain.get(), &self.bias.get(), LN_EPS)?)
    }
}

/// Two-layer GELU MLP of width `mult·d`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, mult: usize) -> Result<Self> {
        pb.push(name);
        let up = Linear::new(pb, "up", d, d * mult)?;
        let down = Linear::new(pb, "down", d * mult, d)?;
        pb.pop();
        Ok(Self { up, down })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu())
    }
}

/// Which query/key pairs may attend.
#[derive(Debug, Clone, Copy)]
pub enum AttnMask<'a> {
    None,
    /// One flag per key, shared by every query.
    Keys(&'a [bool]),
    /// Row-major `[queries × keys]` flags.
    Full(&'a [bool]),
}

impl AttnMask<'_> {
    fn expand(&self, lq: usize, lk: usize) -> Option<Vec<bool>> {
        match *self {
            AttnMask::None => None,
            AttnMask::Keys(k) => {
                debug_assert_eq!(k.len(), lk);
                Some((0..lq).flat_map(|_| k.iter().copied()).collect())
            }
            AttnMask::Full(f) => {
                debug_assert_eq!(f.len(), lq * lk);
                Some(f.to_vec())
            }
        }
    }
}

pub struct AttentionOutput {
    pub out: Tensor,
    /// Per-head `[queries × keys]` attention weights, still in the graph.
    pub probs: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, heads: usize) -> Result<Self> {
        pb.push(name);
        let q = Linear::new(pb, "q", d, d)?;
        let k = Linear::new(pb, "k", d, d)?;
        let v = Linear::new(pb, "v", d, d)?;
        let o = Linear::new(pb, "o", d, d)?;
        pb.pop();
        Ok(Self { q, k, v, o, heads })
    }

    pub fn forward(&self, queries: &Tensor, keys: &Tensor, mask: AttnMask<'_>) -> Result<AttentionOutput> {
        let q = self.q.forward(queries)?;
        let k = self.k.forward(keys)?;
        let v = self.v.forward(keys)?;
        let d = q.cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let flags = mask.expand(q.rows(), k.rows());
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (q.slice_cols(h * dh, dh)?, k.slice_cols(h * dh, dh)?, v.slice_cols(h * dh, dh)?);
            let scores = qh.matmul_nt(&kh)?.scale(scale);
            let p = match &flags {
                Some(f) => scores.softmax_rows_masked(f)?,
                None => scores.softmax_rows()?,
            };
            outs.push(p.matmul(&vh)?);
            probs.push(p);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let out = self.o.forward(&Tensor::concat_cols(&refs)?)?;
        Ok(AttentionOutput { out, probs })
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, heads: usize, mult: usize) -> Result<Self> {
        pb.push(name);
        let block = Self {
            ln_attn: LayerNorm::new(pb, "ln_attn", d)?,
            attn: MultiHeadAttention::new(pb, "attn", d, heads)?,
            ln_ffn: LayerNorm::new(pb, "ln_ffn", d)?,
            ffn: FeedForward::new(pb, "ffn", d, mult)?,
        };
        pb.pop();
        Ok(block)
    }

    pub fn forward(&self, x: &Tensor, mask: AttnMask<'_>) -> Result<(Tensor, Vec<Tensor>)> {
        let h = self.ln_attn.forward(x)?;
        let att = self.attn.forward(&h, &h, mask)?;
        let x = x.add(&att.out)?;
        let x = x.add(&self.ffn.forward(&self.ln_ffn.forward(&x)?)?)?;
        Ok((x, att.probs))
    }
}

/// Pre-norm block of self-attention over the queries, cross-attention into a
/// memory sequence, then an FFN.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub ln_memory: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossBlock {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize, heads: usize, mult: usize) -> Result<Self> {
        pb.push(name);
        let block = Self {
            ln_self: LayerNorm::new(pb, "ln_self", d)?,
            self_attn: MultiHeadAttention::new(pb, "self_attn", d, heads)?,
            ln_cross: LayerNorm::new(pb, "ln_cross", d)?,
            ln_memory: LayerNorm::new(pb, "ln_memory", d)?,
            cross_attn: MultiHeadAttention::new(pb, "cross_attn", d, heads)?,
            ln_ffn: LayerNorm::new(pb, "ln_ffn", d)?,
            ffn: FeedForward::new(pb, "ffn", d, mult)?,
        };
        pb.pop();
        Ok(block)
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let x = x.add(&self.self_attn.forward(&h, &h, AttnMask::None)?.out)?;
        let h = self.ln_cross.forward(&x)?;
        let m = self.ln_memory.forward(memory)?;
        let x = x.add(&self.cross_attn.forward(&h, &m, AttnMask::None)?.out)?;
        let x = x.add(&self.ffn.forward(&self.ln_ffn.forward(&x)?)?)?;
        Ok(x)
    }
}
