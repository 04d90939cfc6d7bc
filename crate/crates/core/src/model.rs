//! The four transformer stacks and the heads that sit on them.
//!
//! Per sample the flow is: text encoder → ViT layers `1..=k` → key patch
//! extraction → ViT layers `k+1..=N` → seed selection and abstraction →
//! fusion encoder over `[summary ; text]` → prefix decoder.

use patchsum_tensor::Tensor;
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{config, data, Error, Result};
use crate::nn::{AttnMask, EncoderBlock, LayerNorm, Linear};
use crate::params::{Param, ParamBuilder, ParamStore};
use crate::rng::{stream, Stream};
use crate::summarizer::{kpe_select, mix_saliency, pad_forward, tpa_select, Pad, PatchSequence, SaliencyRecord, Tsps};
use crate::synth::{Vocab, CLS, PAD};

#[derive(Debug, Clone)]
pub struct TextEncoding {
    /// `[1×d]`.
    pub t_cls: Tensor,
    /// `[(1+m)×d]`, padded.
    pub sequence: Tensor,
    /// `[CLS]` + caption + padding.
    pub token_ids: Vec<usize>,
    /// Key validity per position; false on padding.
    pub attention_mask: Vec<bool>,
}

impl TextEncoding {
    /// Caption tokens plus [CLS].
    pub fn valid_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }
}

/// ViT output together with what was observed at the extraction layer.
#[derive(Debug, Clone)]
pub struct VisionOutput {
    pub seq: PatchSequence,
    pub saliency: SaliencyRecord,
    /// Per layer (in order), per head attention matrices.
    pub attention: Vec<Vec<Tensor>>,
}

impl VisionOutput {
    /// Head-mean attention of the [CLS] query over every other slot at the
    /// given 1-based layer.
    pub fn cls_attention(&self, layer: usize) -> Result<Tensor> {
        let heads = layer
            .checked_sub(1)
            .and_then(|i| self.attention.get(i))
            .ok_or_else(|| Error::State(format!("layer {layer} has not run")))?;
        cls_attention_of(heads)
    }

    pub fn image_cls(&self) -> Result<Tensor> {
        Ok(self.seq.states.gather_rows(&[0])?)
    }
}

fn cls_attention_of(heads: &[Tensor]) -> Result<Tensor> {
    let keys = heads[0].cols();
    let idx: Vec<usize> = (1..keys).collect();
    let mut acc: Option<Tensor> = None;
    for h in heads {
        let row = h.gather_elements(&idx, vec![keys - 1])?;
        acc = Some(match acc {
            None => row,
            Some(a) => a.add(&row)?,
        });
    }
    Ok(acc.expect("at least one head").scale(1.0 / heads.len() as f64))
}

#[derive(Debug, Clone)]
pub struct FusedOutput {
    /// `[(image_len + 1 + m) × d]`.
    pub states: Tensor,
    pub key_mask: Vec<bool>,
    /// Summary slots before the text block; also the row of the text [CLS].
    pub image_len: usize,
}

impl FusedOutput {
    pub fn joint_row(&self) -> Result<Tensor> {
        Ok(self.states.gather_rows(&[self.image_len])?)
    }
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub cls: Param,
    pub pos: Param,
    pub blocks: Vec<EncoderBlock>,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub tokens: Param,
    pub pos: Param,
    pub blocks: Vec<EncoderBlock>,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct FusionEncoder {
    pub blocks: Vec<EncoderBlock>,
    pub ln: LayerNorm,
}

/// Prefix LM: fused rows attend among themselves, target rows attend to all
/// fused rows and to earlier targets. Output logits tie to the token table.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub pos: Param,
    pub blocks: Vec<EncoderBlock>,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub itc_image: Linear,
    pub itc_text: Linear,
    /// Learnable inverse temperature for the contrastive logits.
    pub inv_temp: Param,
    pub itm_hidden: Linear,
    pub itm_out: Linear,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: RunConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub tsps: Tsps,
    pub pad: Pad,
    pub fusion: FusionEncoder,
    pub decoder: Decoder,
    pub heads: Heads,
    params: ParamStore,
}

fn stack<R: Rng>(pb: &mut ParamBuilder<'_, R>, layers: usize, cfg: &RunConfig) -> Result<Vec<EncoderBlock>> {
    (0..layers).map(|i| EncoderBlock::new(pb, &format!("block{i}"), cfg.d, cfg.heads, cfg.ffn_mult)).collect()
}

impl Model {
    /// Builds a model with weights drawn from the config seed's init stream.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, Stream::Init);
        Self::build(cfg, &mut rng)
    }

    pub fn build<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let (d, n, m) = (cfg.d, cfg.num_patches(), cfg.max_text_len);
        let mut pb = ParamBuilder::new(rng, cfg.init_std);

        pb.push("vision");
        let vision = VisionEncoder {
            patch_embed: Linear::new(&mut pb, "patch_embed", cfg.patch_dim(), d)?,
            cls: pb.normal("cls", vec![1, d])?,
            pos: pb.normal("pos", vec![1 + n, d])?,
            blocks: stack(&mut pb, cfg.vit_layers, cfg)?,
            ln: LayerNorm::new(&mut pb, "ln", d)?,
        };
        pb.pop();

        pb.push("text");
        let text = TextEncoder {
            tokens: pb.normal("tokens", vec![cfg.vocab_size, d])?,
            pos: pb.normal("pos", vec![1 + m, d])?,
            blocks: stack(&mut pb, cfg.text_layers, cfg)?,
            ln: LayerNorm::new(&mut pb, "ln", d)?,
        };
        pb.pop();

        let tsps = Tsps::new(&mut pb, d, cfg.tsps_hidden)?;
        let pad = Pad::new(&mut pb, cfg.pad_layers, d, cfg.heads, cfg.ffn_mult)?;

        pb.push("fusion");
        let fusion = FusionEncoder { blocks: stack(&mut pb, cfg.fusion_layers, cfg)?, ln: LayerNorm::new(&mut pb, "ln", d)? };
        pb.pop();

        pb.push("decoder");
        let decoder = Decoder {
            pos: pb.normal("pos", vec![1 + m, d])?,
            blocks: stack(&mut pb, cfg.decoder_layers, cfg)?,
            ln: LayerNorm::new(&mut pb, "ln", d)?,
        };
        pb.pop();

        pb.push("heads");
        let heads = Heads {
            itc_image: Linear::new(&mut pb, "itc_image", d, d)?,
            itc_text: Linear::new(&mut pb, "itc_text", d, d)?,
            inv_temp: pb.filled("inv_temp", vec![1], 1.0 / cfg.itc_temperature)?,
            itm_hidden: Linear::new(&mut pb, "itm_hidden", d, d)?,
            itm_out: Linear::new(&mut pb, "itm_out", d, 1)?,
        };
        pb.pop();

        Ok(Self { cfg: cfg.clone(), vision, text, tsps, pad, fusion, decoder, heads, params: pb.finish() })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Independent copy whose weights are constants: forward passes record
    /// no graph, which is what inference and benchmarking want.
    pub fn frozen(&self) -> Result<Self> {
        let mut rng = stream(0, Stream::Init);
        let copy = Self::build(&self.cfg, &mut rng)?;
        for (dst, src) in copy.params.iter().zip(self.params.iter()) {
            let v = src.get();
            dst.set_tensor(Tensor::constant(v.shape().to_vec(), v.data().to_vec())?);
        }
        Ok(copy)
    }

    // ---- text -------------------------------------------------------------

    /// Encodes `[CLS] + ids`, padded to `1 + m`; padding is masked as keys.
    pub fn text_encode(&self, ids: &[usize]) -> Result<TextEncoding> {
        let m = self.cfg.max_text_len;
        if ids.len() > m {
            return Err(data(format!("caption of {} tokens exceeds the maximum of {m}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(data(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let mut tokens = Vec::with_capacity(1 + m);
        tokens.push(CLS);
        tokens.extend_from_slice(ids);
        tokens.resize(1 + m, PAD);
        let mask: Vec<bool> = (0..=m).map(|i| i <= ids.len()).collect();
        // Padding keys are masked, so valid rows never see padded ones: run
        // the stack on the valid prefix only and zero-fill the rest.
        let valid = 1 + ids.len();
        let rows: Vec<usize> = (0..valid).collect();
        let mut x = self.text.tokens.get().embedding(&tokens[..valid])?.add(&self.text.pos.get().gather_rows(&rows)?)?;
        for block in &self.text.blocks {
            x = block.forward(&x, AttnMask::None)?.0;
        }
        let mut sequence = self.text.ln.forward(&x)?;
        if valid < 1 + m {
            let pad = Tensor::zeros(vec![1 + m - valid, self.cfg.d])?;
            sequence = Tensor::concat_rows(&[&sequence, &pad])?;
        }
        Ok(TextEncoding { t_cls: sequence.gather_rows(&[0])?, sequence, token_ids: tokens, attention_mask: mask })
    }

    // ---- vision -----------------------------------------------------------

    /// Row-major patches of an `[H×W×C]` image, each flattened as
    /// `(row, col, channel)`: `[n × P²C]`.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        patchify(image, self.cfg.patch_size)
    }

    /// Linear patch embeddings before position embeddings: `[n×d]`.
    pub fn patch_embeddings(&self, image: &Tensor) -> Result<Tensor> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != self.cfg.image_size || shape[1] != self.cfg.image_size || shape[2] != self.cfg.channels
        {
            return Err(config(format!(
                "image of shape {shape:?} does not match the configured {0}×{0}×{1}",
                self.cfg.image_size, self.cfg.channels
            )));
        }
        self.vision.patch_embed.forward(&self.patchify(image)?)
    }

    /// `[CLS ; patches] + pos`: `[(1+n)×d]`.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        let patches = self.patch_embeddings(image)?;
        let x = Tensor::concat_rows(&[&self.vision.cls.get(), &patches])?;
        Ok(x.add(&self.vision.pos.get())?)
    }

    /// ViT layers `1..=k` on the full sequence.
    pub fn vit_prefix(&self, image: &Tensor) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
        let mut x = self.embed_image(image)?;
        let mut attention = Vec::with_capacity(self.cfg.k);
        for block in &self.vision.blocks[..self.cfg.k] {
            let (y, probs) = block.forward(&x, AttnMask::None)?;
            x = y;
            attention.push(probs);
        }
        Ok((x, attention))
    }

    /// TSPS scores of every patch at layer `k`; the only vision work the
    /// region batches need.
    pub fn ptm_scores(&self, image: &Tensor, text: &TextEncoding) -> Result<Tensor> {
        let (x, _) = self.vit_prefix(image)?;
        let n = x.rows() - 1;
        let patches = x.gather_rows(&(1..=n).collect::<Vec<_>>())?;
        self.tsps.score(&patches, &text.t_cls)
    }

    /// Full ViT pass with text-guided extraction after layer `k`.
    pub fn vit_forward(&self, image: &Tensor, text: &TextEncoding, beta: f64) -> Result<VisionOutput> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(config(format!("β={beta} outside [0, 1]")));
        }
        let (x, mut attention) = self.vit_prefix(image)?;
        let n = x.rows() - 1;
        let patches = x.gather_rows(&(1..=n).collect::<Vec<_>>())?;
        let a = self.tsps.score(&patches, &text.t_cls)?;
        let p = cls_attention_of(attention.last().expect("k >= 1"))?;
        let a_dot = mix_saliency(&a, &p, beta, self.cfg.norm)?;
        let full = PatchSequence::full(x);
        let mut seq = if self.cfg.kpe_enabled { kpe_select(&full, &a_dot, self.cfg.alpha, self.cfg.fusion_token)? } else { full };
        let mut x = seq.states.clone();
        for block in &self.vision.blocks[self.cfg.k..] {
            let (y, probs) = block.forward(&x, AttnMask::None)?;
            x = y;
            attention.push(probs);
        }
        seq.states = self.vision.ln.forward(&x)?;
        Ok(VisionOutput { seq, saliency: SaliencyRecord { a, p, a_dot, beta, norm: self.cfg.norm }, attention })
    }

    /// Fixed-length summary `V̂` of the ViT output (the whole output when
    /// abstraction is disabled).
    pub fn summarize(&self, vision: &VisionOutput) -> Result<PatchSequence> {
        if !self.cfg.tpa_enabled {
            return Ok(vision.seq.clone());
        }
        let seeds = tpa_select(&vision.seq, &vision.saliency.a_dot, self.cfg.gamma)?;
        pad_forward(&seeds, &vision.seq, &self.pad)
    }

    // ---- cross-modal ------------------------------------------------------

    pub fn fuse(&self, summary: &PatchSequence, text: &TextEncoding) -> Result<FusedOutput> {
        let image_len = summary.len();
        let mut key_mask = vec![true; image_len];
        key_mask.extend_from_slice(&text.attention_mask);
        let mut x = Tensor::concat_rows(&[&summary.states, &text.sequence])?;
        for block in &self.fusion.blocks {
            x = block.forward(&x, AttnMask::Keys(&key_mask))?.0;
        }
        Ok(FusedOutput { states: self.fusion.ln.forward(&x)?, key_mask, image_len })
    }

    /// Logits `[(1+len)×V]` for the token after `[CLS]` and after each
    /// prefix token.
    pub fn decode(&self, fused: &FusedOutput, target_prefix: &[usize]) -> Result<Tensor> {
        let m = self.cfg.max_text_len;
        if target_prefix.len() > m {
            return Err(data(format!("decoder prefix of {} tokens exceeds the maximum of {m}", target_prefix.len())));
        }
        if let Some(&bad) = target_prefix.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(data(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        let f = fused.states.rows();
        let t = 1 + target_prefix.len();
        let mut tokens = vec![CLS];
        tokens.extend_from_slice(target_prefix);
        let table = self.text.tokens.get();
        let pos_rows: Vec<usize> = (0..t).collect();
        let emb = table.embedding(&tokens)?.add(&self.decoder.pos.get().gather_rows(&pos_rows)?)?;
        let mut x = Tensor::concat_rows(&[&fused.states, &emb])?;
        let l = f + t;
        let mut mask = vec![false; l * l];
        for q in 0..l {
            for k in 0..l {
                mask[q * l + k] = if k < f { fused.key_mask[k] } else { q >= f && k <= q };
            }
        }
        for block in &self.decoder.blocks {
            x = block.forward(&x, AttnMask::Full(&mask))?.0;
        }
        let targets = x.gather_rows(&(f..l).collect::<Vec<_>>())?;
        Ok(self.decoder.ln.forward(&targets)?.matmul_nt(&table)?)
    }

    /// Vocabulary logits tied to the token table.
    pub fn vocab_logits(&self, states: &Tensor) -> Result<Tensor> {
        Ok(states.matmul_nt(&self.text.tokens.get())?)
    }

    pub fn itm_logit(&self, joint: &Tensor) -> Result<Tensor> {
        let h = self.heads.itm_hidden.forward(joint)?.gelu();
        self.heads.itm_out.forward(&h)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::standard()
    }
}

/// See [`Model::patchify`].
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(config(format!("expected an H×W×C image, got shape {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(config(format!("{h}×{w} image is not divisible into {patch}-pixel patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut idx = Vec::with_capacity(h * w * c);
    for gr in 0..gh {
        for gc in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (gr * patch + py, gc * patch + px);
                    idx.extend((0..c).map(|ch| (y * w + x) * c + ch));
                }
            }
        }
    }
    Ok(image.gather_elements(&idx, vec![gh * gw, patch * patch * c])?)
}
