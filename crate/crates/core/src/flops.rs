//! Analytical FLOPs of the full pipeline.
//!
//! One multiply-accumulate counts as 2 FLOPs. Only matrix products are
//! counted; embeddings, norms, softmax and activations are ignored, as is
//! the vocabulary projection (it reuses the token table).

use std::fmt::Write as _;

use crate::config::{keep_count, RunConfig};
use crate::error::{config, Result};

/// Self-attention block over `l` tokens: QKVO projections, the two
/// attention products and the FFN.
pub fn layer_flops(l: u64, d: u64, ffn_mult: u64) -> u64 {
    2 * (4 * l * d * d) + 2 * (2 * l * l * d) + 2 * (2 * l * d * ffn_mult * d)
}

/// Self-attention over `q` queries, cross-attention into `kv` memory
/// tokens, then the FFN.
pub fn cross_layer_flops(q: u64, kv: u64, d: u64, ffn_mult: u64) -> u64 {
    let self_attn = 2 * (4 * q * d * d + 2 * q * q * d);
    let cross = 2 * (2 * q * d * d + 2 * kv * d * d + 2 * q * kv * d);
    let ffn = 2 * (2 * q * d * ffn_mult * d);
    self_attn + cross + ffn
}

/// Three-layer scorer `2d → h → h → 1` applied to `n` patches.
pub fn tsps_flops(n: u64, d: u64, hidden: u64) -> u64 {
    2 * n * (2 * d * hidden + hidden * hidden + hidden)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopsBreakdown {
    pub vit_pre_k: u64,
    pub vit_post_k: u64,
    pub tsps: u64,
    pub pad: u64,
    pub text: u64,
    pub fusion: u64,
    pub decoder: u64,
    pub heads: u64,
    pub total: u64,
}

impl FlopsBreakdown {
    pub fn stages(&self) -> [(&'static str, u64); 8] {
        [
            ("vit_pre_k", self.vit_pre_k),
            ("vit_post_k", self.vit_post_k),
            ("tsps", self.tsps),
            ("pad", self.pad),
            ("text", self.text),
            ("fusion", self.fusion),
            ("decoder", self.decoder),
            ("heads", self.heads),
        ]
    }

    fn with_total(mut self) -> Self {
        self.total = self.stages().iter().map(|(_, v)| v).sum();
        self
    }
}

/// Sequence lengths seen by each stage for one image-text pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeline {
    pub n_img: u64,
    pub post_len: u64,
    pub summary_len: u64,
    pub n_txt: u64,
    pub tsps_patches: u64,
}

pub fn timeline(cfg: &RunConfig, n_img: usize, n_txt: usize) -> Result<Timeline> {
    if n_img < 2 || n_txt < 1 {
        return Err(config(format!(
            "need at least one patch and one text token, got {n_img} image slots and {n_txt} text tokens"
        )));
    }
    if cfg.k < 1 || cfg.k >= cfg.vit_layers {
        return Err(config(format!("kpe.k={} must satisfy 1 <= k < {}", cfg.k, cfg.vit_layers)));
    }
    let n = n_img - 1;
    let (post_len, u, tsps_patches) = if cfg.kpe_enabled {
        let u = keep_count(n, cfg.alpha);
        if u == 0 {
            return Err(config(format!("kpe.alpha={} keeps no patch out of {n}", cfg.alpha)));
        }
        let fusion = (cfg.fusion_token && u < n) as usize;
        (1 + u + fusion, u, n)
    } else {
        (n_img, n, 0)
    };
    let summary_len = if cfg.tpa_enabled {
        let s = keep_count(u, cfg.gamma);
        if s == 0 {
            return Err(config(format!("tpa.gamma={} keeps no seed out of {u}", cfg.gamma)));
        }
        1 + s
    } else {
        post_len
    };
    Ok(Timeline {
        n_img: n_img as u64,
        post_len: post_len as u64,
        summary_len: summary_len as u64,
        n_txt: n_txt as u64,
        tsps_patches: tsps_patches as u64,
    })
}

/// FLOPs for one pair with `n_img` image slots (incl. [CLS]) and `n_txt`
/// text tokens (incl. [CLS]); the decoder generates `n_txt` tokens.
pub fn model_flops(cfg: &RunConfig, n_img: usize, n_txt: usize) -> Result<FlopsBreakdown> {
    let t = timeline(cfg, n_img, n_txt)?;
    let (d, f) = (cfg.d as u64, cfg.ffn_mult as u64);
    let k = cfg.k as u64;
    let post_layers = (cfg.vit_layers - cfg.k) as u64;
    let fused_len = t.summary_len + t.n_txt;
    let pad = if cfg.tpa_enabled { cfg.pad_layers as u64 * cross_layer_flops(t.summary_len, t.post_len, d, f) } else { 0 };
    Ok(FlopsBreakdown {
        vit_pre_k: k * layer_flops(t.n_img, d, f),
        vit_post_k: post_layers * layer_flops(t.post_len, d, f),
        tsps: tsps_flops(t.tsps_patches, d, cfg.tsps_hidden as u64),
        pad,
        text: cfg.text_layers as u64 * layer_flops(t.n_txt, d, f),
        fusion: cfg.fusion_layers as u64 * layer_flops(fused_len, d, f),
        decoder: cfg.decoder_layers as u64 * layer_flops(fused_len + t.n_txt, d, f),
        // Two contrastive projections and the two-layer matching head.
        heads: 2 * (2 * d * d) + 2 * (d * d + d),
        total: 0,
    }
    .with_total())
}

/// The same stacks with every sequence at full length and no scorer or
/// abstraction decoder.
pub fn baseline_config(cfg: &RunConfig) -> RunConfig {
    RunConfig { kpe_enabled: false, tpa_enabled: false, ..cfg.clone() }
}

pub fn baseline_flops(cfg: &RunConfig, n_img: usize, n_txt: usize) -> Result<FlopsBreakdown> {
    model_flops(&baseline_config(cfg), n_img, n_txt)
}

/// Image slots (patches + [CLS]) for a square resolution.
pub fn image_slots(image_size: usize, patch_size: usize) -> Result<usize> {
    if patch_size == 0 || image_size % patch_size != 0 {
        return Err(config(format!("image size {image_size} is not divisible by patch size {patch_size}")));
    }
    Ok((image_size / patch_size).pow(2) + 1)
}

/// `key=value` report of a breakdown against its baseline.
pub fn report(cfg: &RunConfig, n_img: usize, n_txt: usize) -> Result<String> {
    let bus = model_flops(cfg, n_img, n_txt)?;
    let base = baseline_flops(cfg, n_img, n_txt)?;
    let t = timeline(cfg, n_img, n_txt)?;
    let mut out = String::new();
    let _ = writeln!(out, "n_img={n_img}\nn_txt={n_txt}\nk={}\nalpha={}\ngamma={}", cfg.k, cfg.alpha, cfg.gamma);
    let _ = writeln!(out, "post_len={}\nsummary_len={}", t.post_len, t.summary_len);
    for (name, v) in bus.stages() {
        let _ = writeln!(out, "{name}={v}");
    }
    let _ = writeln!(out, "total={}", bus.total);
    let _ = writeln!(out, "baseline_total={}", base.total);
    let _ = writeln!(out, "total_gflops={:.4}", bus.total as f64 / 1e9);
    let _ = writeln!(out, "baseline_gflops={:.4}", base.total as f64 / 1e9);
    let _ = writeln!(out, "ratio={:.6}", bus.total as f64 / base.total as f64);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub k: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub image_size: usize,
    pub total: u64,
    pub baseline: u64,
}

impl SweepPoint {
    pub fn ratio(&self) -> f64 {
        self.total as f64 / self.baseline as f64
    }
}

/// Cartesian sweep; points whose config is invalid are skipped.
pub fn sweep(base: &RunConfig, ks: &[usize], alphas: &[f64], gammas: &[f64], sizes: &[usize], n_txt: usize) -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for &image_size in sizes {
        for &k in ks {
            for &alpha in alphas {
                for &gamma in gammas {
                    let cfg = RunConfig { k, alpha, gamma, image_size, ..base.clone() };
                    let Ok(n_img) = image_slots(image_size, cfg.patch_size) else {
                        continue;
                    };
                    let (Ok(bus), Ok(b)) = (model_flops(&cfg, n_img, n_txt), baseline_flops(&cfg, n_img, n_txt)) else {
                        continue;
                    };
                    out.push(SweepPoint { k, alpha, gamma, image_size, total: bus.total, baseline: b.total });
                }
            }
        }
    }
    out
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("k,alpha,gamma,image_size,total,baseline,ratio\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{},{},{},{:.6}", p.k, p.alpha, p.gamma, p.image_size, p.total, p.baseline, p.ratio());
    }
    out
}

/// Selection location / keep ratio grid with the published FLOPs (G) at
/// γ = 0.2, ordered by the published value.
pub const PUBLISHED_LOCATION_SWEEP: [(usize, f64, f64); 9] = [
    (4, 0.4, 16.22),
    (6, 0.4, 17.24),
    (4, 0.7, 18.53),
    (6, 0.7, 19.03),
    (8, 0.4, 19.09),
    (4, 0.9, 20.04),
    (8, 0.7, 21.65),
    (6, 0.9, 21.77),
    (8, 0.9, 23.24),
];
