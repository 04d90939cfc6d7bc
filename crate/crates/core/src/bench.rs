//! Wall-clock latency of the inference forward
//! (text → ViT with extraction → abstraction → fusion).

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::SynthSample;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    /// Median batch latency.
    pub latency_ms: f64,
    /// Items per second at the median latency.
    pub throughput: f64,
    pub iters: usize,
    pub batch: usize,
    /// Every timed batch latency, in run order.
    pub samples_ms: Vec<f64>,
    /// `key=value` description of the benchmarked configuration.
    pub config: String,
}

impl BenchResult {
    pub fn to_text(&self) -> String {
        format!(
            "latency_ms={:.6}\nthroughput={:.3}\niters={}\nbatch={}\n{}",
            self.latency_ms, self.throughput, self.iters, self.batch, self.config
        )
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One inference forward over a batch.
pub fn forward_batch(model: &Model, batch: &[SynthSample], beta: f64) -> Result<()> {
    for s in batch {
        let text = model.text_encode(&s.caption)?;
        let vision = model.vit_forward(&s.image(), &text, beta)?;
        let summary = model.summarize(&vision)?;
        std::hint::black_box(model.fuse(&summary, &text)?);
    }
    Ok(())
}

/// Median latency over `iters` timed runs after `warmup` untimed ones.
/// `model` should be frozen so no autodiff graph is recorded.
pub fn bench_forward(model: &Model, batch: &[SynthSample], beta: f64, iters: usize, warmup: usize) -> Result<BenchResult> {
    Ok(bench_paired(&[model], batch, beta, iters, warmup)?.remove(0))
}

/// Benchmarks several models on the same batch with their timed runs
/// interleaved (the starting model rotates each round), so slow drift in
/// machine load hits every model alike. One result per model, in order.
pub fn bench_paired(
    models: &[&Model],
    batch: &[SynthSample],
    beta: f64,
    iters: usize,
    warmup: usize,
) -> Result<Vec<BenchResult>> {
    let res = timer_resolution();
    if res > Duration::from_micros(1) {
        return Err(Error::Environment(format!("timer resolution {res:?} is coarser than 1µs")));
    }
    if iters == 0 || batch.is_empty() || models.is_empty() {
        return Err(crate::error::config("benchmark needs at least one iteration, one sample and one model"));
    }
    for _ in 0..warmup {
        for model in models {
            forward_batch(model, batch, beta)?;
        }
    }
    let mut samples_ms = vec![Vec::with_capacity(iters); models.len()];
    for round in 0..iters {
        for j in 0..models.len() {
            let m = (round + j) % models.len();
            let start = Instant::now();
            forward_batch(models[m], batch, beta)?;
            samples_ms[m].push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(models
        .iter()
        .zip(samples_ms)
        .map(|(model, samples_ms)| {
            let latency_ms = median(&samples_ms);
            let c = &model.cfg;
            BenchResult {
                latency_ms,
                throughput: batch.len() as f64 / (latency_ms / 1e3),
                iters,
                batch: batch.len(),
                samples_ms,
                config: format!(
                    "image_size={}\npatch_size={}\nd={}\nk={}\nalpha={}\ngamma={}\nkpe.enabled={}\ntpa.enabled={}\nbeta={beta}\n",
                    c.image_size, c.patch_size, c.d, c.k, c.alpha, c.gamma, c.kpe_enabled, c.tpa_enabled
                ),
            }
        })
        .collect())
}
