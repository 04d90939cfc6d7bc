//! Wall-clock latency of the inference forward across keep ratios, measured
//! with interleaved iterations so machine load affects every ratio alike.

use patchsum::bench::bench_paired;
use patchsum::config::RunConfig;
use patchsum::model::Model;
use patchsum::synth::{generate, SampleKind};

fn main() -> anyhow::Result<()> {
    let base = RunConfig::desk();
    let batch = (0..4).map(|i| generate(100 + i, SampleKind::Paired, base.image_size as u32)).collect::<Result<Vec<_>, _>>()?;
    let alphas = [0.4, 0.55, 0.7, 0.85, 1.0];
    let models =
        alphas.iter().map(|&alpha| Model::new(&RunConfig { alpha, ..base.clone() })?.frozen()).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Model> = models.iter().collect();
    let results = bench_paired(&refs, &batch, 0.0, 100, 10)?;
    let reference = results.last().expect("at least one ratio").latency_ms;
    println!("{:>5} {:>6} {:>11} {:>11} {:>9}", "α", "kept", "median ms", "items/s", "relative");
    for (m, r) in models.iter().zip(&results) {
        println!(
            "{:>5} {:>6} {:>11.3} {:>11.1} {:>9.3}",
            m.cfg.alpha,
            m.cfg.kept_patches(),
            r.latency_ms,
            r.throughput,
            r.latency_ms / reference
        );
    }
    Ok(())
}
