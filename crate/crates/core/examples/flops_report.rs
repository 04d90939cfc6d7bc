//! Analytical FLOPs at full scale: the per-stage breakdown, the reduction
//! against the unpruned pipeline, the selection-location grid next to the
//! published figures, and a resolution sweep.

use patchsum::config::RunConfig;
use patchsum::flops::{baseline_flops, image_slots, model_flops, sweep, PUBLISHED_LOCATION_SWEEP};

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::full();
    let bus = model_flops(&cfg, 197, 40)?;
    let base = baseline_flops(&cfg, 197, 40)?;
    println!("{:<12} {:>10} {:>10}", "stage", "GFLOPs", "baseline");
    for ((name, v), (_, b)) in bus.stages().iter().zip(base.stages()) {
        println!("{name:<12} {:>10.3} {:>10.3}", *v as f64 / 1e9, b as f64 / 1e9);
    }
    println!(
        "{:<12} {:>10.3} {:>10.3}   ratio {:.3}",
        "total",
        bus.total as f64 / 1e9,
        base.total as f64 / 1e9,
        bus.total as f64 / base.total as f64
    );

    println!("\nselection location grid at γ = 0.2 (published order):");
    println!("{:>3} {:>5} {:>10} {:>10}", "k", "α", "GFLOPs", "published");
    for (k, alpha, published) in PUBLISHED_LOCATION_SWEEP {
        let total = model_flops(&RunConfig { k, alpha, ..cfg.clone() }, 197, 40)?.total;
        println!("{k:>3} {alpha:>5} {:>10.2} {published:>10.2}", total as f64 / 1e9);
    }

    println!("\nresolution sweep (k=6, α=0.7, γ=0.2):");
    for p in sweep(&cfg, &[6], &[0.7], &[0.2], &[224, 288, 384, 512], 40) {
        println!(
            "{:>4}²  {:>4} slots  {:>8.2} G vs {:>8.2} G unpruned",
            p.image_size,
            image_slots(p.image_size, cfg.patch_size)?,
            p.total as f64 / 1e9,
            p.baseline as f64 / 1e9
        );
    }
    Ok(())
}
