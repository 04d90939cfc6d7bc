//! Finite-difference checks: every differentiable tensor operation at a few
//! random points, then a handful of model parameters through the full
//! training loss.

use patchsum::config::{RunConfig, TrainConfig};
use patchsum::gradcheck::{model_config, model_gradcheck, ModelProbe};
use patchsum::model::Model;
use patchsum::schedule::batches_for_step;
use patchsum::tensor::gradcheck::{op_suite, GradCheckConfig};

fn main() -> anyhow::Result<()> {
    let cfg = GradCheckConfig::default();
    let ops = op_suite(2, cfg)?;
    let worst = ops.iter().max_by(|a, b| a.report.max_rel_error().total_cmp(&b.report.max_rel_error())).expect("ops exist");
    println!(
        "{} op checks, {} failing; worst {} at point {}: {:.2e}",
        ops.len(),
        ops.iter().filter(|r| !r.report.passes(cfg.tolerance)).count(),
        worst.op,
        worst.point,
        worst.report.max_rel_error()
    );

    let run = RunConfig::desk();
    let t = TrainConfig { batch_d: 2, batch_o: 2, ..TrainConfig::desk() };
    let model = Model::new(&run)?;
    let (region, paired) = batches_for_step(run.seed, 0, &t, &run)?;
    let probe = ModelProbe {
        region: &region,
        paired: &paired,
        beta: 0.4,
        mlm_rate: t.mlm_rate,
        seed: run.seed,
        rng_step: 0,
        per_param: 1,
    };
    let mcfg = model_config();
    let checks = model_gradcheck(&model, &probe, mcfg)?;
    for c in checks.iter().filter(|c| c.name.contains("tsps") || c.name.starts_with("heads")) {
        println!(
            "{:<40} {:.2e} {}",
            c.name,
            c.report.max_rel_error(),
            if c.report.passes(mcfg.tolerance) { "ok" } else { "FAIL" }
        );
    }
    let failing = checks.iter().filter(|c| !c.report.passes(mcfg.tolerance)).count();
    println!("{} parameter tensors checked, {failing} failing", checks.len());
    Ok(())
}
