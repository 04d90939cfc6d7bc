//! A short training run on synthetic data, printing the five losses, the
//! PTM moving average and β as training proceeds.
//!
//! `cargo run --release --example train_smoke -- 200` runs the full smoke
//! length; the default is 40 steps.

use patchsum::config::{RunConfig, TrainConfig};
use patchsum::model::Model;
use patchsum::schedule::{held_out, ptm_auc, train, TrainState};

fn main() -> anyhow::Result<()> {
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(40);
    let cfg = RunConfig::desk();
    let t = TrainConfig { steps, ..TrainConfig::desk() };
    let model = Model::new(&cfg)?;
    let mut state = TrainState::new(model.params());

    println!("{:>5} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>5}", "step", "itc", "itm", "mlm", "prefix", "ptm", "ptm_ema", "β");
    train(&model, &mut state, &t, |r, _| {
        if r.step % 10 == 0 || r.step + 1 == steps {
            let [itc, itm, mlm, prefix, ptm] = r.losses.parts();
            println!(
                "{:>5} {itc:>7.4} {itm:>7.4} {mlm:>7.4} {prefix:>7.4} {ptm:>7.4} {:>8.4} {:>5.3}",
                r.step, r.ptm_ema, r.beta
            );
        }
        Ok(())
    })?;

    let (region, _) = held_out(cfg.seed, 100, &cfg)?;
    println!("held-out patch-label AUC of the selector: {:.4}", ptm_auc(&model, &region)?);
    Ok(())
}
