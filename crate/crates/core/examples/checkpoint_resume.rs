//! Trains a few steps, checkpoints with optimizer state, resumes in a fresh
//! model and confirms the continuation matches an uninterrupted run bit for
//! bit.

use patchsum::checkpoint;
use patchsum::config::{RunConfig, TrainConfig};
use patchsum::model::Model;
use patchsum::schedule::{batches_for_step, train, train_step, TrainState};

/// Steps by hand up to `stop`; the schedule still follows `t.steps`.
fn run_to(model: &Model, state: &mut TrainState, t: &TrainConfig, stop: usize) -> anyhow::Result<()> {
    while state.step < stop {
        let (region, paired) = batches_for_step(model.cfg.seed, state.step, t, &model.cfg)?;
        train_step(model, &region, &paired, state, t)?;
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::desk();
    let t = TrainConfig { steps: 6, batch_d: 2, batch_o: 2, ..TrainConfig::desk() };

    let straight = Model::new(&cfg)?;
    let mut s = TrainState::new(straight.params());
    train(&straight, &mut s, &t, |_, _| Ok(()))?;

    let first = Model::new(&cfg)?;
    let mut s1 = TrainState::new(first.params());
    run_to(&first, &mut s1, &t, 3)?;
    let path = std::env::temp_dir().join("patchsum-example-ckpt.bin");
    checkpoint::save(&path, &first, Some(&s1))?;
    println!("saved step {} to {} ({} bytes)", s1.step, path.display(), std::fs::metadata(&path)?.len());

    let resumed = Model::new(&cfg)?;
    let mut s2 = checkpoint::load(&path, &resumed)?.expect("optimizer state saved");
    train(&resumed, &mut s2, &t, |r, _| {
        println!("resumed step {} total loss {:.6}", r.step, r.losses.total);
        Ok(())
    })?;
    std::fs::remove_file(&path)?;

    let same = straight.params().snapshot() == resumed.params().snapshot() && s == s2;
    println!("matches the uninterrupted run: {same}");
    Ok(())
}
