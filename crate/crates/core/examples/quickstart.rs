//! One image-caption pair through the whole inference path, printing the
//! sequence length at every stage.

use patchsum::config::RunConfig;
use patchsum::model::Model;
use patchsum::synth::{generate, SampleKind};

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::desk();
    let model = Model::new(&cfg)?.frozen()?;
    let sample = generate(7, SampleKind::Paired, cfg.image_size as u32)?;
    println!("caption: {}", model.vocab().decode(&sample.caption));

    let text = model.text_encode(&sample.caption)?;
    println!("text:    {} slots ({} valid)", text.sequence.rows(), text.valid_len());

    let vision = model.vit_forward(&sample.image(), &text, 0.0)?;
    println!(
        "vision:  {} patches + [CLS] → {} slots after layer {} (α={}, fusion token: {})",
        cfg.num_patches(),
        vision.seq.len(),
        cfg.k,
        cfg.alpha,
        vision.seq.fused
    );

    let summary = model.summarize(&vision)?;
    println!("summary: {} slots (γ={}, seeds at {:?})", summary.len(), cfg.gamma, &summary.grid_indices[1..]);

    let fused = model.fuse(&summary, &text)?;
    println!("fusion:  {} slots of width {}", fused.states.rows(), fused.states.cols());

    let logit = model.itm_logit(&fused.joint_row()?)?;
    println!("match probability (untrained): {:.3}", logit.sigmoid().item());
    Ok(())
}
