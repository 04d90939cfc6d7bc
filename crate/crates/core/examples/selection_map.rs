//! Shows, on the patch grid, which patches extraction keeps and which become
//! abstraction seeds, for an untrained model at two saliency mixes.

use patchsum::config::RunConfig;
use patchsum::model::Model;
use patchsum::objectives::bbox_to_patch_labels;
use patchsum::summarizer::tpa_select;
use patchsum::synth::{generate, SampleKind};

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig { image_size: 64, ..RunConfig::desk() };
    let model = Model::new(&cfg)?.frozen()?;
    let g = cfg.grid_side();
    let sample = generate(3, SampleKind::Region, cfg.image_size as u32)?;
    let labels = bbox_to_patch_labels(&sample.bbox.expect("region sample"), cfg.image_size, cfg.patch_size)?;
    println!("query: {}   (# = patch inside the box)", sample.label);

    let text = model.text_encode(&sample.caption)?;
    for beta in [0.0, 0.8] {
        let vision = model.vit_forward(&sample.image(), &text, beta)?;
        let seeds = tpa_select(&vision.seq, &vision.saliency.a_dot, cfg.gamma)?;
        let kept: Vec<i64> = vision.seq.grid_indices[1..].to_vec();
        println!("\nβ = {beta}: K kept by extraction, S abstraction seed, . dropped");
        for r in 0..g {
            let mut line = String::new();
            for c in 0..g {
                let i = (r * g + c) as i64;
                line.push(if seeds.grid_indices[1..].contains(&i) {
                    'S'
                } else if kept.contains(&i) {
                    'K'
                } else {
                    '.'
                });
            }
            line.push_str("   ");
            for c in 0..g {
                line.push(if labels.labels[r * g + c] == 1 { '#' } else { '.' });
            }
            println!("{line}");
        }
    }
    Ok(())
}
