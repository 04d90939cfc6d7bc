//! Renders a few synthetic samples as text, writes them to a shard file and
//! reads them back.

use patchsum::synth::{generate, read_shard, write_shard, Color, SampleKind, Vocab};

fn main() -> anyhow::Result<()> {
    let vocab = Vocab::standard();
    let samples = (0..4)
        .map(|i| generate(i, if i % 2 == 0 { SampleKind::Paired } else { SampleKind::Region }, 32))
        .collect::<Result<Vec<_>, _>>()?;

    for s in &samples[..2] {
        println!("seed {}: \"{}\" box {:?}", s.seed, vocab.decode(&s.caption), s.bbox);
        for y in (0..s.height as usize).step_by(2) {
            let row: String = (0..s.width as usize)
                .map(|x| match Color::of_pixel(s.pixel(x, y)) {
                    Some(c) => c.name().chars().next().unwrap(),
                    None => '.',
                })
                .collect();
            println!("  {row}");
        }
    }

    let path = std::env::temp_dir().join("patchsum-example-shard.bin");
    write_shard(&path, &samples)?;
    let back = read_shard(&path)?;
    println!(
        "wrote and re-read {} samples ({} bytes), identical: {}",
        back.len(),
        std::fs::metadata(&path)?.len(),
        back == samples
    );
    std::fs::remove_file(&path)?;
    Ok(())
}
