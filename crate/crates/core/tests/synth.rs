use patchsum::objectives::bbox_to_patch_labels;
use patchsum::schedule::auc;
use patchsum::synth::{
    decode_shard, encode_shard, generate, generate_with_shapes, read_shard, write_shard, Color, SampleKind, ShapeKind,
    SynthSample, Vocab, SHARD_MAGIC,
};
use patchsum::Error;

const SIZE: u32 = 32;
const PATCH: usize = 8;

#[test]
fn same_seed_same_sample() {
    for seed in [0, 1, 42, u64::MAX] {
        for kind in [SampleKind::Paired, SampleKind::Region] {
            assert_eq!(generate(seed, kind, SIZE).unwrap(), generate(seed, kind, SIZE).unwrap());
        }
    }
    assert_ne!(generate(1, SampleKind::Paired, SIZE).unwrap(), generate(2, SampleKind::Paired, SIZE).unwrap());
}

#[test]
fn region_box_is_tight_and_covers_every_touched_patch() {
    let g = SIZE as usize / PATCH;
    for seed in 0..300 {
        let (s, shapes) = generate_with_shapes(seed, SampleKind::Region, SIZE).unwrap();
        let b = s.bbox.unwrap();
        let target = shapes.iter().find(|sh| sh.bbox() == b).expect("box belongs to a rendered shape");
        assert_eq!(s.label, format!("{} {}", target.color.name(), target.kind.name()));

        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        let mut touched = vec![false; g * g];
        for py in 0..SIZE {
            for px in 0..SIZE {
                if target.contains(px, py) {
                    assert_eq!(s.pixel(px as usize, py as usize), target.rgb);
                    (x0, y0, x1, y1) = (x0.min(px), y0.min(py), x1.max(px + 1), y1.max(py + 1));
                    touched[(py as usize / PATCH) * g + px as usize / PATCH] = true;
                }
            }
        }
        assert_eq!((x0, y0, x1 - x0, y1 - y0), (target.x, target.y, target.w, target.h), "seed {seed}");
        let y = bbox_to_patch_labels(&b, SIZE as usize, PATCH).unwrap();
        for (i, &t) in touched.iter().enumerate() {
            if t {
                assert_eq!(y.labels[i], 1, "seed {seed} patch {i}");
            }
        }
    }
}

#[test]
fn caption_colors_match_the_rendered_pixels() {
    let vocab = Vocab::standard();
    for seed in 0..1000 {
        let (s, shapes) = generate_with_shapes(seed, SampleKind::Paired, SIZE).unwrap();
        assert!(s.caption.len() <= 12);
        let text = vocab.decode(&s.caption);
        let words: Vec<&str> = text.split(' ').collect();
        let mut described = 0;
        for w in words.windows(2) {
            let Some(color) = Color::ALL.into_iter().find(|c| c.name() == w[0]) else {
                continue;
            };
            let kind = ShapeKind::ALL.into_iter().find(|k| k.name() == w[1]).expect("color is followed by a shape");
            let shape =
                shapes.iter().find(|sh| sh.color == color).unwrap_or_else(|| panic!("seed {seed}: no {} shape", color.name()));
            assert_eq!(shape.kind, kind, "seed {seed}: {text}");
            for py in shape.y..shape.y + shape.h {
                for px in shape.x..shape.x + shape.w {
                    if shape.contains(px, py) {
                        assert_eq!(Color::of_pixel(s.pixel(px as usize, py as usize)), Some(color), "seed {seed}");
                    }
                }
            }
            described += 1;
        }
        assert!((1..=2).contains(&described), "seed {seed}: {text}");
        assert_eq!(described == 2, shapes.len() > 1);
    }
}

fn patch_features(s: &SynthSample, patch: usize) -> Vec<f64> {
    let g = s.width as usize / PATCH;
    let (r, c) = (patch / g, patch % g);
    let mut out = Vec::with_capacity(PATCH * PATCH * 3 + 1);
    for y in r * PATCH..(r + 1) * PATCH {
        for x in c * PATCH..(c + 1) * PATCH {
            out.extend(s.pixel(x, y).map(|v| v as f64 / 255.0));
        }
    }
    out.push(1.0);
    out
}

/// Rows of (color slot, raw patch pixels, label): one linear model per
/// queried color, so the probe sees the pixels and which shape was asked for.
fn probe_rows(seeds: std::ops::Range<u64>) -> Vec<(usize, Vec<f64>, bool)> {
    let mut rows = Vec::new();
    for seed in seeds {
        let s = generate(seed, SampleKind::Region, SIZE).unwrap();
        let color = s.label.split(' ').next().unwrap();
        let slot = Color::ALL.iter().position(|c| c.name() == color).unwrap();
        let y = bbox_to_patch_labels(&s.bbox.unwrap(), SIZE as usize, PATCH).unwrap();
        for (i, &l) in y.labels.iter().enumerate() {
            rows.push((slot, patch_features(&s, i), l == 1));
        }
    }
    rows
}

#[test]
fn region_labels_are_learnable_by_a_pixel_probe() {
    let train = probe_rows(0..500);
    let test = probe_rows(10_000..10_500);
    let dim = train[0].1.len();
    let mut w = vec![vec![0.0f64; dim]; Color::ALL.len()];
    let lr = 0.5;
    for _ in 0..300 {
        let mut grad = vec![vec![0.0f64; dim]; Color::ALL.len()];
        let mut counts = [0usize; 6];
        for (slot, x, y) in &train {
            let z: f64 = w[*slot].iter().zip(x).map(|(a, b)| a * b).sum();
            let err = 1.0 / (1.0 + (-z).exp()) - *y as u8 as f64;
            for (g, xi) in grad[*slot].iter_mut().zip(x) {
                *g += err * xi;
            }
            counts[*slot] += 1;
        }
        for (c, (wc, gc)) in w.iter_mut().zip(&grad).enumerate() {
            for (wi, gi) in wc.iter_mut().zip(gc) {
                *wi -= lr * gi / counts[c].max(1) as f64;
            }
        }
    }
    let scores: Vec<f64> = test.iter().map(|(s, x, _)| w[*s].iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    let labels: Vec<bool> = test.iter().map(|r| r.2).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!(a > 0.95, "probe AUC {a}");
}

fn samples(n: u64) -> Vec<SynthSample> {
    (0..n).map(|i| generate(i, if i % 2 == 0 { SampleKind::Paired } else { SampleKind::Region }, SIZE).unwrap()).collect()
}

#[test]
fn shard_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let original = samples(10);
    write_shard(&path, &original).unwrap();
    assert_eq!(read_shard(&path).unwrap(), original);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], SHARD_MAGIC);
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 10);
}

#[test]
fn empty_shard_is_valid() {
    let bytes = encode_shard(&[]).unwrap();
    assert_eq!(bytes.len(), 10);
    assert!(decode_shard(&bytes).unwrap().is_empty());
}

#[test]
fn corrupt_header_is_a_format_error() {
    let bytes = encode_shard(&samples(3)).unwrap();
    for at in [0, 3, 4, 5] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        assert!(matches!(decode_shard(&bad), Err(Error::Format { .. })), "byte {at}");
    }
}

#[test]
fn truncation_reports_the_byte_offset() {
    let bytes = encode_shard(&samples(3)).unwrap();
    for cut in [2, 9, 20, bytes.len() / 2, bytes.len() - 1] {
        match decode_shard(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => {
                assert!(offset <= cut as u64, "cut {cut} offset {offset}")
            }
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_shard(&long), Err(Error::Format { offset, .. }) if offset == bytes.len() as u64));
}
