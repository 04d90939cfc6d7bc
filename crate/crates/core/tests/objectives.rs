use patchsum::objectives::{
    bbox_to_patch_labels, class_label_to_text, hard_negative_sample, itc_logits, itc_loss, itm_loss, mlm_loss, mlm_mask,
    prefix_lm_loss, ptm_loss, total_loss, total_loss_tensor, BoundingBox, PatchLabelMask,
};
use patchsum::synth::{Vocab, CLS, MASK, SEP};
use patchsum::tensor::Tensor;
use patchsum::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::constant(vec![rows, cols], data).unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mat(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

// ---- patch labels ---------------------------------------------------------------

/// Labels by scanning every pixel of every patch.
fn pixel_oracle(b: &BoundingBox, size: usize, patch: usize) -> Option<Vec<u8>> {
    let g = size / patch;
    let mut labels = vec![0u8; g * g];
    let mut any = false;
    for py in 0..size as i64 {
        for px in 0..size as i64 {
            if px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h {
                labels[(py as usize / patch) * g + px as usize / patch] = 1;
                any = true;
            }
        }
    }
    any.then_some(labels)
}

#[test]
fn labels_match_pixel_membership_for_every_box_on_small_grids() {
    let mut checked = 0usize;
    for g in 1..=8usize {
        for patch in 1..=3usize {
            let size = g * patch;
            let s = size as i64;
            for x in -2..=s {
                for y in -2..=s {
                    for w in 0..=s + 2 {
                        for h in 0..=s + 2 {
                            let b = BoundingBox::new(x, y, w, h);
                            let got = bbox_to_patch_labels(&b, size, patch);
                            match pixel_oracle(&b, size, patch) {
                                Some(expect) => assert_eq!(got.unwrap().labels, expect, "{b:?} on {size}/{patch}"),
                                None => assert!(matches!(got, Err(Error::Data(_))), "{b:?} on {size}/{patch}"),
                            }
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 1_000_000);
}

#[test]
fn label_examples() {
    let whole = bbox_to_patch_labels(&BoundingBox::new(0, 0, 224, 224), 224, 16).unwrap();
    assert_eq!(whole.positives(), 196);
    let corner = bbox_to_patch_labels(&BoundingBox::new(0, 0, 32, 32), 224, 16).unwrap();
    let on: Vec<usize> = (0..196).filter(|&i| corner.labels[i] == 1).collect();
    assert_eq!(on, [0, 1, 14, 15]);
    let dot = bbox_to_patch_labels(&BoundingBox::new(16, 16, 1, 1), 224, 16).unwrap();
    assert_eq!(dot.positives(), 1);
    assert_eq!(dot.labels[14 + 1], 1);
}

// ---- templates --------------------------------------------------------------------

#[test]
fn class_labels_fill_the_template() {
    let v = Vocab::with_words(&["dog"]);
    assert_eq!(class_label_to_text("dog", &v).unwrap(), v.encode("this is a dog").unwrap());
    assert_eq!(class_label_to_text("red square", &v).unwrap(), v.encode("this is a red square").unwrap());
    assert!(matches!(class_label_to_text("", &v), Err(Error::Data(_))));
    assert!(matches!(class_label_to_text("unicorn", &v), Err(Error::Data(_))));
}

// ---- PTM --------------------------------------------------------------------------

#[test]
fn ptm_values() {
    let half = Tensor::constant(vec![5], vec![0.5; 5]).unwrap();
    for labels in [vec![0, 0, 0, 0, 0], vec![1, 0, 1, 1, 0], vec![1; 5]] {
        let l = ptm_loss(&half, &PatchLabelMask { labels }).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }
    let a = Tensor::constant(vec![2], vec![0.9, 0.1]).unwrap();
    let l = ptm_loss(&a, &PatchLabelMask { labels: vec![1, 0] }).unwrap().item();
    assert!((l - -0.5 * (0.9f64.ln() + 0.9f64.ln())).abs() < 1e-12);
    assert!((l - 0.1054).abs() < 1e-4);

    let perfect = Tensor::constant(vec![3], vec![1.0, 0.0, 1.0]).unwrap();
    assert!(ptm_loss(&perfect, &PatchLabelMask { labels: vec![1, 0, 1] }).unwrap().item() <= 1e-7 * 20.0);

    let short = PatchLabelMask { labels: vec![1] };
    assert!(matches!(ptm_loss(&a, &short), Err(Error::Tensor(_))));
}

proptest! {
    #[test]
    fn ptm_is_non_negative(a in prop::collection::vec(0.0f64..=1.0, 1..30), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = a.iter().map(|_| rng.gen_range(0..=1)).collect();
        let t = Tensor::constant(vec![a.len()], a.clone()).unwrap();
        let l = ptm_loss(&t, &PatchLabelMask { labels }).unwrap().item();
        prop_assert!(l >= 0.0 && l.is_finite());
    }
}

// ---- ITC --------------------------------------------------------------------------

#[test]
fn identical_embeddings_give_log_batch() {
    for b in 2..=8 {
        let row: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.7).collect();
        let e = mat(b, 6, row.repeat(b));
        let l = itc_loss(&e, &e, &Tensor::scalar(1.0 / 0.07)).unwrap().item();
        assert!((l - (b as f64).ln()).abs() < 1e-9, "B={b}: {l}");
    }
}

#[test]
fn itc_matches_direct_softmax_cross_entropy() {
    let (img, txt) = (random(3, 5, 1), random(3, 5, 2));
    let inv_temp = 1.0 / 0.07;
    let got = itc_loss(&img, &txt, &Tensor::scalar(inv_temp)).unwrap().item();

    let unit = |t: &Tensor, r: usize| {
        let row = &t.data()[r * 5..(r + 1) * 5];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter().map(|v| v / n).collect::<Vec<_>>()
    };
    let s: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..3).map(|j| inv_temp * unit(&img, i).iter().zip(unit(&txt, j)).map(|(a, b)| a * b).sum::<f64>()).collect())
        .collect();
    let ce = |logits: &[f64], target: usize| {
        let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - logits[target]
    };
    let i2t: f64 = (0..3).map(|i| ce(&s[i], i)).sum::<f64>() / 3.0;
    let t2i: f64 = (0..3).map(|j| ce(&(0..3).map(|i| s[i][j]).collect::<Vec<_>>(), j)).sum::<f64>() / 3.0;
    assert!((got - 0.5 * (i2t + t2i)).abs() < 1e-10);
}

#[test]
fn itc_ignores_common_rescaling_and_vanishes_at_low_temperature() {
    let (img, txt) = (random(4, 6, 3), random(4, 6, 4));
    let it = Tensor::scalar(10.0);
    let base = itc_loss(&img, &txt, &it).unwrap().item();
    let scaled = itc_loss(&img.scale(7.5), &txt.scale(7.5), &it).unwrap().item();
    assert!((base - scaled).abs() < 1e-12);

    let eye = mat(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let mut last = f64::INFINITY;
    for inv_temp in [1.0, 10.0, 100.0, 1000.0] {
        let l = itc_loss(&eye, &eye, &Tensor::scalar(inv_temp)).unwrap().item();
        assert!(l <= last, "{l} after {last}");
        last = l;
    }
    assert!(last < 1e-12);

    assert!(matches!(itc_loss(&random(1, 4, 0), &random(1, 4, 1), &it), Err(Error::Config(_))));
}

// ---- ITM --------------------------------------------------------------------------

/// Reference categorical sampler: normalized probabilities, inverse CDF.
fn reference_negatives(sim: &[f64], b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..b)
        .map(|i| {
            let w: Vec<f64> = (0..b).map(|j| if j == i { 0.0 } else { sim[i * b + j].exp() }).collect();
            let total: f64 = w.iter().sum();
            let u: f64 = rng.gen();
            let mut cdf = 0.0;
            for (j, wj) in w.iter().enumerate() {
                if *wj == 0.0 {
                    continue;
                }
                cdf += wj / total;
                if u < cdf {
                    return j;
                }
            }
            (0..b).rev().find(|&j| j != i).unwrap()
        })
        .collect()
}

#[test]
fn seeded_negatives_match_a_reference_sampler() {
    let b = 4;
    for seed in 0..50 {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
        let sim: Vec<f64> = (0..b * b).map(|_| r.gen_range(-1.0..1.0)).collect();
        let got = hard_negative_sample(&sim, b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let expect = reference_negatives(&sim, b, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(got, expect, "seed {seed}");
        assert!(got.iter().enumerate().all(|(i, &j)| i != j));
    }
    assert!(matches!(hard_negative_sample(&[0.0], 1, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
}

#[test]
fn infinite_off_diagonal_falls_back_to_uniform() {
    let b = 4;
    let mut sim = vec![f64::NEG_INFINITY; b * b];
    for i in 0..b {
        sim[i * b + i] = 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = vec![0usize; b];
    for _ in 0..6000 {
        counts[hard_negative_sample(&sim, b, &mut rng).unwrap()[0]] += 1;
    }
    assert_eq!(counts[0], 0);
    for &c in &counts[1..] {
        assert!((c as f64 - 2000.0).abs() < 200.0, "{counts:?}");
    }
}

#[test]
fn dominant_entry_wins() {
    let mut sim = vec![0.0; 9];
    sim[1] = 60.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        assert_eq!(hard_negative_sample(&sim, 3, &mut rng).unwrap()[0], 1);
    }
}

#[test]
fn itm_is_sigmoid_bce() {
    let logits = mat(4, 1, vec![2.0, -1.0, 0.0, 0.5]);
    let labels = [1.0, 0.0, 1.0, 0.0];
    let got = itm_loss(&logits, &labels).unwrap().item();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let expect = -(sig(2.0).ln() + (1.0 - sig(-1.0)).ln() + sig(0.0).ln() + (1.0 - sig(0.5)).ln()) / 4.0;
    assert!((got - expect).abs() < 1e-12);
}

// ---- MLM --------------------------------------------------------------------------

#[test]
fn masking_matches_reference_bernoulli_draws() {
    let ids: Vec<usize> = std::iter::once(CLS).chain((0..20).map(|i| 4 + i % 19)).chain([SEP]).collect();
    for seed in 0..40 {
        let (masked, positions) = mlm_mask(&ids, 0.15, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut expect: Vec<usize> = (1..=20).filter(|_| rng.gen::<f64>() < 0.15).collect();
        if expect.is_empty() {
            expect.push(1 + rng.gen_range(0..20));
        }
        assert_eq!(positions, expect, "seed {seed}");
        for (i, (&m, &o)) in masked.iter().zip(&ids).enumerate() {
            assert_eq!(m, if expect.contains(&i) { MASK } else { o });
        }
    }
}

#[test]
fn masking_boundaries() {
    let ids = [4, 5, 6, 7];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        assert_eq!(mlm_mask(&ids, 0.0, &mut rng).unwrap().1.len(), 1);
    }
    assert_eq!(mlm_mask(&ids, 1.0, &mut rng).unwrap().0, vec![MASK; 4]);
    assert!(matches!(mlm_mask(&[CLS, SEP], 0.5, &mut rng), Err(Error::Data(_))));
}

#[test]
fn mlm_loss_is_mean_cross_entropy() {
    let logits = random(3, 7, 9);
    let targets = [2, 5, 0];
    let got = mlm_loss(&logits, &targets).unwrap().item();
    let expect: f64 = (0..3)
        .map(|r| {
            let row = &logits.data()[r * 7..(r + 1) * 7];
            row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[targets[r]]
        })
        .sum::<f64>()
        / 3.0;
    assert!((got - expect).abs() < 1e-12);
}

// ---- prefix LM ----------------------------------------------------------------------

#[test]
fn prefix_loss_anchors() {
    assert_eq!(prefix_lm_loss(&mat(3, 1, vec![0.4, -2.0, 7.0]), &[0, 0, 0]).unwrap().item(), 0.0);
    for v in [2, 23, 1000] {
        let l = prefix_lm_loss(&mat(4, v, vec![0.25; 4 * v]), &[0, 1, 0, 1]).unwrap().item();
        assert!((l - (v as f64).ln()).abs() < 1e-9);
    }
    let logits = mat(3, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.5, 0.5, -1.0]);
    let ce0 = (1f64.exp() + 2.0).ln() - 1.0;
    let ce1 = (2.0 + 2f64.exp()).ln() - 0.0;
    let ce2 = (2.0 * 0.5f64.exp() + (-1f64).exp()).ln() + 1.0;
    let got = prefix_lm_loss(&logits, &[0, 0, 2]).unwrap().item();
    assert!((got - (ce0 + ce1 + ce2) / 3.0).abs() < 1e-12);
    assert!(matches!(prefix_lm_loss(&mat(1, 3, vec![0.0; 3]), &[]), Err(Error::Data(_))));
}

// ---- totals -----------------------------------------------------------------------

#[test]
fn total_examples() {
    assert_eq!(total_loss(1.0, 1.0, 1.0, 1.0, 1.0).unwrap().total, 5.0);
    for (i, name) in ["itc", "itm", "mlm", "prefix", "ptm"].iter().enumerate() {
        let mut p = [0.5; 5];
        p[i] = f64::NAN;
        let err = total_loss(p[0], p[1], p[2], p[3], p[4]).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains(name)), "{err}");
    }
    assert!(total_loss(1.0, f64::INFINITY, 1.0, 1.0, 1.0).is_err());
}

proptest! {
    #[test]
    fn total_is_the_ordered_sum(p in prop::array::uniform5(0.0f64..10.0)) {
        let b = total_loss(p[0], p[1], p[2], p[3], p[4]).unwrap();
        prop_assert_eq!(b.total.to_bits(), ((((p[0] + p[1]) + p[2]) + p[3]) + p[4]).to_bits());
        let ts: Vec<Tensor> = p.iter().map(|&v| Tensor::scalar(v)).collect();
        let (t, tb) = total_loss_tensor([&ts[0], &ts[1], &ts[2], &ts[3], &ts[4]]).unwrap();
        prop_assert_eq!(t.item().to_bits(), b.total.to_bits());
        prop_assert_eq!(tb.parts(), p);
    }

    #[test]
    fn all_losses_are_finite_and_non_negative(seed in 0u64..500, b in 2usize..6) {
        let img = random(b, 8, seed);
        let txt = random(b, 8, seed + 1);
        let itc = itc_loss(&img, &txt, &Tensor::scalar(14.0)).unwrap().item();
        let sim = itc_logits(&img, &txt, &Tensor::scalar(14.0)).unwrap();
        let _ = hard_negative_sample(sim.data(), b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let labels: Vec<f64> = (0..2 * b).map(|i| (i % 2 == 0) as u8 as f64).collect();
        let itm = itm_loss(&random(2 * b, 1, seed + 2), &labels).unwrap().item();
        let mlm = mlm_loss(&random(3, 23, seed + 3), &[4, 9, 22]).unwrap().item();
        let prefix = prefix_lm_loss(&random(4, 23, seed + 4), &[5, 6, 7, SEP]).unwrap().item();
        let a = random(1, 16, seed + 5).sigmoid().reshape(vec![16]).unwrap();
        let ptm = ptm_loss(&a, &PatchLabelMask { labels: (0..16).map(|i| (i % 3 == 0) as u8).collect() }).unwrap().item();
        for v in [itc, itm, mlm, prefix, ptm] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
        let bundle = total_loss(itc, itm, mlm, prefix, ptm).unwrap();
        prop_assert_eq!(bundle.total, itc + itm + mlm + prefix + ptm);
    }
}
