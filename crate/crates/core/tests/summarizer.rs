use patchsum::config::{NormKind, RunConfig, TrainConfig};
use patchsum::model::Model;
use patchsum::params::ParamBuilder;
use patchsum::schedule::{batches_for_step, step_losses};
use patchsum::summarizer::{kpe_select, mix_saliency, pad_forward, top_k, tpa_select, Pad, PatchSequence, Tsps};
use patchsum::tensor::Tensor;
use patchsum::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec1(v: &[f64]) -> Tensor {
    Tensor::constant(vec![v.len()], v.to_vec()).unwrap()
}

fn states(rows: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::constant(vec![rows, d], (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Positions of the k largest values by full sort, ascending.
fn sort_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    top
}

fn distinct_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    perm.into_iter().map(|p| p as f64 / n as f64 + rng.gen_range(0.0..0.5 / n as f64)).collect()
}

// ---- TSPS -------------------------------------------------------------------

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (input, output) = (w.shape()[0], w.shape()[1]);
    (0..output).map(|j| b.data()[j] + (0..input).map(|i| x[i] * w.data()[i * output + j]).sum::<f64>()).collect()
}

#[test]
fn tsps_matches_an_independent_mlp() {
    let (d, hidden, n) = (6, 5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pb = ParamBuilder::new(&mut rng, 0.5);
    let tsps = Tsps::new(&mut pb, d, hidden).unwrap();
    let patches = states(n, d, 1);
    let t_cls = states(1, d, 2);
    let got = tsps.score(&patches, &t_cls).unwrap();
    for i in 0..n {
        let mut x = patches.data()[i * d..(i + 1) * d].to_vec();
        x.extend_from_slice(t_cls.data());
        let h: Vec<f64> = dense(&x, &tsps.l1.w.get(), &tsps.l1.b.get()).into_iter().map(gelu).collect();
        let h: Vec<f64> = dense(&h, &tsps.l2.w.get(), &tsps.l2.b.get()).into_iter().map(gelu).collect();
        let z = dense(&h, &tsps.l3.w.get(), &tsps.l3.b.get())[0];
        let expect = 1.0 / (1.0 + (-z).exp());
        assert!((got.data()[i] - expect).abs() < 1e-12, "{} vs {expect}", got.data()[i]);
    }
}

#[test]
fn tsps_scores_identical_patches_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pb = ParamBuilder::new(&mut rng, 0.3);
    let tsps = Tsps::new(&mut pb, 4, 8).unwrap();
    let row = states(1, 4, 9);
    let two = Tensor::concat_rows(&[&row, &row]).unwrap();
    let s = tsps.score(&two, &states(1, 4, 10)).unwrap();
    assert_eq!(s.data()[0], s.data()[1]);
}

// ---- mixing -----------------------------------------------------------------

#[test]
fn mixing_examples() {
    let a = vec1(&[0.2, 0.8]);
    let p = vec1(&[0.5, 0.5]);
    assert_eq!(mix_saliency(&a, &p, 0.5, NormKind::MinMax).unwrap().data(), &[0.25, 0.75]);

    let a = vec1(&[0.3, 0.1, 0.9, 0.4]);
    let p = vec1(&[0.05, 0.4, 0.2, 0.35]);
    let fp = p.minmax_normalize().unwrap();
    let fa = a.minmax_normalize().unwrap();
    assert_eq!(mix_saliency(&a, &p, 0.0, NormKind::MinMax).unwrap().data(), fp.data());
    assert_eq!(mix_saliency(&a, &p, 1.0, NormKind::MinMax).unwrap().data(), fa.data());

    let one = mix_saliency(&vec1(&[0.7]), &vec1(&[0.2]), 0.3, NormKind::MinMax).unwrap();
    assert!((one.data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn no_gradient_reaches_scores_at_zero_beta() {
    let a = Tensor::param(vec![3], vec![0.2, 0.5, 0.9]).unwrap();
    let p = Tensor::param(vec![3], vec![0.1, 0.7, 0.3]).unwrap();
    let w = vec1(&[1.0, -2.0, 0.5]);
    mix_saliency(&a, &p, 0.0, NormKind::MinMax).unwrap().mul(&w).unwrap().sum().backward().unwrap();
    assert!(a.grad_or_zeros().iter().all(|&g| g == 0.0));
    assert!(p.grad_or_zeros().iter().any(|&g| g != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn selection_is_invariant_to_positive_affine_score_maps(
        seed in 0u64..10_000,
        n in 3usize..40,
        c in 0.01f64..100.0,
        b in -5.0f64..5.0,
        beta in 0.05f64..=1.0,
        alpha in 0.1f64..=1.0,
    ) {
        let a = distinct_scores(n, seed);
        let p = distinct_scores(n, seed + 1);
        let mapped: Vec<f64> = a.iter().map(|v| c * v + b).collect();
        let m1 = mix_saliency(&vec1(&a), &vec1(&p), beta, NormKind::MinMax).unwrap();
        let m2 = mix_saliency(&vec1(&mapped), &vec1(&p), beta, NormKind::MinMax).unwrap();
        let k = ((n as f64) * alpha + 1e-9).floor().max(1.0) as usize;
        // Rounding of the affine map can only matter for near-ties in ȧ.
        let mut sorted: Vec<f64> = m1.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let gap = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        prop_assume!(gap > 1e-9);
        prop_assert_eq!(top_k(m1.data(), k), top_k(m2.data(), k));
    }

    #[test]
    fn mixing_is_monotone_in_each_coordinate(
        seed in 0u64..10_000,
        n in 3usize..20,
        beta in 0.0f64..=1.0,
        frac in 0.01f64..0.99,
    ) {
        let a = distinct_scores(n, seed);
        let p = distinct_scores(n, seed + 7);
        let base = mix_saliency(&vec1(&a), &vec1(&p), beta, NormKind::MinMax).unwrap();
        // Raise an interior coordinate towards the max so min and max stay put.
        for (which, v) in [(0, &a), (1, &p)] {
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            let Some(i) = (0..n).find(|&i| v[i] > lo && v[i] < hi) else { continue };
            let mut up = v.clone();
            up[i] += frac * (hi - v[i]);
            let (na, np) = if which == 0 { (up.clone(), p.clone()) } else { (a.clone(), up.clone()) };
            let moved = mix_saliency(&vec1(&na), &vec1(&np), beta, NormKind::MinMax).unwrap();
            let weight = if which == 0 { beta } else { 1.0 - beta };
            if weight > 0.0 {
                prop_assert!(moved.data()[i] > base.data()[i]);
            } else {
                prop_assert_eq!(moved.data()[i], base.data()[i]);
            }
            for j in (0..n).filter(|&j| j != i) {
                prop_assert!((moved.data()[j] - base.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kpe_matches_the_sort_oracle(seed in 0u64..100_000, n in 1usize..=64, alpha in 0.01f64..=1.0) {
        let u = ((n as f64) * alpha + 1e-9).floor() as usize;
        prop_assume!(u > 0);
        let scores = distinct_scores(n, seed);
        let seq = PatchSequence::full(states(n + 1, 2, seed));
        let out = kpe_select(&seq, &vec1(&scores), alpha, false).unwrap();
        let got: Vec<usize> = out.grid_indices[1..].iter().map(|&g| g as usize).collect();
        prop_assert_eq!(got, sort_oracle(&scores, u));
    }

    #[test]
    fn tpa_matches_the_sort_oracle(seed in 0u64..100_000, n in 2usize..=64, keep in 0.05f64..=1.0, gamma in 0.01f64..=1.0) {
        let u = ((n as f64) * keep).ceil() as usize;
        let s = ((u as f64) * gamma + 1e-9).floor() as usize;
        prop_assume!(s > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid: Vec<i64> = (0..n as i64).collect();
        for i in (1..n).rev() {
            grid.swap(i, rng.gen_range(0..=i));
        }
        grid.truncate(u);
        grid.sort_unstable();
        let saliency = distinct_scores(n, seed + 3);
        let seq = PatchSequence {
            states: states(1 + u, 2, seed),
            grid_indices: std::iter::once(-1).chain(grid.iter().copied()).collect(),
            fused: false,
        };
        let out = tpa_select(&seq, &vec1(&saliency), gamma).unwrap();
        let retained: Vec<f64> = grid.iter().map(|&g| saliency[g as usize]).collect();
        let expect: Vec<i64> = sort_oracle(&retained, s).into_iter().map(|i| grid[i]).collect();
        prop_assert_eq!(&out.grid_indices[1..], &expect[..]);
    }
}

// ---- extraction ---------------------------------------------------------------

#[test]
fn kpe_examples() {
    let seq = PatchSequence::full(states(7, 3, 0));
    let out = kpe_select(&seq, &vec1(&[0.1, 0.9, 0.3, 0.8, 0.2, 0.7]), 0.5, false).unwrap();
    assert_eq!(out.grid_indices, vec![-1, 1, 3, 5]);
    // Kept rows are copied verbatim, [CLS] first.
    assert_eq!(&out.states.data()[..3], &seq.states.data()[..3]);
    assert_eq!(&out.states.data()[3..6], &seq.states.data()[6..9]);

    let all = kpe_select(&seq, &vec1(&[0.1, 0.9, 0.3, 0.8, 0.2, 0.7]), 1.0, true).unwrap();
    assert_eq!(all.grid_indices, seq.grid_indices);
    assert!(!all.fused);
    assert_eq!(all.states.data(), seq.states.data());

    let seq = PatchSequence::full(states(197, 2, 1));
    let out = kpe_select(&seq, &vec1(&distinct_scores(196, 4)), 0.7, true).unwrap();
    assert_eq!(out.patch_count(), 137);
    assert_eq!(out.len(), 1 + 137 + 1);

    let seq = PatchSequence::full(states(5, 2, 1));
    assert!(matches!(kpe_select(&seq, &vec1(&[0.1, 0.2, 0.3, 0.4]), 0.2, false), Err(Error::Config(_))));
}

#[test]
fn n16_half_keep_equals_brute_force_top8() {
    let scores = distinct_scores(16, 77);
    let seq = PatchSequence::full(states(17, 2, 5));
    let out = kpe_select(&seq, &vec1(&scores), 0.5, true).unwrap();
    let got: Vec<usize> = out.grid_indices[1..].iter().map(|&g| g as usize).collect();
    assert_eq!(got, sort_oracle(&scores, 8));
}

#[test]
fn fusion_token_is_the_weighted_mean_of_discarded_rows() {
    let seq = PatchSequence::full(states(5, 3, 8));
    let a = [0.9, 0.2, 0.7, 0.4];
    let out = kpe_select(&seq, &vec1(&a), 0.5, true).unwrap();
    let (w1, w3) = (0.2 + 1e-6, 0.4 + 1e-6);
    let row = |r: usize| &seq.states.data()[r * 3..(r + 1) * 3];
    let token = &out.states.data()[3 * 3..];
    for c in 0..3 {
        let expect = (w1 * row(2)[c] + w3 * row(4)[c]) / (w1 + w3);
        assert!((token[c] - expect).abs() < 1e-15);
    }
}

#[test]
fn discarded_tokens_get_gradient_only_through_the_fusion_token() {
    let n = 8;
    let a = vec1(&distinct_scores(n, 21));
    let kept = sort_oracle(a.data(), 4);
    for fusion in [false, true] {
        let x = Tensor::param(vec![n + 1, 3], states(n + 1, 3, 2).data().to_vec()).unwrap();
        let out = kpe_select(&PatchSequence::full(x.clone()), &a, 0.5, fusion).unwrap();
        let w = states(out.states.rows(), 3, 9);
        out.states.mul(&w).unwrap().sum().backward().unwrap();
        let g = x.grad_or_zeros();
        for i in 0..n {
            let row = &g[(i + 1) * 3..(i + 2) * 3];
            let nonzero = row.iter().any(|&v| v != 0.0);
            if kept.contains(&i) {
                assert!(nonzero, "kept patch {i} has no gradient");
            } else {
                assert_eq!(nonzero, fusion, "discarded patch {i}, fusion={fusion}");
            }
        }
    }
}

// ---- abstraction --------------------------------------------------------------

#[test]
fn tpa_examples() {
    let seq = PatchSequence {
        states: states(11, 2, 3),
        grid_indices: std::iter::once(-1).chain([0, 2, 3, 5, 8, 9, 11, 12, 14, 15]).collect(),
        fused: true,
    };
    let sal = distinct_scores(16, 31);
    let out = tpa_select(&seq, &vec1(&sal), 0.3).unwrap();
    let retained: Vec<f64> = seq.grid_indices[1..].iter().map(|&g| sal[g as usize]).collect();
    let expect: Vec<i64> = sort_oracle(&retained, 3).into_iter().map(|i| seq.grid_indices[i + 1]).collect();
    assert_eq!(&out.grid_indices[1..], &expect[..]);
    assert!(!out.fused);

    let all = tpa_select(&seq, &vec1(&sal), 1.0).unwrap();
    assert_eq!(all.grid_indices, seq.grid_indices);
    assert!(matches!(tpa_select(&seq, &vec1(&sal), 0.05), Err(Error::Config(_))));

    let seq =
        PatchSequence { states: states(138, 2, 3), grid_indices: std::iter::once(-1).chain(0..137).collect(), fused: false };
    assert_eq!(tpa_select(&seq, &vec1(&distinct_scores(137, 2)), 0.2).unwrap().patch_count(), 27);
}

fn pad(d: usize, seed: u64) -> Pad {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new(&mut rng, 0.2);
    Pad::new(&mut pb, 2, d, 2, 2).unwrap()
}

fn seeds(d: usize, s: usize) -> PatchSequence {
    PatchSequence { states: states(1 + s, d, 40), grid_indices: std::iter::once(-1).chain(0..s as i64).collect(), fused: false }
}

#[test]
fn summary_length_is_independent_of_resolution() {
    let (d, s) = (8, 3);
    let p = pad(d, 1);
    for n in [16, 64, 256, 576] {
        let full = PatchSequence::full(states(1 + n, d, n as u64));
        let out = pad_forward(&seeds(d, s), &full, &p).unwrap();
        assert_eq!(out.states.shape(), &[1 + s, d]);
        assert_eq!(out.grid_indices, seeds(d, s).grid_indices);
    }
    // Tensors have no zero extents, so "empty" means a sequence with no slots.
    let empty = PatchSequence { states: Tensor::zeros(vec![1, d]).unwrap(), grid_indices: vec![], fused: false };
    assert!(matches!(pad_forward(&seeds(d, s), &empty, &p), Err(Error::State(_))));
}

#[test]
fn zeroed_cross_values_reduce_to_self_attention_only() {
    let d = 8;
    let p = pad(d, 2);
    for b in &p.blocks {
        let v = &b.cross_attn.v;
        v.w.set_data(vec![0.0; v.w.numel()]).unwrap();
        v.b.set_data(vec![0.0; v.b.numel()]).unwrap();
    }
    let sd = seeds(d, 4);
    let out1 = pad_forward(&sd, &PatchSequence::full(states(17, d, 1)), &p).unwrap();
    let out2 = pad_forward(&sd, &PatchSequence::full(states(33, d, 2)), &p).unwrap();
    assert_eq!(out1.states.data(), out2.states.data());

    // Recompute without any memory: cross-attention contributes only its output bias.
    let mut x = sd.states.clone();
    for b in &p.blocks {
        let h = b.ln_self.forward(&x).unwrap();
        x = x.add(&b.self_attn.forward(&h, &h, patchsum::nn::AttnMask::None).unwrap().out).unwrap();
        x = x.add_row(&b.cross_attn.o.b.get()).unwrap();
        x = x.add(&b.ffn.forward(&b.ln_ffn.forward(&x).unwrap()).unwrap()).unwrap();
    }
    let expect = p.ln.forward(&x).unwrap();
    for (g, e) in out1.states.data().iter().zip(expect.data()) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn every_memory_token_influences_the_summary() {
    let d = 8;
    let p = pad(d, 3);
    let sd = seeds(d, 2);
    let full = states(10, d, 5);
    let base = pad_forward(&sd, &PatchSequence::full(full.clone()), &p).unwrap();
    for r in 0..10 {
        let mut data = full.data().to_vec();
        data[r * d] += 0.1;
        let moved = pad_forward(&sd, &PatchSequence::full(Tensor::constant(vec![10, d], data).unwrap()), &p).unwrap();
        assert_ne!(moved.states.data(), base.states.data(), "row {r}");
    }
}

// ---- pipeline -----------------------------------------------------------------

#[test]
fn selector_gets_no_gradient_without_region_batch_at_zero_beta() {
    let cfg = RunConfig::desk();
    let model = Model::new(&cfg).unwrap();
    let t = TrainConfig { batch_o: 0, batch_d: 3, ..TrainConfig::desk() };
    let (region, paired) = batches_for_step(5, 0, &t, &cfg).unwrap();
    assert!(region.is_empty());

    let losses = step_losses(&model, &region, &paired, 0.0, 0.15, 5, 0).unwrap();
    losses.total.backward().unwrap();
    let tsps: Vec<_> = model.params().iter().filter(|p| p.name().starts_with("tsps.")).collect();
    assert_eq!(tsps.len(), 6);
    for p in &tsps {
        assert!(p.get().grad_or_zeros().iter().all(|&g| g == 0.0), "{}", p.name());
    }

    // With β > 0 the score pathway reaches the loss through the fusion weights.
    model.params().zero_grad();
    step_losses(&model, &region, &paired, 0.5, 0.15, 5, 0).unwrap().total.backward().unwrap();
    assert!(tsps.iter().any(|p| p.get().grad_or_zeros().iter().any(|&g| g != 0.0)));
}
