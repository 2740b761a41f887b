mod common;

use common::{brute_force_vote, closed_form_kl, monte_carlo_kl, random_mask, random_mask_lists, Diag};
use proptest::prelude::*;
use uasam::config::SynthConfig;
use uasam::data::{generate, AnnotatedExample};
use uasam::engine::{Rng, Tensor};
use uasam::latent::kl_scalar;
use uasam::metrics::{dice, diversity, majority_vote_with};
use uasam::training::{sample_annotator, sample_prompt_point};

#[test]
fn kl_matches_monte_carlo_on_a_few_pairs() {
    let mut rng = Rng::new(5);
    for _ in 0..4 {
        let (q, p) = (Diag::random(6, &mut rng), Diag::random(6, &mut rng));
        let exact = closed_form_kl(&q, &p);
        let mc = monte_carlo_kl(&q, &p, 200_000, &mut rng);
        assert!((mc - exact).abs() / exact < 0.03, "closed {exact} vs mc {mc}");
    }
}

#[test]
fn kl_sums_univariate_terms() {
    let mut rng = Rng::new(6);
    let (q, p) = (Diag::random(5, &mut rng), Diag::random(5, &mut rng));
    let by_dim: f64 = (0..5).map(|i| kl_scalar(q.mu[i], q.log_sigma[i], p.mu[i], p.log_sigma[i])).sum();
    assert!((closed_form_kl(&q, &p) - by_dim).abs() < 1e-12);
}

#[test]
fn kl_of_a_distribution_with_itself_is_exactly_zero() {
    let mut rng = Rng::new(7);
    for _ in 0..20 {
        let q = Diag::random(6, &mut rng);
        assert_eq!(closed_form_kl(&q, &q), 0.0);
    }
}

#[test]
fn majority_vote_agrees_with_brute_force_counter() {
    for masks in random_mask_lists(100, 11) {
        for tie in [false, true] {
            let fused = majority_vote_with(&masks, tie).unwrap();
            assert_eq!(fused.data(), brute_force_vote(&masks, tie).as_slice(), "n={} tie={tie}", masks.len());
        }
    }
}

#[test]
fn tie_pixels_follow_the_configured_rule() {
    let on = Tensor::full(vec![1, 1], 1.0);
    let off = Tensor::zeros(vec![1, 1]);
    let masks = [on.clone(), off.clone(), on, off];
    assert_eq!(majority_vote_with(&masks, false).unwrap().data(), &[0.0]);
    assert_eq!(majority_vote_with(&masks, true).unwrap().data(), &[1.0]);
}

fn small_synth(n: usize) -> SynthConfig {
    SynthConfig { num_examples: n, ..SynthConfig::default() }
}

#[test]
fn annotators_are_drawn_uniformly() {
    let ex = &generate(&small_synth(1)).unwrap()[0];
    let mut rng = Rng::new(21);
    let mut hits = [0usize; 4];
    let draws = 40_000;
    for _ in 0..draws {
        let chosen = sample_annotator(ex, &mut rng).unwrap();
        let i = ex.masks.iter().position(|m| std::ptr::eq(m, chosen)).unwrap();
        hits[i] += 1;
    }
    for h in hits {
        let f = h as f64 / draws as f64;
        assert!((f - 0.25).abs() < 0.02, "frequency {f}");
    }
}

#[test]
fn prompt_points_land_inside_the_union() {
    let mut rng = Rng::new(22);
    for ex in generate(&small_synth(30)).unwrap() {
        let union = ex.union_mask();
        for _ in 0..20 {
            let (pt, fallback) = sample_prompt_point(&union, &mut rng);
            assert!(!fallback);
            assert_eq!(union.data()[pt.row * ex.size() + pt.col], 1.0);
        }
    }
}

fn mean_pairwise_dice(examples: &[AnnotatedExample]) -> f64 {
    let per: Vec<f64> = examples.iter().map(|e| 1.0 - diversity(&e.masks).unwrap()).collect();
    per.iter().sum::<f64>() / per.len() as f64
}

#[test]
fn inter_annotator_agreement_falls_with_jitter() {
    let agreement: Vec<f64> = [0.0, 1.0, 2.5]
        .iter()
        .map(|&j| mean_pairwise_dice(&generate(&SynthConfig { boundary_jitter: j, ..small_synth(60) }).unwrap()))
        .collect();
    assert!(agreement[0] >= agreement[1] && agreement[1] >= agreement[2], "{agreement:?}");
}

#[test]
fn full_lobe_rate_leaves_only_boundary_disagreement() {
    let cfg = SynthConfig { boundary_jitter: 0.0, ambiguity_rate: 1.0, ..small_synth(10) };
    for ex in generate(&cfg).unwrap() {
        assert_eq!(diversity(&ex.masks).unwrap(), 0.0, "{}", ex.id);
    }
}

/// 4-connected flood fill from the first foreground pixel.
fn is_connected(mask: &Tensor) -> bool {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let d = mask.data();
    let Some(start) = d.iter().position(|&v| v == 1.0) else { return true };
    let mut seen = vec![false; d.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        let (r, c) = (i / w, i % w);
        let next = [
            (r > 0).then(|| i - w),
            (r + 1 < h).then(|| i + w),
            (c > 0).then(|| i - 1),
            (c + 1 < w).then(|| i + 1),
        ];
        for j in next.into_iter().flatten() {
            if d[j] == 1.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    d.iter().zip(&seen).all(|(&v, &s)| v == 0.0 || s)
}

#[test]
fn every_generated_mask_is_one_component() {
    for ex in generate(&small_synth(40)).unwrap() {
        for (i, m) in ex.masks.iter().enumerate() {
            assert!(is_connected(m), "{} mask {i}", ex.id);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric_and_bounded(seed in any::<u64>(), density in 0.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let a = random_mask(5, 5, density, &mut rng);
        let b = random_mask(5, 5, density, &mut rng);
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn unanimous_votes_return_the_shared_mask(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = Rng::new(seed);
        let m = random_mask(4, 6, 0.5, &mut rng);
        let copies = vec![m.clone(); n];
        prop_assert_eq!(majority_vote_with(&copies, false).unwrap(), m.clone());
        prop_assert_eq!(majority_vote_with(&copies, true).unwrap(), m);
    }

    #[test]
    fn vote_is_order_invariant(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = Rng::new(seed);
        let mut masks: Vec<Tensor> = (0..n).map(|_| random_mask(4, 4, 0.5, &mut rng)).collect();
        let before = majority_vote_with(&masks, false).unwrap();
        rng.shuffle(&mut masks);
        prop_assert_eq!(before, majority_vote_with(&masks, false).unwrap());
    }

    #[test]
    fn kl_is_non_negative(mq in -3.0f64..3.0, sq in -2.0f64..2.0, mp in -3.0f64..3.0, sp in -2.0f64..2.0) {
        prop_assert!(kl_scalar(mq, sq, mp, sp) >= -1e-12);
    }

    #[test]
    fn diversity_of_identical_samples_is_zero(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = Rng::new(seed);
        let m = random_mask(4, 4, 0.5, &mut rng);
        prop_assert_eq!(diversity(&vec![m; k]).unwrap(), 0.0);
    }
}
