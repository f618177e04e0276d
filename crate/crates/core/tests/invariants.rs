use std::path::Path;

use mlvae::corpus::{segment, Vocabulary};
use mlvae::latent::{kl_gaussians, kl_standard, log_density, sample, GaussianParams};
use mlvae::metrics::{bleu_n, ngram_entropy, self_bleu, unique_ngrams};
use mlvae::trainer::anneal;
use mlvae::workbench::interpolation_points;
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(d: usize) -> impl Strategy<Value = GaussianParams> {
    (vec(-3.0f64..3.0, d), vec(-3.0f64..3.0, d)).prop_map(|(m, l)| GaussianParams::new(m, l).unwrap())
}

fn sentence() -> impl Strategy<Value = Vec<usize>> {
    vec(0usize..6, 1..10)
}

#[test]
fn kl_matches_monte_carlo() {
    let q = GaussianParams::new(vec![0.4, -1.0, 0.2], vec![-0.5, 0.3, 0.0]).unwrap();
    let p = GaussianParams::new(vec![-0.2, 0.5, 0.0], vec![0.6, -0.2, 1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = sample(&q, &eps).unwrap();
        sum += log_density(&q, &z) - log_density(&p, &z);
    }
    let estimate = sum / n as f64;
    let exact = kl_gaussians(&q, &p).unwrap();
    assert!((estimate - exact).abs() < 0.01 * exact.max(1.0), "{estimate} vs {exact}");
}

#[test]
fn kl_hand_values() {
    let q = GaussianParams::new(vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
    assert!((kl_standard(&q) - 1.0).abs() < 1e-12);
    let q = GaussianParams::standard(1);
    let p = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
    let expect = 0.5 * (1.0 + (-1.0f64).exp() - 1.0);
    assert!((kl_gaussians(&q, &p).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn segmented_text_round_trips() {
    let line = "the food was good . was it ? yes";
    let doc = segment(line).unwrap();
    assert_eq!(doc.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 4, 2]);
    let vocab = Vocabulary::from_documents(std::slice::from_ref(&doc), 100, 1).unwrap();
    let p = vocab.encode(&doc).unwrap();
    assert_eq!(vocab.render(p.sentences()), line);
    let back = Vocabulary::from_tsv(&vocab.to_tsv(), Path::new("mem")).unwrap();
    assert_eq!(back, vocab);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(q in gaussian(4), p in gaussian(4)) {
        prop_assert!(kl_gaussians(&q, &p).unwrap() >= -1e-12);
        prop_assert!(kl_standard(&q) >= -1e-12);
    }

    #[test]
    fn kl_vanishes_on_itself(q in gaussian(5)) {
        prop_assert!(kl_gaussians(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn standard_kl_is_the_special_case(q in gaussian(3)) {
        let general = kl_gaussians(&q, &GaussianParams::standard(3)).unwrap();
        prop_assert!((general - kl_standard(&q)).abs() < 1e-9 * general.max(1.0));
    }

    #[test]
    fn anneal_is_a_clamped_ramp(s0 in 0u64..1000, len in 1u64..1000, a in 0u64..3000, b in 0u64..3000) {
        let s1 = s0 + len;
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(anneal(lo, s0, s1) <= anneal(hi, s0, s1));
        prop_assert!((0.0..=1.0).contains(&anneal(a, s0, s1)));
        prop_assert_eq!(anneal(s0.saturating_sub(1), s0, s1), 0.0);
        prop_assert_eq!(anneal(s1, s0, s1), 1.0);
    }

    #[test]
    fn interpolation_keeps_endpoints(a in vec(-5.0f64..5.0, 3), b in vec(-5.0f64..5.0, 3), k in 1usize..8) {
        let pts = interpolation_points(&a, &b, k).unwrap();
        prop_assert_eq!(pts.len(), k + 2);
        prop_assert_eq!(&pts[0], &a);
        prop_assert_eq!(&pts[k + 1], &b);
        for p in &pts {
            for ((x, y), v) in a.iter().zip(&b).zip(p) {
                prop_assert!(*v >= x.min(*y) - 1e-12 && *v <= x.max(*y) + 1e-12);
            }
        }
    }

    #[test]
    fn bleu_stays_in_unit_interval(c in sentence(), r in vec(sentence(), 1..4), n in 1usize..4) {
        prop_assume!(c.len() >= n);
        let s = bleu_n(&c, &r, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn diversity_metrics_are_bounded(samples in vec(sentence(), 2..6), n in 1usize..3) {
        prop_assume!(samples.iter().all(|s| s.len() >= n));
        let u = unique_ngrams(&samples, n).unwrap();
        prop_assert!(u > 0.0 && u <= 100.0);
        let total: usize = samples.iter().map(|s| s.len() + 1 - n).sum();
        let h = ngram_entropy(&samples, n).unwrap();
        prop_assert!(h >= -1e-12 && h <= (total as f64).ln() + 1e-12);
        let sb = self_bleu(&samples, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&sb));
    }
}
