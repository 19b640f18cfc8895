//! Property tests over random models, routings and token sequences.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use wfcompose::analysis::{cosine, pmi_from_sets};
use wfcompose::bases::{sparse_topm, support, CapabilityBasisSet, CapabilityConfig};
use wfcompose::composer::RoutingDecision;
use wfcompose::losses::{attribute, counterfactual_mask, marginal_contribution, AttributionScope};
use wfcompose::model::{BaseModel, ModelConfig, SiteId, TokenSequence};
use wfcompose::rng::{substream, Stream};
use wfcompose::tensor::{Real, Tensor};

struct Setup<T> {
    base: BaseModel<T>,
    bases: CapabilityBasisSet<T>,
}

fn setup<T: Real>(seed: u64, cfg: ModelConfig, k: usize, r: usize, m: usize) -> Setup<T> {
    let mut rng = substream(seed, Stream::Init);
    let base = BaseModel::<T>::init(cfg.clone(), &mut rng).unwrap();
    let cap = CapabilityConfig {
        num_bases: k,
        rank: r,
        top_m: m,
    };
    let mut bases = CapabilityBasisSet::<T>::init(&cfg, cap, &mut rng).unwrap();
    let n = Normal::new(0.0, 0.5).unwrap();
    for sb in &mut bases.sites {
        for b in &mut sb.bases {
            b.v = Tensor::from_fn(b.v.rows(), b.v.cols(), |_, _| T::lit(n.sample(&mut rng)));
            b.log_scale = T::lit(rng.random_range(-1.5..0.0));
        }
    }
    Setup { base, bases }
}

/// `M + Σ_k w_k c_k U_k V_kᵀ` by explicit loops in f64.
fn merged<T: Real>(s: &Setup<T>, weights: &[f64]) -> BTreeMap<SiteId, Tensor<T>> {
    let mut out = BTreeMap::new();
    for sb in &s.bases.sites {
        let m = s.base.site_weight(sb.site);
        let w = Tensor::from_fn(m.rows(), m.cols(), |i, j| {
            let mut x = m.get(i, j).as_f64();
            for (b, &wk) in sb.bases.iter().zip(weights) {
                let c = b.log_scale.as_f64().exp();
                let dot: f64 = (0..b.u.cols()).map(|q| b.u.get(i, q).as_f64() * b.v.get(j, q).as_f64()).sum();
                x += wk * c * dot;
            }
            T::lit(x)
        });
        out.insert(sb.site, w);
    }
    out
}

fn random_simplex(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

fn random_ids(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn model_strategy() -> impl Strategy<Value = (ModelConfig, usize, usize, usize)> {
    (1usize..=2, 1usize..=2, 2usize..=6, 1usize..=3).prop_flat_map(|(layers, heads, k, r)| {
        (1..=k).prop_map(move |m| {
            let d = 8 * heads;
            (ModelConfig::with_dims(24, d, layers, heads, 2 * d, 32), k, r, m)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn sparse_composition_matches_premerged_f32((cfg, k, r, m) in model_strategy(), seed in any::<u64>()) {
        let s = setup::<f32>(seed, cfg.clone(), k, r, m);
        let mut rng = substream(seed, Stream::Batching);
        let alpha = sparse_topm(&random_simplex(&mut rng, k), m).unwrap();
        let ids = random_ids(&mut rng, cfg.vocab_size, 12);
        let composed = s.bases.compose(&s.base, &alpha).unwrap();
        let a = s.base.forward_logits(&composed, &ids).unwrap();
        let b = s.base.forward_logits(&merged(&s, &alpha), &ids).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-6, "diff {}", a.max_abs_diff(&b));
    }

    #[test]
    fn unit_routing_equals_single_basis_model_f64((cfg, k, r, _m) in model_strategy(), seed in any::<u64>()) {
        let s = setup::<f64>(seed, cfg.clone(), k, r, 1);
        let mut rng = substream(seed, Stream::Batching);
        let ids = random_ids(&mut rng, cfg.vocab_size, 10);
        for j in 0..k {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            let composed = s.bases.compose(&s.base, &sparse_topm(&e, 1).unwrap()).unwrap();
            let a = s.base.forward_logits(&composed, &ids).unwrap();
            let b = s.base.forward_logits(&merged(&s, &e), &ids).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-10);
        }
    }

    #[test]
    fn dense_path_at_m_equals_k_is_unsparsified((cfg, k, r, _m) in model_strategy(), seed in any::<u64>()) {
        let s = setup::<f64>(seed, cfg.clone(), k, r, k);
        let mut rng = substream(seed, Stream::Batching);
        let alpha = random_simplex(&mut rng, k);
        let sparse = sparse_topm(&alpha, k).unwrap();
        for (a, b) in alpha.iter().zip(&sparse) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let ids = random_ids(&mut rng, cfg.vocab_size, 10);
        let a = s.base.forward_logits(&s.bases.compose(&s.base, &sparse).unwrap(), &ids).unwrap();
        let b = s.base.forward_logits(&merged(&s, &alpha), &ids).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn later_tokens_never_change_earlier_logits((cfg, k, r, m) in model_strategy(), seed in any::<u64>(), cut in 1usize..10) {
        let s = setup::<f64>(seed, cfg.clone(), k, r, m);
        let mut rng = substream(seed, Stream::Batching);
        let composed = s.bases.compose(&s.base, &sparse_topm(&random_simplex(&mut rng, k), m).unwrap()).unwrap();
        let a_ids = random_ids(&mut rng, cfg.vocab_size, 10);
        let mut b_ids = a_ids.clone();
        for t in &mut b_ids[cut..] {
            *t = (*t + 1) % cfg.vocab_size;
        }
        let a = s.base.forward_logits(&composed, &a_ids).unwrap();
        let b = s.base.forward_logits(&composed, &b_ids).unwrap();
        for t in 0..cut {
            prop_assert_eq!(a.row(t), b.row(t));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn topm_activates_at_most_m(alpha in prop::collection::vec(0.0f64..1.0, 2..12), m in 1usize..12) {
        prop_assume!(m <= alpha.len() && alpha.iter().sum::<f64>() > 0.0);
        let sparse = sparse_topm(&alpha, m).unwrap();
        prop_assert!(support(&sparse).len() <= m);
        prop_assert!((sparse.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn topm_is_identity_on_m_sparse_simplex(
        (raw, keep, m) in prop::collection::vec(0.01f64..1.0, 2..10)
            .prop_flat_map(|raw| { let k = raw.len(); (Just(raw), 1..=k) })
            .prop_flat_map(|(raw, m)| (Just(raw), 1..=m, Just(m)))
    ) {
        let mut alpha: Vec<f64> = raw.iter().enumerate().map(|(i, &x)| if i < keep { x } else { 0.0 }).collect();
        let s: f64 = alpha.iter().sum();
        alpha.iter_mut().for_each(|a| *a /= s);
        let sparse = sparse_topm(&alpha, m).unwrap();
        for (a, b) in alpha.iter().zip(&sparse) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn masks_sum_to_one(u in prop::collection::vec(-4.0f64..4.0, 2..10), dt in -2.0f64..2.0) {
        let d = RoutingDecision::from_logits(u, dt, 1.0, 1).unwrap();
        for k in 0..d.alpha.len() {
            let masked = counterfactual_mask(&d.alpha, k).unwrap();
            prop_assert!((masked.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert_eq!(masked[k], 0.0);
        }
    }

    #[test]
    fn cosine_is_symmetric(a in prop::collection::vec(0.0f64..5.0, 1..10), b in prop::collection::vec(0.0f64..5.0, 1..10)) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        prop_assume!(a.iter().any(|&x| x > 0.0) && b.iter().any(|&x| x > 0.0));
        prop_assert_eq!(cosine(a, b), cosine(b, a));
        prop_assert!(cosine(a, b) <= 1.0 + 1e-12);
    }
}

/// Δ is exactly zero outside the active set for 1000 random routings.
#[test]
fn inactive_contributions_are_exactly_zero() {
    let cfg = ModelConfig::with_dims(16, 8, 1, 2, 16, 16);
    let s = setup::<f64>(3, cfg.clone(), 6, 2, 3);
    let mut rng = substream(3, Stream::Batching);
    let seq = TokenSequence::new(random_ids(&mut rng, 16, 9), 4, &cfg).unwrap();
    for i in 0..1000 {
        let k = rng.random_range(2..=6);
        let bases = if k == 6 { &s.bases } else { &setup::<f64>(i, cfg.clone(), k, 1, 1).bases };
        let m = rng.random_range(1..=k);
        let u: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let d = RoutingDecision::from_logits(u, rng.random_range(-2.0..2.0), 1.0, m).unwrap();
        for j in 0..k {
            let masked = counterfactual_mask(&d.alpha, j).unwrap();
            assert!((masked.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            if !d.active_set.contains(&j) {
                assert_eq!(marginal_contribution(&s.base, bases, &seq, &d, j).unwrap(), 0.0);
            }
        }
        if i % 50 == 0 {
            let r = attribute("t", &s.base, bases, &seq, 1.0, &d, AttributionScope::All).unwrap();
            for j in 0..k {
                if !d.active_set.contains(&j) {
                    assert_eq!(r.deltas[j], 0.0);
                    assert!(r.counterfactual_scores[j].is_none());
                }
            }
        }
    }
}

/// Independent active sets drive every PMI toward zero.
#[test]
fn pmi_of_independent_sets_converges_to_zero() {
    let mut rng = substream(5, Stream::Batching);
    let mut last = f64::INFINITY;
    for n in [1_000usize, 100_000] {
        let sets: Vec<Vec<usize>> = (0..n)
            .map(|_| (0..6).filter(|_| rng.random_bool(0.4)).collect())
            .collect();
        let net = pmi_from_sets(&sets, 6, 100).unwrap();
        let worst = net.edges.iter().map(|e| e.pmi).fold(0.0, f64::max);
        assert!(worst < last);
        last = worst;
    }
    assert!(last < 0.02, "{last}");
}
