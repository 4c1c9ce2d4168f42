use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weakalign_core::aligner::{
    plan_rn_masks, BoundingBox, Link, MaskModality, Region, RegionSet, Span, WeakPair,
};
use weakalign_core::embedder::{
    cosine, retrieve_topk, BagOfWords, EmbeddingProvider, HashedBagOfWords, RetrievalIndex,
};
use weakalign_core::numkernel::{Adam, AdamConfig, Graph, ParamGrads, ParamStore, Tensor};
use weakalign_core::objectives::{itm_loss, mlm_loss, mrfr_loss, p_mrtc_loss};

const WORDS: &[&str] = &["dog", "cat", "red", "tree", "a", "the", "car", "sky", "blue", "x"];

fn regions(n: usize) -> RegionSet {
    RegionSet {
        id: 1,
        width: 100.0,
        height: 100.0,
        regions: (0..n)
            .map(|i| Region {
                feature: vec![i as f32; 4],
                bbox: BoundingBox::new(i as f32, 0.0, i as f32 + 5.0, 5.0),
                tag: format!("t{i}"),
                class_id: i as u32,
                confidence: 0.9,
            })
            .collect(),
    }
}

/// Links over disjoint two-token spans with arbitrary scores.
fn pair_strategy() -> impl Strategy<Value = (WeakPair, usize)> {
    (1usize..6, vec(0.01f32..=1.0, 1..8)).prop_map(|(n_regions, scores)| {
        let links = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| Link {
                span: Span::new(2 * i, 2 * i + 2),
                region: i % n_regions,
                score,
            })
            .collect();
        let pair = WeakPair {
            image_id: 1,
            text_id: 2,
            rank: 1,
            score: 0.5,
            links,
            label: 1,
        };
        (pair, n_regions)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((i as u64).wrapping_mul(seed | 1) % 2001) as f64 / 100.0 - 10.0)
            .collect();
        let mut g = Graph::<f64>::standalone();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let p = g.softmax_rows(x, None).unwrap();
        for r in g.value(p).chunks(cols) {
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_is_symmetric(a in vec(-5.0f32..5.0, 1..16), seed in any::<u64>()) {
        let b: Vec<f32> = a
            .iter()
            .enumerate()
            .map(|(i, &x)| x * 0.5 + ((seed >> (i % 60)) & 7) as f32 - 3.0)
            .collect();
        prop_assume!(a.iter().any(|&x| x != 0.0) && b.iter().any(|&x| x != 0.0));
        let ab = cosine(&a, &b).unwrap();
        let ba = cosine(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-7);
    }

    #[test]
    fn provider_embeddings_are_unit_and_stable(words in vec(0usize..WORDS.len(), 1..12)) {
        let text: Vec<&str> = words.iter().map(|&i| WORDS[i]).collect();
        let text = text.join(" ");
        let providers: [Box<dyn EmbeddingProvider>; 2] = [
            Box::new(BagOfWords::new(["dog", "cat", "tree", "car"])),
            Box::new(HashedBagOfWords::new(64)),
        ];
        for p in &providers {
            let e = p.embed(&text).unwrap();
            let norm = e.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-6);
            prop_assert_eq!(&e, &p.embed(&text).unwrap());
        }
    }

    #[test]
    fn rn_plans_mask_one_modality_and_replay((pair, n) in pair_strategy(), rho in 0.0f64..1.0, seed in any::<u64>()) {
        let tokens: Vec<u32> = (100..100 + 2 * pair.links.len() as u32).collect();
        let image = regions(n);
        let plan = plan_rn_masks(&pair, &tokens, &image, rho, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(plan.text.is_empty() != plan.regions.is_empty());
        match plan.modality {
            MaskModality::Text => prop_assert!(plan.regions.is_empty()),
            MaskModality::Vision => prop_assert!(plan.text.is_empty()),
            other => prop_assert!(false, "unexpected modality {:?}", other),
        }
        let again = plan_rn_masks(&pair, &tokens, &image, rho, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(plan, again);
    }

    #[test]
    fn adam_with_zero_gradient_is_identity(values in vec(-3.0f64..3.0, 1..20), steps in 1usize..5) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![values.len()], values.clone()).unwrap());
        let mut adam = Adam::new(AdamConfig::new(1e-2, 0.1, 10), &store);
        let zero = ParamGrads::zeros_like(&store);
        for _ in 0..steps {
            let lr = adam.step(&mut store, &zero);
            prop_assert!(lr >= 0.0);
        }
        prop_assert_eq!(store.iter().next().unwrap().2.data(), &values[..]);
    }

    #[test]
    fn losses_are_non_negative(logits in vec(-20.0f64..20.0, 12), target in 0u32..6, label in 0u8..2) {
        let mut g = Graph::<f64>::standalone();
        let x = g.constant(Tensor::new(vec![2, 6], logits.clone()).unwrap());
        let l = mlm_loss(&mut g, Some(x), &[target, 5 - target]).unwrap();
        prop_assert!(g.scalar(l) >= 0.0);
        let l = p_mrtc_loss(&mut g, Some(x), &[vec![target], vec![0, 1, 2]]).unwrap();
        prop_assert!(g.scalar(l) >= 0.0);
        let pred = g.constant(Tensor::new(vec![2, 6], logits.clone()).unwrap());
        let l = mrfr_loss(&mut g, Some(pred), &[vec![0.5; 6], vec![-1.0; 6]]).unwrap();
        prop_assert!(g.scalar(l) >= 0.0);
        let s = g.constant(Tensor::new(vec![1], vec![logits[0]]).unwrap());
        let l = itm_loss(&mut g, s, label).unwrap();
        prop_assert!(g.scalar(l) >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Coarse scores make ties common, so the id tie-break is exercised.
    #[test]
    fn topk_equals_full_argsort(
        rows in vec(vec(0u8..4, 3), 1..25),
        query in vec(0u8..4, 3),
        k in 1usize..30,
    ) {
        let ids: Vec<u64> = (0..rows.len() as u64).map(|i| (i * 7919) % 101).collect();
        prop_assume!({
            let mut u = ids.clone();
            u.sort_unstable();
            u.dedup();
            u.len() == ids.len()
        });
        let emb: Vec<Vec<f32>> = rows.iter().map(|r| r.iter().map(|&x| x as f32 * 0.5).collect()).collect();
        let q: Vec<f32> = query.iter().map(|&x| x as f32 - 1.5).collect();
        let index = RetrievalIndex::from_embeddings("test", ids.clone(), emb.clone()).unwrap();
        let got: Vec<(u64, f64)> = retrieve_topk(&q, &index, k).unwrap().iter().map(|h| (h.id, h.score)).collect();
        let mut want: Vec<(u64, f64)> = ids
            .iter()
            .zip(&emb)
            .map(|(&id, e)| (id, e.iter().zip(&q).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() + 0.0))
            .collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        want.truncate(k);
        prop_assert_eq!(got, want);
    }
}
