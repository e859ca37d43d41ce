use proptest::prelude::*;
use quids_core::decoding::{beam_search, GenerationParams};
use quids_core::evaluation::{lcs_len, rouge_l_recall, rouge_n_recall};
use quids_core::objectives::{disentangle_infonce, irrelevant_space_loss, relevant_space_loss};
use quids_core::EmbeddingVector;

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 0..10)
}

fn vectors(k: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..5).prop_flat_map(move |d| {
        prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, d).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3)),
            k.clone(),
        )
    })
}

proptest! {
    #[test]
    fn rouge_is_a_bounded_recall(c in words(), r in words()) {
        let (cs, rs) = (c.join(" "), r.join(" "));
        for n in 1..=2 {
            let v = rouge_n_recall(&cs, &rs, n);
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let l = rouge_l_recall(&cs, &rs);
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert!(lcs_len(&c, &r) <= c.len().min(r.len()));
        prop_assert_eq!(lcs_len(&c, &r), lcs_len(&r, &c));
        if !r.is_empty() {
            prop_assert_eq!(rouge_n_recall(&rs, &rs, 1), 1.0);
            prop_assert_eq!(rouge_l_recall(&rs, &rs), 1.0);
        }
    }

    #[test]
    fn encoder_losses_are_bounded(es in vectors(1..5), bar in vectors(1..2), margin in 0.0f64..2.0) {
        prop_assume!(bar[0].len() == es[0].len());
        let evs: Vec<_> = es.iter().map(|v| EmbeddingVector::new(v.clone()).unwrap()).collect();
        let k = evs.len() as f64;
        let rel = relevant_space_loss(&evs).unwrap();
        prop_assert!(rel >= -1e-12 && rel <= k * (k - 1.0) + 1e-9);
        let irr = irrelevant_space_loss(&evs, &EmbeddingVector::new(bar[0].clone()).unwrap(), margin).unwrap();
        prop_assert!(irr >= 0.0 && irr <= k * margin + 1e-12);
    }

    #[test]
    fn infonce_with_positive_is_non_negative(vs in vectors(3..7), tau in 0.05f64..1.0) {
        let negs: Vec<&[f64]> = vs[2..].iter().map(Vec::as_slice).collect();
        let l = disentangle_infonce(&vs[0], &vs[1], &negs, tau, true).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn beam_hypotheses_are_consistent(seed in 0u64..1000, beam in 1usize..5, max_len in 2usize..8) {
        let lm = move |prefix: &[u32]| -> Vec<f64> {
            let mut h = seed.wrapping_add(prefix.len() as u64 * 7919);
            for &t in prefix {
                h = h.wrapping_mul(31).wrapping_add(t as u64);
            }
            let w: Vec<f64> = (0..6u64).map(|t| if t == 0 { 0.0 } else { ((h ^ (t * 2654435761)) % 97 + 1) as f64 }).collect();
            let z: f64 = w.iter().sum();
            w.iter().map(|x| if *x == 0.0 { f64::NEG_INFINITY } else { (x / z).ln() }).collect()
        };
        let params = GenerationParams { beam_size: beam, max_length: max_len, no_repeat_ngram: 2, length_penalty: 0.0 };
        let h = beam_search(&mut lm.clone(), &params, 0, 1).unwrap();
        prop_assert_eq!(h.tokens[0], 0);
        prop_assert!(h.tokens.len() - 1 <= max_len);
        let eos_at = h.tokens.iter().position(|&t| t == 1);
        prop_assert!(eos_at.is_none_or(|p| p == h.tokens.len() - 1));
        let bigrams: Vec<_> = h.tokens.windows(2).collect();
        for i in 0..bigrams.len() {
            prop_assert!(!bigrams[i + 1..].contains(&bigrams[i]));
        }
        let mut score = 0.0;
        for z in 1..h.tokens.len() {
            score += lm(&h.tokens[..z])[h.tokens[z] as usize];
        }
        prop_assert!((score - h.score).abs() < 1e-9);
    }
}
