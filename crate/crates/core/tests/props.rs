//! Property tests for the crate-wide invariants.

use proptest::prelude::*;
use redfuse::datagen::{
    build_instruction_record, parse_conversation, serialize_conversation, QuestionMode,
};
use redfuse::fusion::{fuse, FusionParams, ProjectionParams};
use redfuse::metrics::{bleu, exact_match, prf, tokenize, BLEU_UNIFORM};
use redfuse::num::{cross_entropy, softmax};
use redfuse::sampler::{normalize_scores, select_valid, ScoreVector};
use redfuse::Matrix;

fn score_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, 2..12)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in score_vec(), t in 0.05..20.0f64) {
        let p = softmax(&v, t).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|x| *x > 0.0 && *x <= 1.0));
    }

    #[test]
    fn softmax_preserves_argmax(v in score_vec(), t in 0.05..20.0f64) {
        let distinct = v.iter().map(|x| x.to_bits()).collect::<std::collections::HashSet<_>>();
        prop_assume!(distinct.len() == v.len());
        let arg_v = v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        let p = softmax(&v, t).unwrap();
        let arg_p = p.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        prop_assert_eq!(arg_v, arg_p);
    }

    #[test]
    fn gibbs_inequality(a in score_vec(), shift in -3.0..3.0f64) {
        let n = a.len();
        let b: Vec<f64> = a.iter().rev().map(|x| x + shift).collect();
        let p = softmax(&a[..n], 1.0).unwrap();
        let q = softmax(&b, 1.0).unwrap();
        let ce_pq = cross_entropy(&p, &q).unwrap();
        let ce_pp = cross_entropy(&p, &p).unwrap();
        prop_assert!(ce_pq + 1e-12 >= ce_pp);
    }

    #[test]
    fn fuse_stays_between_streams(
        a in -80.0..80.0f64,
        x in prop::collection::vec(-10.0..10.0f64, 6),
        y in prop::collection::vec(-10.0..10.0f64, 6),
    ) {
        let params = FusionParams::new(
            a,
            ProjectionParams::identity(3),
            ProjectionParams::identity(3),
        ).unwrap();
        let h1 = Matrix::from_vec(2, 3, x.clone()).unwrap();
        let h2 = Matrix::from_vec(2, 3, y.clone()).unwrap();
        let out = fuse(&h1, &h2, &params).unwrap();
        for i in 0..6 {
            let (lo, hi) = if x[i] <= y[i] { (x[i], y[i]) } else { (y[i], x[i]) };
            prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn selection_matches_normalized_argmax(raw in score_vec(), t in 0.1..10.0f64) {
        let distinct = raw.iter().map(|x| x.to_bits()).collect::<std::collections::HashSet<_>>();
        prop_assume!(distinct.len() == raw.len());
        let picked = select_valid(&ScoreVector { raw: raw.clone(), normalized: None }).unwrap();
        let p = normalize_scores(&raw, t).unwrap();
        let argmax = p.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        prop_assert_eq!(picked, argmax);
    }

    #[test]
    fn selection_is_permutation_equivariant(raw in score_vec(), seed in 0..1000u64) {
        let distinct = raw.iter().map(|x| x.to_bits()).collect::<std::collections::HashSet<_>>();
        prop_assume!(distinct.len() == raw.len());
        let k = raw.len();
        // deterministic permutation from the seed
        let mut perm: Vec<usize> = (0..k).collect();
        let mut state = seed;
        for i in (1..k).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let permuted: Vec<f64> = perm.iter().map(|&i| raw[i]).collect();
        let base = select_valid(&ScoreVector { raw: raw.clone(), normalized: None }).unwrap();
        let moved = select_valid(&ScoreVector { raw: permuted, normalized: None }).unwrap();
        prop_assert_eq!(perm[moved], base);
    }

    #[test]
    fn tokenizer_idempotent_on_latin(words in prop::collection::vec("[a-z0-9]{1,8}", 0..8)) {
        let text = words.join(" ");
        let once = tokenize(&text);
        let twice = tokenize(&once.tokens.join(" "));
        prop_assert_eq!(once.tokens, twice.tokens);
    }

    #[test]
    fn prf_precision_recall_swap(
        c in prop::collection::vec("[a-e]{1,2}", 0..8),
        r in prop::collection::vec("[a-e]{1,2}", 0..8),
    ) {
        let cand = tokenize(&c.join(" "));
        let reference = tokenize(&r.join(" "));
        let fwd = prf(&cand, &reference);
        let bwd = prf(&reference, &cand);
        prop_assert!((fwd.0 - bwd.1).abs() <= 1e-15);
        prop_assert!((fwd.1 - bwd.0).abs() <= 1e-15);
    }

    #[test]
    fn em_implies_perfect_scores(words in prop::collection::vec("[a-z]{1,6}", 0..6)) {
        let text = words.join(" ");
        let t = tokenize(&text);
        prop_assert_eq!(exact_match(&t, &t), 1.0);
        prop_assert_eq!(prf(&t, &t).2, 1.0);
        prop_assert_eq!(bleu(&t, &t, &BLEU_UNIFORM).unwrap(), 1.0);
    }

    #[test]
    fn conversation_round_trip(
        caption in "[a-zA-Z][a-zA-Z0-9 ]{0,30}",
        ids in prop::collection::vec("[a-z0-9_-]{1,10}", 1..5),
        site_cue in any::<bool>(),
        site in "[a-z]{2,10}",
    ) {
        let mode = if site_cue { QuestionMode::SiteCue } else { QuestionMode::NoCue };
        let site_arg = site_cue.then_some(site.as_str());
        let record = build_instruction_record(&caption, &ids, mode, site_arg).unwrap();
        let text = serialize_conversation(&record).unwrap();
        let parsed = parse_conversation(&text).unwrap();
        prop_assert_eq!(parsed, record);
    }

    #[test]
    fn jsonl_round_trip(values in prop::collection::vec(-1e6..1e6f64, 0..20)) {
        let records: Vec<redfuse::fusion::FeatureRecord> = values
            .chunks(2)
            .filter(|c| c.len() == 2)
            .enumerate()
            .map(|(i, c)| redfuse::fusion::FeatureRecord {
                image_id: format!("im{i}"),
                features: Matrix::from_vec(1, 2, c.to_vec()).unwrap(),
            })
            .collect();
        let text: String = records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        let back: Vec<redfuse::fusion::FeatureRecord> =
            redfuse::jsonl::parse_jsonl(&text).unwrap();
        prop_assert_eq!(records, back);
    }
}
