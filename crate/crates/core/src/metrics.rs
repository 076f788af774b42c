//! Answer-scoring suite: tokenization, exact match, token-overlap
//! precision/recall/F1, BLEU with adjustable n-gram weights, and
//! closed-set accuracy, plus corpus aggregation.
//!
//! Tokenization is fixed as: each CJK ideograph is its own token,
//! contiguous runs of other letters or digits form lowercased word
//! tokens, and punctuation / whitespace separate and are dropped. This is
//! the standard scheme for mixed Chinese/English answer scoring.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenList {
    pub tokens: Vec<String>,
}

impl TokenList {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn is_cjk_ideograph(c: char) -> bool {
    matches!(u32::from(c),
        0x4E00..=0x9FFF       // CJK Unified Ideographs
        | 0x3400..=0x4DBF     // Extension A
        | 0xF900..=0xFAFF     // Compatibility Ideographs
        | 0x20000..=0x2EBEF   // Extensions B..F
        | 0x2F800..=0x2FA1F   // Compatibility Supplement
    )
}

pub fn tokenize(text: &str) -> TokenList {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if is_cjk_ideograph(c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(c.to_string());
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    TokenList { tokens }
}

/// 1 iff the token sequences are identical (order-sensitive). Two empty
/// sequences match vacuously.
pub fn exact_match(candidate: &TokenList, reference: &TokenList) -> f64 {
    if candidate.tokens == reference.tokens {
        1.0
    } else {
        0.0
    }
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut map: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *map.entry(t.as_str()).or_insert(0) += 1;
    }
    map
}

/// Token-multiset precision, recall, and F1.
///
/// An empty side contributes a zero ratio; when both sides are empty the
/// pair is vacuously perfect, which keeps `EM = 1` implying `F1 = 1`.
pub fn prf(candidate: &TokenList, reference: &TokenList) -> (f64, f64, f64) {
    if candidate.is_empty() && reference.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    if candidate.is_empty() || reference.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let ref_counts = counts(&reference.tokens);
    let cand_counts = counts(&candidate.tokens);
    let overlap: usize = cand_counts
        .iter()
        .map(|(t, c)| (*c).min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    let precision = overlap as f64 / candidate.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

pub const BLEU_UNIFORM: [f64; 4] = [0.25, 0.25, 0.25, 0.25];
pub const BLEU_1: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
pub const BLEU_2: [f64; 4] = [0.5, 0.5, 0.0, 0.0];
pub const BLEU_3: [f64; 4] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];

const BLEU_SMOOTH_EPS: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *map.entry(window).or_insert(0) += 1;
        }
    }
    map
}

/// Modified n-gram precision with clipped counts.
///
/// Returns `None` when neither side has any n-grams (the vacuous case,
/// treated as a perfect 1); this keeps identical short texts at BLEU 1
/// under every preset.
fn modified_precision(
    candidate: &[String],
    reference: &[String],
    n: usize,
    smoothing: bool,
) -> Option<f64> {
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    if cand_total == 0 && ref_total == 0 {
        return None;
    }
    if cand_total == 0 {
        return Some(0.0);
    }
    let ref_counts = ngram_counts(reference, n);
    let cand_counts = ngram_counts(candidate, n);
    let matched: usize = cand_counts
        .iter()
        .map(|(g, c)| (*c).min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    if smoothing {
        Some((matched as f64 + BLEU_SMOOTH_EPS) / (cand_total as f64 + BLEU_SMOOTH_EPS))
    } else {
        Some(matched as f64 / cand_total as f64)
    }
}

/// Sentence BLEU: `BP * exp(sum_n w_n log p_n)` over the weighted n-gram
/// orders, with brevity penalty `exp(1 - |ref|/|cand|)` for short
/// candidates. Any zero `p_n` with positive weight zeroes the score.
pub fn bleu(candidate: &TokenList, reference: &TokenList, weights: &[f64; 4]) -> Result<f64> {
    bleu_with(candidate, reference, weights, false)
}

/// [`bleu`] with optional add-epsilon smoothing of zero-match precisions.
pub fn bleu_with(
    candidate: &TokenList,
    reference: &TokenList,
    weights: &[f64; 4],
    smoothing: bool,
) -> Result<f64> {
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Config(format!("BLEU weights must be nonnegative: {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("BLEU weights sum to {sum}, expected 1")));
    }

    if candidate.is_empty() && reference.is_empty() {
        return Ok(1.0);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let p = modified_precision(&candidate.tokens, &reference.tokens, i + 1, smoothing)
            .unwrap_or(1.0);
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += w * p.ln();
    }

    let bp = if candidate.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    };
    Ok(bp * log_sum.exp())
}

/// Fraction of prediction/gold pairs whose tokenizations match exactly.
pub fn closed_accuracy(predictions: &[String], golds: &[String]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Shape(format!(
            "closed_accuracy length mismatch: {} predictions vs {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Domain("closed_accuracy over empty inputs".into()));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| tokenize(p).tokens == tokenize(g).tokens)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// One candidate/reference pair; `closed` marks closed-set rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPair {
    pub candidate: String,
    pub reference: String,
    #[serde(default)]
    pub closed: bool,
}

/// Per-example metric values; also used for the corpus means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub em: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bleu_uniform: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
}

impl MetricsRow {
    fn values(&self) -> [f64; 8] {
        [
            self.em,
            self.precision,
            self.recall,
            self.f1,
            self.bleu_uniform,
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub rows: Vec<MetricsRow>,
    pub corpus: MetricsRow,
    pub closed_accuracy: Option<f64>,
}

/// Scores one tokenized pair on every open-set metric.
pub fn score_pair(candidate: &str, reference: &str, smoothing: bool) -> Result<MetricsRow> {
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    let em = exact_match(&cand, &reference);
    let (precision, recall, f1) = prf(&cand, &reference);
    Ok(MetricsRow {
        em,
        precision,
        recall,
        f1,
        bleu_uniform: bleu_with(&cand, &reference, &BLEU_UNIFORM, smoothing)?,
        bleu_1: bleu_with(&cand, &reference, &BLEU_1, smoothing)?,
        bleu_2: bleu_with(&cand, &reference, &BLEU_2, smoothing)?,
        bleu_3: bleu_with(&cand, &reference, &BLEU_3, smoothing)?,
    })
}

/// Scores every pair, aggregates corpus means, and computes closed-set
/// accuracy over the flagged rows (absent when none are flagged).
pub fn evaluate_corpus(pairs: &[EvalPair], smoothing: bool) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Domain("evaluate_corpus over an empty corpus".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut sums = [0.0f64; 8];
    for pair in pairs {
        let row = score_pair(&pair.candidate, &pair.reference, smoothing)?;
        for (s, v) in sums.iter_mut().zip(row.values()) {
            *s += v;
        }
        rows.push(row);
    }
    let n = rows.len() as f64;
    let corpus = MetricsRow {
        em: sums[0] / n,
        precision: sums[1] / n,
        recall: sums[2] / n,
        f1: sums[3] / n,
        bleu_uniform: sums[4] / n,
        bleu_1: sums[5] / n,
        bleu_2: sums[6] / n,
        bleu_3: sums[7] / n,
    };

    let closed: Vec<&EvalPair> = pairs.iter().filter(|p| p.closed).collect();
    let closed_accuracy = if closed.is_empty() {
        None
    } else {
        let preds: Vec<String> = closed.iter().map(|p| p.candidate.clone()).collect();
        let golds: Vec<String> = closed.iter().map(|p| p.reference.clone()).collect();
        Some(closed_accuracy(&preds, &golds)?)
    };

    Ok(MetricReport { rows, corpus, closed_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn toks(items: &[&str]) -> TokenList {
        TokenList { tokens: items.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn tokenize_cjk_per_character() {
        assert_eq!(tokenize("左肾结石").tokens, vec!["左", "肾", "结", "石"]);
    }

    #[test]
    fn tokenize_latin_words_lowercased() {
        assert_eq!(tokenize("CT scan, 3mm").tokens, vec!["ct", "scan", "3mm"]);
    }

    #[test]
    fn tokenize_empty_and_mixed() {
        assert!(tokenize("").tokens.is_empty());
        assert!(tokenize(" ,.!?;'\"").tokens.is_empty());
        assert_eq!(tokenize("肝cyst 2cm!").tokens, vec!["肝", "cyst", "2cm"]);
    }

    #[test]
    fn tokenize_idempotent_on_space_joined_latin() {
        let t = tokenize("the QUICK brown-fox 42");
        let rejoined = t.tokens.join(" ");
        assert_eq!(tokenize(&rejoined).tokens, t.tokens);
        // CJK joins with the empty separator
        let c = tokenize("左肾结石");
        assert_eq!(tokenize(&c.tokens.join("")).tokens, c.tokens);
    }

    #[test]
    fn exact_match_rules() {
        assert_eq!(exact_match(&toks(&["a", "b"]), &toks(&["a", "b"])), 1.0);
        assert_eq!(exact_match(&toks(&["a", "b"]), &toks(&["b", "a"])), 0.0);
        assert_eq!(exact_match(&toks(&[]), &toks(&[])), 1.0);
    }

    #[test]
    fn prf_hand_cases() {
        let (p, r, f1) = prf(&toks(&["a", "b"]), &toks(&["b", "c"]));
        assert!(close(p, 0.5, 1e-15) && close(r, 0.5, 1e-15) && close(f1, 0.5, 1e-15));

        assert_eq!(prf(&toks(&["x"]), &toks(&["x"])), (1.0, 1.0, 1.0));
        assert_eq!(prf(&toks(&[]), &toks(&["a"])), (0.0, 0.0, 0.0));
        assert_eq!(prf(&toks(&["a"]), &toks(&[])), (0.0, 0.0, 0.0));
        assert_eq!(prf(&toks(&[]), &toks(&[])), (1.0, 1.0, 1.0));
    }

    #[test]
    fn prf_precision_recall_symmetry() {
        let cases = [
            (vec!["a", "b", "b"], vec!["b", "c"]),
            (vec!["x"], vec!["x", "y", "z"]),
            (vec!["甲", "状"], vec!["甲", "状", "腺"]),
        ];
        for (c, r) in cases {
            let cand = toks(&c);
            let reference = toks(&r);
            let forward = prf(&cand, &reference);
            let backward = prf(&reference, &cand);
            assert!(close(forward.0, backward.1, 1e-15));
            assert!(close(forward.1, backward.0, 1e-15));
        }
    }

    #[test]
    fn bleu_identical_is_one_under_every_preset() {
        for tokens in [vec!["a", "b", "c", "d", "e"], vec!["a", "b"], vec!["a"]] {
            let t = toks(&tokens);
            for preset in [BLEU_UNIFORM, BLEU_1, BLEU_2, BLEU_3] {
                let score = bleu(&t, &t, &preset).unwrap();
                assert_eq!(score, 1.0, "{tokens:?} under {preset:?}");
            }
        }
    }

    #[test]
    fn bleu_hand_cases() {
        let cand = toks(&["a", "b", "c"]);
        let reference = toks(&["a", "b", "d"]);
        let b1 = bleu(&cand, &reference, &BLEU_1).unwrap();
        assert!(close(b1, 2.0 / 3.0, 1e-12));
        let b2 = bleu(&cand, &reference, &BLEU_2).unwrap();
        assert!(close(b2, (1.0f64 / 3.0).sqrt(), 1e-12));
        // trigram precision is 0, so BLEU-3 and uniform collapse to 0
        assert_eq!(bleu(&cand, &reference, &BLEU_3).unwrap(), 0.0);
        assert_eq!(bleu(&cand, &reference, &BLEU_UNIFORM).unwrap(), 0.0);
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        let cand = toks(&["the", "the", "the"]);
        let reference = toks(&["the", "cat"]);
        let b1 = bleu(&cand, &reference, &BLEU_1).unwrap();
        assert!(close(b1, 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn bleu_brevity_penalty() {
        // cand 3 tokens vs ref 4: BP = exp(1 - 4/3), p1 = 1
        let cand = toks(&["a", "b", "c"]);
        let reference = toks(&["a", "b", "c", "d"]);
        let expected = (1.0f64 - 4.0 / 3.0).exp();
        assert!(close(bleu(&cand, &reference, &BLEU_1).unwrap(), expected, 1e-12));
    }

    #[test]
    fn bleu_empty_rules() {
        assert_eq!(bleu(&toks(&[]), &toks(&[]), &BLEU_UNIFORM).unwrap(), 1.0);
        assert_eq!(bleu(&toks(&[]), &toks(&["a"]), &BLEU_UNIFORM).unwrap(), 0.0);
        assert_eq!(bleu(&toks(&["a"]), &toks(&[]), &BLEU_UNIFORM).unwrap(), 0.0);
    }

    #[test]
    fn bleu_rejects_bad_weights() {
        let t = toks(&["a"]);
        assert!(matches!(bleu(&t, &t, &[0.5, 0.5, 0.5, 0.5]), Err(Error::Config(_))));
        assert!(matches!(bleu(&t, &t, &[-1.0, 1.0, 0.5, 0.5]), Err(Error::Config(_))));
    }

    #[test]
    fn bleu_smoothing_keeps_zero_matches_positive() {
        let cand = toks(&["a", "b", "c"]);
        let reference = toks(&["x", "y", "z"]);
        assert_eq!(bleu(&cand, &reference, &BLEU_1).unwrap(), 0.0);
        let smoothed = bleu_with(&cand, &reference, &BLEU_1, true).unwrap();
        assert!(smoothed > 0.0 && smoothed < 1e-8);
    }

    #[test]
    fn closed_accuracy_cases() {
        let preds: Vec<String> = ["yes", "No", "yes", "no"].iter().map(|s| s.to_string()).collect();
        let golds: Vec<String> = ["yes", "no", "no", "yes"].iter().map(|s| s.to_string()).collect();
        assert!(close(closed_accuracy(&preds, &golds).unwrap(), 0.5, 1e-15));
        assert!(closed_accuracy(&[], &[]).is_err());
        assert!(matches!(
            closed_accuracy(&preds, &golds[..3].to_vec()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn corpus_identical_pair_all_ones() {
        let pairs = vec![EvalPair {
            candidate: "左肾结石".into(),
            reference: "左肾结石".into(),
            closed: false,
        }];
        let report = evaluate_corpus(&pairs, false).unwrap();
        for v in report.corpus.values() {
            assert_eq!(v, 1.0);
        }
        assert!(report.closed_accuracy.is_none());
    }

    #[test]
    fn corpus_duplication_preserves_means() {
        let pairs = vec![
            EvalPair { candidate: "a b c".into(), reference: "a b d".into(), closed: false },
            EvalPair { candidate: "甲状腺".into(), reference: "甲状腺结节".into(), closed: false },
        ];
        let single = evaluate_corpus(&pairs, false).unwrap();
        let mut doubled = pairs.clone();
        doubled.extend(pairs.clone());
        let twice = evaluate_corpus(&doubled, false).unwrap();
        for (a, b) in single.corpus.values().iter().zip(twice.corpus.values().iter()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn corpus_closed_rows() {
        let pairs = vec![
            EvalPair { candidate: "yes".into(), reference: "yes".into(), closed: true },
            EvalPair { candidate: "no".into(), reference: "yes".into(), closed: true },
            EvalPair { candidate: "open answer".into(), reference: "open answer".into(), closed: false },
        ];
        let report = evaluate_corpus(&pairs, false).unwrap();
        assert!(close(report.closed_accuracy.unwrap(), 0.5, 1e-15));
        assert_eq!(report.rows.len(), 3);
    }

    #[test]
    fn corpus_means_match_row_means() {
        let pairs = vec![
            EvalPair { candidate: "a b".into(), reference: "a c".into(), closed: false },
            EvalPair { candidate: "左肾".into(), reference: "左肾结石".into(), closed: false },
            EvalPair { candidate: "".into(), reference: "x".into(), closed: false },
        ];
        let report = evaluate_corpus(&pairs, false).unwrap();
        for i in 0..8 {
            let mean: f64 =
                report.rows.iter().map(|r| r.values()[i]).sum::<f64>() / report.rows.len() as f64;
            assert!(close(report.corpus.values()[i], mean, 1e-12));
        }
    }

    #[test]
    fn em_one_implies_f1_and_bleu_one() {
        for text in ["左肾结石", "ct scan 3mm", "", "肝 cyst"] {
            let row = score_pair(text, text, false).unwrap();
            assert_eq!(row.em, 1.0);
            assert_eq!(row.f1, 1.0);
            assert_eq!(row.bleu_uniform, 1.0);
        }
    }
}
