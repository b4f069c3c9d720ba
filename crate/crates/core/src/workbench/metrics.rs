//! Corpus BLEU and token/sequence accuracy over token ids.

use std::collections::HashMap;

use crate::error::{MptError, Result};
use crate::model::tokens;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in `[0, 100]` with one reference per hypothesis: the
/// geometric mean of clipped n-gram precisions for `n = 1..=max_n` times the
/// brevity penalty, without smoothing. An order with no n-grams in either the
/// hypotheses or the references is skipped rather than counted as zero.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(MptError::Contract("BLEU needs at least one hypothesis".into()));
    }
    if hyps.len() != refs.len() {
        return Err(MptError::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if max_n == 0 {
        return Err(MptError::Contract("BLEU order must be at least 1".into()));
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let (mut matched, mut total, mut ref_total) = (0usize, 0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            total += hc.values().sum::<usize>();
            ref_total += rc.values().sum::<usize>();
            matched += hc.iter().map(|(g, c)| (*c).min(*rc.get(g).unwrap_or(&0))).sum::<usize>();
        }
        if total == 0 && ref_total == 0 {
            continue;
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

/// Token accuracy over non-pad reference positions (a missing hypothesis
/// token counts as wrong) and the exact-match fraction.
pub fn token_and_sequence_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> (f64, f64) {
    let (mut right, mut total, mut exact) = (0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        for (i, &t) in r.iter().enumerate() {
            if t == tokens::PAD {
                continue;
            }
            total += 1;
            right += usize::from(h.get(i) == Some(&t));
        }
        exact += usize::from(h == r);
    }
    let pairs = hyps.len().min(refs.len());
    let tok = if total == 0 { 0.0 } else { right as f64 / total as f64 };
    let seq = if pairs == 0 { 0.0 } else { exact as f64 / pairs as f64 };
    (tok, seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_match_is_100() {
        let c = vec![vec![3, 4, 5, 6, 7], vec![8, 9], vec![5]];
        assert!((corpus_bleu(&c, &c, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn no_four_gram_match_is_zero() {
        let h = vec![vec![3, 4, 5, 6, 7]];
        let r = vec![vec![3, 4, 5, 7, 6]];
        assert_eq!(corpus_bleu(&h, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_sentence() {
        // hyp: 3 4 5 3 4 6 (len 6)   ref: 3 4 5 6 3 4 7 (len 7)
        // 1-grams: hyp {3:2,4:2,5:1,6:1}, ref {3:2,4:2,5:1,6:1,7:1} -> 6/6
        // 2-grams: hyp 34,45,53,34,46 ; ref 34,45,56,63,34,47 -> 34:2,45:1 -> 3/5
        // 3-grams: hyp 345,453,534,346 ; ref 345,456,563,634,347 -> 1/4
        // 4-grams: hyp 3453,4534,5346 ; ref none shared -> 0/3
        let h = vec![vec![3, 4, 5, 3, 4, 6]];
        let r = vec![vec![3, 4, 5, 6, 3, 4, 7]];
        assert_eq!(corpus_bleu(&h, &r, 4).unwrap(), 0.0);
        let want3 = 100.0 * (1.0f64 - 7.0 / 6.0).exp() * (1.0 * 0.6 * 0.25f64).powf(1.0 / 3.0);
        assert!((corpus_bleu(&h, &r, 3).unwrap() - want3).abs() < 1e-6);
        let want2 = 100.0 * (1.0f64 - 7.0 / 6.0).exp() * 0.6f64.sqrt();
        assert!((corpus_bleu(&h, &r, 2).unwrap() - want2).abs() < 1e-6);
    }

    #[test]
    fn clipping_limits_repeats() {
        // hyp 3 3 3 3 vs ref 3 5 5 5: unigram precision 1/4
        let want = 100.0 * 0.25;
        assert!((corpus_bleu(&[vec![3, 3, 3, 3]], &[vec![3, 5, 5, 5]], 1).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn bleu_contracts() {
        assert!(corpus_bleu(&[], &[], 4).is_err());
        assert!(corpus_bleu(&[vec![3]], &[], 4).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let r = vec![vec![3, 4, 5, 6], vec![7, 8, 9, 10]];
        assert_eq!(token_and_sequence_accuracy(&r, &r), (1.0, 1.0));
        let mut h = r.clone();
        h[1][2] = 3;
        assert_eq!(token_and_sequence_accuracy(&h, &r), (7.0 / 8.0, 0.5));
        let h = vec![vec![11, 11, 11, 11], vec![]];
        assert_eq!(token_and_sequence_accuracy(&h, &r), (0.0, 0.0));
        // pad positions in the reference are ignored
        assert_eq!(token_and_sequence_accuracy(&[vec![3, 9]], &[vec![3, 0]]), (1.0, 0.0));
    }

    proptest! {
        #[test]
        fn bleu_in_range_and_100_only_on_exact_match(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(3usize..7, 1..8), proptest::collection::vec(3usize..7, 1..8)),
                1..5,
            )
        ) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let b = corpus_bleu(&h, &r, 4).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
            if (b - 100.0).abs() < 1e-9 {
                prop_assert_eq!(&h, &r);
            }
            prop_assert!((corpus_bleu(&r, &r, 4).unwrap() - 100.0).abs() < 1e-9);
        }
    }
}
