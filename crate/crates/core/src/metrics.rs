//! Greedy CTC decoding, edit distance and word error rate.

use thiserror::Error;

use crate::model::{words, PosteriorMatrix, TokenTable};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no hypothesis/reference pairs to score")]
    NoData,
}

/// Best-path CTC decode: per-frame argmax, collapse repeats, drop blanks,
/// then turn delimiter tokens into single spaces.
pub fn ctc_greedy_decode(posteriors: &PosteriorMatrix, tokens: &TokenTable) -> String {
    let blank = tokens.blank_index();
    let delimiter = tokens.delimiter_index();
    let mut out = String::new();
    let mut pending_space = false;
    let mut prev = None;
    for token in posteriors.argmax_path() {
        if prev == Some(token) {
            continue;
        }
        prev = Some(token);
        if token == blank {
            continue;
        }
        if token == delimiter {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push_str(tokens.symbol(token));
    }
    out
}

/// Unit-cost edit distance (insertions, deletions, substitutions).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character-level edit distance.
pub fn char_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WordErrors {
    pub errors: usize,
    pub ref_len: usize,
}

impl WordErrors {
    /// Per-utterance WER; an empty reference counts as one word so that
    /// insertions are still penalized.
    pub fn wer(&self) -> f64 {
        self.errors as f64 / self.ref_len.max(1) as f64
    }
}

pub fn word_errors(hyp: &str, reference: &str) -> WordErrors {
    let h: Vec<&str> = words(hyp).collect();
    let r: Vec<&str> = words(reference).collect();
    WordErrors {
        errors: levenshtein(&h, &r),
        ref_len: r.len(),
    }
}

/// Micro-averaged WER: total edits over total reference words.
pub fn corpus_wer<H, R>(pairs: &[(H, R)]) -> Result<f64, MetricsError>
where
    H: AsRef<str>,
    R: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(MetricsError::NoData);
    }
    let (errors, ref_len) = pairs
        .iter()
        .map(|(h, r)| word_errors(h.as_ref(), r.as_ref()))
        .fold((0usize, 0usize), |(e, n), w| (e + w.errors, n + w.ref_len));
    Ok(errors as f64 / ref_len.max(1) as f64)
}

/// Mean of per-utterance WERs.
pub fn corpus_wer_macro<H, R>(pairs: &[(H, R)]) -> Result<f64, MetricsError>
where
    H: AsRef<str>,
    R: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(MetricsError::NoData);
    }
    let total: f64 = pairs
        .iter()
        .map(|(h, r)| word_errors(h.as_ref(), r.as_ref()).wer())
        .sum();
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = naive(ra, rb) + usize::from(x != y);
                sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
            }
        }
    }

    fn path_matrix(path: &[usize], classes: usize) -> PosteriorMatrix {
        let rows = path
            .iter()
            .map(|&k| {
                (0..classes)
                    .map(|c| if c == k { 0.9 } else { 0.1 / (classes - 1) as f64 })
                    .collect()
            })
            .collect();
        PosteriorMatrix::from_rows(rows).unwrap()
    }

    fn idx(t: &TokenTable, s: &str) -> Vec<usize> {
        s.chars()
            .map(|c| match c {
                '_' => t.blank_index(),
                c => t.index_of_char(c).unwrap(),
            })
            .collect()
    }

    #[test]
    fn ctc_collapse_rules() {
        let t = TokenTable::english();
        let c = t.len();
        assert_eq!(ctc_greedy_decode(&path_matrix(&idx(&t, "_aa_b"), c), &t), "ab");
        assert_eq!(ctc_greedy_decode(&path_matrix(&idx(&t, "a_a"), c), &t), "aa");
        assert_eq!(ctc_greedy_decode(&path_matrix(&idx(&t, "hi you"), c), &t), "hi you");
        assert_eq!(ctc_greedy_decode(&path_matrix(&idx(&t, "  a _ b  "), c), &t), "a b");
        assert_eq!(ctc_greedy_decode(&path_matrix(&idx(&t, "___"), c), &t), "");
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(char_levenshtein("kitten", "sitting"), 3);
        assert_eq!(char_levenshtein("", "abc"), 3);
        assert_eq!(char_levenshtein("same", "same"), 0);
    }

    #[test]
    fn word_error_examples() {
        let r = "he left everything behind";
        assert_eq!(word_errors(r, r), WordErrors { errors: 0, ref_len: 4 });
        assert_eq!(
            word_errors("he left everthing behind", r),
            WordErrors { errors: 1, ref_len: 4 }
        );
        assert_eq!(word_errors("", "a b c"), WordErrors { errors: 3, ref_len: 3 });
        assert_eq!(word_errors("", "").wer(), 0.0);
        assert_eq!(word_errors("x y", "").wer(), 2.0);
    }

    #[test]
    fn corpus_wer_aggregation() {
        assert_eq!(corpus_wer::<&str, &str>(&[]), Err(MetricsError::NoData));
        assert_eq!(corpus_wer(&[("a b", "a b"), ("c", "c")]).unwrap(), 0.0);
        assert_eq!(corpus_wer(&[("a x c d", "a b c d")]).unwrap(), 0.25);
        // (1 error, 4 words) + (3 errors, 6 words) = 4 / 10
        let pairs = [("a x c d", "a b c d"), ("p q r", "p q r s t u")];
        assert!((corpus_wer(&pairs).unwrap() - 0.4).abs() < 1e-15);
        assert!((corpus_wer_macro(&pairs).unwrap() - (0.25 + 0.5) / 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn matches_naive_recursion(a in "[abc]{0,8}", b in "[abc]{0,8}") {
            prop_assert_eq!(levenshtein(a.as_bytes(), b.as_bytes()), naive(a.as_bytes(), b.as_bytes()));
        }

        #[test]
        fn metric_axioms(a in prop::collection::vec(0u8..4, 0..12),
                         b in prop::collection::vec(0u8..4, 0..12),
                         c in prop::collection::vec(0u8..4, 0..12)) {
            prop_assert_eq!(levenshtein(&a, &a), 0);
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }

        #[test]
        fn errors_bounded_by_longer_side(h in "[ab ]{0,20}", r in "[ab ]{0,20}") {
            let w = word_errors(&h, &r);
            prop_assert!(w.errors <= words(&h).count().max(words(&r).count()));
        }

        #[test]
        fn decode_has_no_blank_or_double_space(path in prop::collection::vec(0usize..6, 1..40)) {
            let t = TokenTable::english();
            let out = ctc_greedy_decode(&path_matrix(&path, t.len()), &t);
            prop_assert!(!out.contains("<blank>"));
            prop_assert!(!out.contains("  "));
            prop_assert_eq!(out.trim(), out.as_str());
        }

        #[test]
        fn corpus_wer_order_invariant(pairs in prop::collection::vec(("[ab ]{0,10}", "[ab ]{1,10}"), 1..8)) {
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert_eq!(corpus_wer(&pairs).unwrap(), corpus_wer(&rev).unwrap());
        }
    }
}
