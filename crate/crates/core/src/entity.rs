//! Entity normalization and edit-distance similarity.
//!
//! Values are compared after NFKC folding, lower-casing and trimming of
//! surrounding punctuation. Similarity is `1 - distance / max(len)` over
//! Unicode scalar values, so a threshold means the same thing for short and
//! long values.

use unicode_normalization::UnicodeNormalization;

/// Threshold used when a policy does not override it.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("similarity threshold {0} is outside (0, 1]")]
pub struct InvalidThreshold(pub f64);

/// Punctuation trimmed from the ends of a value. Symbols that carry meaning
/// in names (`+`, `#`, `&`) are kept so "C++" stays distinct from "C".
fn is_edge_punct(c: char) -> bool {
    matches!(
        c,
        '.' | ',' | ';' | ':' | '!' | '?' | '"' | '\'' | '`' | '(' | ')' | '[' | ']' | '{' | '}'
            | '<' | '>' | '-' | '_' | '*' | '~' | '/' | '\\' | '|'
            | '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2026}' | '\u{00AB}'
            | '\u{00BB}' | '\u{00A1}' | '\u{00BF}' | '\u{2013}' | '\u{2014}' | '\u{3001}'
            | '\u{3002}'
    )
}

fn normalize_once(text: &str) -> String {
    let folded: String = text.nfkc().collect::<String>().to_lowercase();
    let trimmed = folded.trim_matches(|c: char| c.is_whitespace() || is_edge_punct(c));
    let mut out = String::with_capacity(trimmed.len());
    for word in trimmed.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// NFKC, lower-case, trim surrounding whitespace and punctuation, collapse
/// interior whitespace. Idempotent.
pub fn normalize_entity(text: &str) -> String {
    // Lower-casing can produce sequences that NFKC folds again, so iterate
    // to a fixed point; in practice the second pass is a no-op.
    let mut current = normalize_once(text);
    for _ in 0..4 {
        let next = normalize_once(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

/// Classic unit-cost edit distance over Unicode scalar values.
pub fn levenshtein_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - dist / max(|a|, |b|)`; 1.0 when both are empty.
pub fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein_distance(a, b) as f64 / longest as f64
}

pub fn check_threshold(threshold: f64) -> Result<f64, InvalidThreshold> {
    if threshold > 0.0 && threshold <= 1.0 {
        Ok(threshold)
    } else {
        Err(InvalidThreshold(threshold))
    }
}

/// Whether two raw values name the same entity at the given threshold.
pub fn same_entity(a: &str, b: &str, threshold: f64) -> Result<bool, InvalidThreshold> {
    let threshold = check_threshold(threshold)?;
    Ok(same_entity_unchecked(a, b, threshold))
}

pub(crate) fn same_entity_unchecked(a: &str, b: &str, threshold: f64) -> bool {
    levenshtein_similarity(&normalize_entity(a), &normalize_entity(b)) >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Memoized recursive definition of edit distance, independent of the
    /// two-row table above.
    fn oracle_distance(a: &[char], b: &[char]) -> usize {
        fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
            if i == a.len() {
                return b.len() - j;
            }
            if j == b.len() {
                return a.len() - i;
            }
            if let Some(&d) = memo.get(&(i, j)) {
                return d;
            }
            let d = if a[i] == b[j] {
                go(a, b, i + 1, j + 1, memo)
            } else {
                1 + go(a, b, i + 1, j, memo)
                    .min(go(a, b, i, j + 1, memo))
                    .min(go(a, b, i + 1, j + 1, memo))
            };
            memo.insert((i, j), d);
            d
        }
        go(a, b, 0, 0, &mut HashMap::new())
    }

    fn oracle_similarity(a: &str, b: &str) -> f64 {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let n = a.len().max(b.len());
        if n == 0 {
            1.0
        } else {
            1.0 - oracle_distance(&a, &b) as f64 / n as f64
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_entity("  Mountain View! "), "mountain view");
        assert_eq!(normalize_entity("Google"), "google");
        assert_eq!(normalize_entity(""), "");
        assert_eq!(normalize_entity("C++"), "c++");
        assert_eq!(normalize_entity("new   york\tcity"), "new york city");
    }

    #[test]
    fn fullwidth_latin_folds_to_ascii() {
        // Fullwidth forms U+FF01..U+FF5E sit at a fixed offset of 0xFEE0 from ASCII.
        let input = "Ｇｏｏｇｌｅ";
        let expected: String = input
            .chars()
            .map(|c| char::from_u32(c as u32 - 0xFEE0).unwrap().to_ascii_lowercase())
            .collect();
        assert_eq!(expected, "google");
        assert_eq!(normalize_entity(input), expected);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(levenshtein_similarity("google", "google"), 1.0);
        assert_eq!(oracle_distance(&['g', 'o', 'o', 'g', 'l', 'e'], &['g', 'o', 'o', 'g', 'e', 'l']), 2);
        assert!((levenshtein_similarity("google", "googel") - 0.6667).abs() < 1e-4);
        assert!((levenshtein_similarity("google", "googel") - (1.0 - 2.0 / 6.0)).abs() < 1e-9);
        let mp = oracle_similarity("menlo park", "mountain view");
        assert!(mp < 0.85);
        assert!((levenshtein_similarity("menlo park", "mountain view") - mp).abs() < 1e-12);
        assert_eq!(levenshtein_similarity("", ""), 1.0);
    }

    #[test]
    fn same_entity_examples() {
        assert!(same_entity("Golden Retriever named Max", "golden retriever named Max", 0.85).unwrap());
        assert!(!same_entity("Meta", "Google", 0.85).unwrap());
        let s = oracle_similarity(&normalize_entity("cat named Whiskers"), &normalize_entity("Cat named whiskers."));
        assert!(s >= 0.85);
        assert!(same_entity("cat named Whiskers", "Cat named whiskers.", 0.85).unwrap());
    }

    #[test]
    fn threshold_must_be_in_unit_interval() {
        assert_eq!(same_entity("a", "a", 0.0), Err(InvalidThreshold(0.0)));
        assert_eq!(same_entity("a", "a", 1.5), Err(InvalidThreshold(1.5)));
        assert!(same_entity("a", "a", 1.0).unwrap());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,24}") {
            let once = normalize_entity(&s);
            prop_assert_eq!(normalize_entity(&once), once);
        }

        #[test]
        fn normalize_is_idempotent_any_unicode(s in any::<String>()) {
            let once = normalize_entity(&s);
            prop_assert_eq!(normalize_entity(&once), once);
        }

        #[test]
        fn similarity_matches_oracle(a in "[abc]{0,12}", b in "[abc]{0,12}") {
            let got = levenshtein_similarity(&a, &b);
            prop_assert!((got - oracle_similarity(&a, &b)).abs() < 1e-12);
            prop_assert_eq!(got, levenshtein_similarity(&b, &a));
            prop_assert_eq!(got == 1.0, a == b);
        }

        #[test]
        fn threshold_one_is_normalized_equality(a in "[aB. ]{0,8}", b in "[aB. ]{0,8}") {
            prop_assert_eq!(
                same_entity(&a, &b, 1.0).unwrap(),
                normalize_entity(&a) == normalize_entity(&b)
            );
        }
    }
}
