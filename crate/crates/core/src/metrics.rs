//! Corpus-level caption metrics: BLEU, ROUGE-L, CIDEr and vocabulary usage.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::is_special;
use crate::error::{contract_err, Error, Result};

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;
pub const CIDER_MAX_N: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Candidates and references keyed by an evaluation id. Iteration is in key
/// order, so scores do not depend on insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalCorpus {
    entries: BTreeMap<String, EvalEntry>,
}

impl EvalCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, candidate: Vec<String>, references: Vec<Vec<String>>) -> Result<()> {
        let key = key.into();
        if references.is_empty() || references.iter().any(|r| r.is_empty()) {
            return Err(Error::Data(format!("{key}: references must be non-empty")));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::Data(format!("duplicate evaluation key {key:?}")));
        }
        self.entries.insert(key, EvalEntry { candidate, references });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &EvalEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn non_empty(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(contract_err!("evaluation corpus is empty"));
        }
        Ok(())
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-`n`: clipped n-gram precisions for orders `1..=n`, geometric
/// mean, brevity penalty against the closest reference length (shorter on
/// ties).
pub fn bleu(corpus: &EvalCorpus, n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Parameter(format!("BLEU order must be in 1..=4, got {n}")));
    }
    corpus.non_empty()?;
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for e in corpus.entries.values() {
        let c = e.candidate.len();
        cand_len += c;
        ref_len += e
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c), l))
            .unwrap();
        for k in 1..=n {
            let cand = ngram_counts(&e.candidate, k);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &e.references {
                for (g, cnt) in ngram_counts(r, k) {
                    let m = max_ref.entry(g).or_insert(0);
                    *m = (*m).max(cnt);
                }
            }
            for (g, cnt) in cand {
                total[k - 1] += cnt;
                matched[k - 1] += cnt.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_mean = (0..n)
        .map(|k| (matched[k] as f64 / total[k] as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_mean.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_single(candidate: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over the corpus of the best LCS F-measure against any reference.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    corpus.non_empty()?;
    let total: f64 = corpus
        .entries
        .values()
        .map(|e| {
            e.references
                .iter()
                .map(|r| rouge_l_single(&e.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / corpus.len() as f64)
}

// ordered maps keep floating-point summation order fixed between runs
type Vector<'a> = BTreeMap<&'a [String], f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, df: &BTreeMap<&[String], usize>, log_images: f64) -> Vector<'a> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 / total as f64 * (log_images - d.ln()))
        })
        .collect()
}

fn cosine(a: &Vector, b: &Vector) -> f64 {
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// Plain CIDEr: for each order 1..=4, the TF-IDF cosine between candidate and
/// each reference averaged over references and images; the orders are
/// averaged and scaled by 10. Document frequencies count the images whose
/// reference set contains the n-gram; idf = ln(images / max(1, df)).
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    corpus.non_empty()?;
    if corpus.len() < 2 {
        return Err(contract_err!("CIDEr needs at least two images for document frequencies"));
    }
    let log_images = (corpus.len() as f64).ln();
    let mut score = 0.0;
    for n in 1..=CIDER_MAX_N {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for e in corpus.entries.values() {
            let grams: BTreeSet<&[String]> = e.references.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in grams {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let mut order_total = 0.0;
        for e in corpus.entries.values() {
            let cand = tfidf(&e.candidate, n, &df, log_images);
            let sim: f64 = e
                .references
                .iter()
                .map(|r| cosine(&cand, &tfidf(r, n, &df, log_images)))
                .sum();
            order_total += sim / e.references.len() as f64;
        }
        score += order_total / corpus.len() as f64;
    }
    Ok(CIDER_SCALE * score / CIDER_MAX_N as f64)
}

/// Distinct non-special tokens across all candidates.
pub fn unique_words<S: AsRef<str>>(candidates: &[Vec<S>]) -> usize {
    candidates
        .iter()
        .flatten()
        .map(|t| t.as_ref())
        .filter(|t| !is_special(t))
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub unique_words: usize,
}

pub fn evaluate(corpus: &EvalCorpus) -> Result<MetricReport> {
    let candidates: Vec<Vec<String>> = corpus.entries.values().map(|e| e.candidate.clone()).collect();
    Ok(MetricReport {
        bleu1: bleu(corpus, 1)?,
        bleu3: bleu(corpus, 3)?,
        bleu4: bleu(corpus, 4)?,
        rouge_l: rouge_l(corpus)?,
        cider: cider(corpus)?,
        unique_words: unique_words(&candidates),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn corpus(items: &[(&str, &[&str])]) -> EvalCorpus {
        let mut c = EvalCorpus::new();
        for (i, (cand, refs)) in items.iter().enumerate() {
            c.insert(format!("k{i}"), tokenize(cand), refs.iter().map(|r| tokenize(r)).collect())
                .unwrap();
        }
        c
    }

    #[test]
    fn identical_candidates_score_one() {
        let c = corpus(&[
            ("a dog runs on the grass", &["a dog runs on the grass"]),
            ("two cats sleep", &["two cats sleep"]),
        ]);
        for n in 1..=3 {
            assert!((bleu(&c, n).unwrap() - 1.0).abs() < 1e-12);
        }
        assert_eq!(rouge_l(&c).unwrap(), 1.0);
        // the 3-token caption has no 4-grams: orders 1-3 score 1, order 4 scores 1/2
        assert!((cider(&c).unwrap() - 8.75).abs() < 1e-12);
    }

    #[test]
    fn cider_is_ten_for_long_distinct_matches() {
        let c = corpus(&[
            ("a dog runs on the grass", &["a dog runs on the grass"]),
            ("two cats sleep on beds", &["two cats sleep on beds"]),
        ]);
        // "on" occurs in both images, so its idf is zero; every other n-gram is unique
        let v = cider(&c).unwrap();
        assert!(v > 0.0 && v <= 10.0);
        let d = corpus(&[
            ("a dog runs fast", &["a dog runs fast"]),
            ("two cats sleep soundly", &["two cats sleep soundly"]),
        ]);
        assert!((cider(&d).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_candidates_score_zero() {
        let c = corpus(&[("x y z", &["a b c"]), ("p q", &["d e f"])]);
        assert_eq!(bleu(&c, 1).unwrap(), 0.0);
        assert_eq!(rouge_l(&c).unwrap(), 0.0);
        assert_eq!(cider(&c).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        // candidate length 2, refs of length 3 and 1: both at distance 1, the shorter wins
        let c = corpus(&[("a b", &["a b c", "a"])]);
        assert!((bleu(&c, 1).unwrap() - 1.0).abs() < 1e-15);
        let c = corpus(&[("a b", &["a b c d"])]);
        assert!((bleu(&c, 1).unwrap() - (1.0f64 - 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn clipping_limits_repeated_words() {
        let c = corpus(&[("the the the the", &["the cat"])]);
        // precision 1/4, candidate longer than reference so no penalty
        assert!((bleu(&c, 1).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rouge_l_hand_value() {
        // LCS("a b c d", "a c e") = 2, P = 2/4, R = 2/3
        let c = corpus(&[("a b c d", &["a c e"])]);
        let (p, r, b2) = (0.5, 2.0 / 3.0, 1.44);
        let f = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l(&c).unwrap() - f).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let empty = EvalCorpus::new();
        assert!(matches!(bleu(&empty, 1), Err(Error::Contract(_))));
        assert!(matches!(rouge_l(&empty), Err(Error::Contract(_))));
        let one = corpus(&[("a", &["a"])]);
        assert!(matches!(cider(&one), Err(Error::Contract(_))));
        assert!(matches!(bleu(&one, 5), Err(Error::Parameter(_))));
        let mut c = EvalCorpus::new();
        assert!(c.insert("k", vec![], vec![]).is_err());
        c.insert("k", vec![], vec![tokenize("a")]).unwrap();
        assert!(c.insert("k", vec![], vec![tokenize("a")]).is_err());
    }

    #[test]
    fn unique_word_counts() {
        assert_eq!(unique_words(&[tokenize("a b"), tokenize("b c")]), 3);
        assert_eq!(unique_words::<String>(&[]), 0);
        assert_eq!(unique_words(&[vec!["<unk>", "a"]]), 1);
    }

    #[test]
    fn extra_identical_reference_never_hurts() {
        let base = corpus(&[("a dog runs", &["the dog sits"]), ("cats sleep", &["a cat sleeps"])]);
        let more = corpus(&[
            ("a dog runs", &["the dog sits", "a dog runs"]),
            ("cats sleep", &["a cat sleeps"]),
        ]);
        assert!(bleu(&more, 1).unwrap() >= bleu(&base, 1).unwrap());
        assert!(rouge_l(&more).unwrap() >= rouge_l(&base).unwrap());
    }
}
