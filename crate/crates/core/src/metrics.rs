//! Corpus-level text metrics over pre-tokenized hypotheses and reference sets.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Cmr, DatasetMode, SlotKey};
use crate::error::{arg_err, Result};

pub type Tokens = Vec<String>;

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_corpus(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<()> {
    if hyps.is_empty() {
        return arg_err("empty hypothesis set");
    }
    if hyps.len() != refs.len() {
        return arg_err(format!("{} hypotheses but {} reference sets", hyps.len(), refs.len()));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return arg_err(format!("reference set {i} is empty"));
    }
    Ok(())
}

/// Max count of each n-gram over a reference set.
fn max_ref_counts<'a>(refs: &'a [Tokens], n: usize) -> HashMap<&'a [String], usize> {
    let mut best: HashMap<&[String], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngrams(r, n) {
            let e = best.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    best
}

/// Corpus BLEU with clipped counts, uniform weights and the
/// closest-reference-length brevity penalty (ties go to the shorter).
pub fn bleu(hyps: &[Tokens], refs: &[Vec<Tokens>], max_n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let best = max_ref_counts(rs, n);
            for (g, cnt) in ngrams(h, n) {
                matched[n - 1] += cnt.min(best.get(g).copied().unwrap_or(0));
                total[n - 1] += cnt;
            }
        }
        c += h.len();
        r += rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .expect("nonempty reference set");
    }
    if c == 0 || matched.iter().zip(&total).any(|(m, t)| *m == 0 || *t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(m, t)| (*m as f64 / *t as f64).ln()).sum::<f64>() / max_n as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_p.exp())
}

/// NIST information weights from reference n-gram statistics.
pub fn nist_info(refs: &[Vec<Tokens>], max_n: usize) -> HashMap<Vec<String>, f64> {
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    let mut words = 0usize;
    for r in refs.iter().flatten() {
        words += r.len();
        for n in 1..=max_n {
            for (g, c) in ngrams(r, n) {
                *counts.entry(g.to_vec()).or_insert(0) += c;
            }
        }
    }
    counts
        .iter()
        .map(|(g, &c)| {
            let context = if g.len() == 1 { words } else { counts.get(&g[..g.len() - 1]).copied().unwrap_or(0) };
            let info = if context == 0 { 0.0 } else { (context as f64 / c as f64).log2() };
            (g.clone(), info)
        })
        .collect()
}

/// NIST score: information-weighted clipped n-gram matches, normalized per
/// order by hypothesis n-gram count, times the NIST brevity factor against
/// the average reference length.
pub fn nist(hyps: &[Tokens], refs: &[Vec<Tokens>], max_n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let info = nist_info(refs, max_n);
    let mut gained = vec![0.0; max_n];
    let mut total = vec![0usize; max_n];
    let (mut sys_len, mut ref_len) = (0.0, 0.0);
    for (h, rs) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let best = max_ref_counts(rs, n);
            for (g, cnt) in ngrams(h, n) {
                let m = cnt.min(best.get(g).copied().unwrap_or(0));
                if m > 0 {
                    gained[n - 1] += m as f64 * info.get(g).copied().unwrap_or(0.0);
                }
                total[n - 1] += cnt;
            }
        }
        sys_len += h.len() as f64;
        ref_len += rs.iter().map(|r| r.len() as f64).sum::<f64>() / rs.len() as f64;
    }
    let score: f64 = gained.iter().zip(&total).filter(|(_, t)| **t > 0).map(|(g, t)| g / *t as f64).sum();
    let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
    let ratio = if ref_len > 0.0 { (sys_len / ref_len).min(1.0) } else { 1.0 };
    let bp = if ratio <= 0.0 { 0.0 } else { (beta * ratio.ln().powi(2)).exp() };
    Ok(score * bp)
}

fn lcs(a: &[String], b: &[String]) -> usize {
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

pub const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L F-measure against one reference.
pub fn rouge_l_pair(h: &[String], r: &[String]) -> f64 {
    let l = lcs(h, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / h.len() as f64;
    let rc = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rc / (rc + b2 * p)
}

/// Mean over examples of the best-reference ROUGE-L.
pub fn rouge_l(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    Ok(rouge_l_per_example(hyps, refs).iter().sum::<f64>() / hyps.len() as f64)
}

pub fn rouge_l_per_example(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Vec<f64> {
    hyps.iter().zip(refs).map(|(h, rs)| rs.iter().map(|r| rouge_l_pair(h, r)).fold(0.0, f64::max)).collect()
}

/// Crude suffix stemmer for the second matching stage.
pub fn stem(word: &str) -> &str {
    for suffix in ["ing", "ed", "es", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    word
}

/// Unigram alignment: exact stage, then stem stage. Each hypothesis word
/// takes the free reference position that extends the previous match when
/// one exists, else the leftmost free one.
fn align(h: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; r.len()];
    let mut hyp_match: Vec<Option<usize>> = vec![None; h.len()];
    let stages: [fn(&str, &str) -> bool; 2] = [|a, b| a == b, |a, b| stem(a) == stem(b)];
    for same in stages {
        for i in 0..h.len() {
            if hyp_match[i].is_some() {
                continue;
            }
            let prefer = i.checked_sub(1).and_then(|p| hyp_match[p]).map(|j| j + 1);
            let candidates: Vec<usize> = (0..r.len()).filter(|&j| !ref_used[j] && same(&h[i], &r[j])).collect();
            let pick = match prefer {
                Some(p) if candidates.contains(&p) => Some(p),
                _ => candidates.first().copied(),
            };
            if let Some(j) = pick {
                ref_used[j] = true;
                hyp_match[i] = Some(j);
            }
        }
    }
    hyp_match.iter().enumerate().filter_map(|(i, m)| m.map(|j| (i, j))).collect()
}

/// METEOR-lite sentence score against one reference.
pub fn meteor_pair(h: &[String], r: &[String]) -> f64 {
    let a = align(h, r);
    let m = a.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / h.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let fmean = 10.0 * p * rc / (rc + 9.0 * p);
    let chunks = 1 + a.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor_per_example(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Vec<f64> {
    hyps.iter().zip(refs).map(|(h, rs)| rs.iter().map(|r| meteor_pair(h, r)).fold(0.0, f64::max)).collect()
}

pub fn meteor_lite(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    Ok(meteor_per_example(hyps, refs).iter().sum::<f64>() / hyps.len() as f64)
}

/// Unique over total n-grams across the corpus; `None` when no text has
/// `n` tokens.
pub fn distinct_n(texts: &[Tokens], n: usize) -> Option<f64> {
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for t in texts {
        if t.len() >= n {
            for w in t.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
    }
    (total > 0).then(|| seen.len() as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

/// Micro P/R/F1 of `Key_SLOT` tokens against expected keys. Each expected
/// key can absorb one token; extra copies count as false positives.
pub fn slot_prf(hyps: &[Tokens], expected: &[Vec<SlotKey>]) -> Result<SlotScores> {
    if hyps.len() != expected.len() {
        return arg_err(format!("{} hypotheses but {} slot sets", hyps.len(), expected.len()));
    }
    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
    for (h, keys) in hyps.iter().zip(expected) {
        let mut produced: BTreeMap<SlotKey, usize> = BTreeMap::new();
        let mut unknown = 0;
        for t in h.iter().filter(|t| t.ends_with("_SLOT")) {
            match SlotKey::from_slot_token(t) {
                Some(k) => *produced.entry(k).or_insert(0) += 1,
                None => unknown += 1,
            }
        }
        let mut hit = 0;
        for k in keys {
            if let Some(c) = produced.get_mut(k) {
                if *c > 0 {
                    *c -= 1;
                    hit += 1;
                }
            }
        }
        tp += hit;
        fp += produced.values().sum::<usize>() + unknown;
        fnn += keys.len() - hit;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fnn);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(SlotScores { precision, recall, f1, true_pos: tp, false_pos: fp, false_neg: fnn })
}

/// Keys expected as placeholders in text for each CMR under `mode`.
pub fn expected_slots(cmrs: &[Cmr], mode: DatasetMode) -> Vec<Vec<SlotKey>> {
    let delex = mode.delex_mode();
    cmrs.iter().map(|c| c.keys().filter(|k| delex.covers(*k)).collect()).collect()
}

/// Parse a reference file: groups of lines separated by blank lines.
pub fn parse_reference_groups(text: &str) -> Vec<Vec<String>> {
    let mut groups = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                groups.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line.trim().to_string());
        }
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn crafted() -> (Vec<Tokens>, Vec<Vec<Tokens>>) {
        (
            vec![t("the cat sat on the mat"), t("a dog runs very fast")],
            vec![vec![t("the cat is on the mat")], vec![t("a dog runs fast"), t("the dog runs very fast")]],
        )
    }

    #[test]
    fn bleu_crafted_corpus() {
        // Clipped matches per order: 10/11, 7/9, 4/7, 1/5; lengths 11 vs 11.
        let (h, r) = crafted();
        let expected = (8.0f64 / 99.0).powf(0.25);
        assert!((bleu(&h, &r, 4).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn bleu_clipping_and_identity() {
        let h = vec![t("the the the the")];
        let r = vec![vec![t("the cat")]];
        // Four hypothesis unigrams, one clipped match; longer than the reference.
        assert_eq!(bleu(&h, &r, 1).unwrap(), 0.25);
        let (h, _) = crafted();
        let r: Vec<Vec<Tokens>> = h.iter().map(|x| vec![x.clone()]).collect();
        assert!((bleu(&h, &r, 4).unwrap() - 1.0).abs() < 1e-12);
        assert!(bleu(&[], &[], 4).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        let h = vec![t("a b c d")];
        let r = vec![vec![t("a b c d e f g h")]];
        assert!((bleu(&h, &r, 4).unwrap() - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn nist_hand_values() {
        let h = vec![t("a b c")];
        let r = vec![vec![t("a b c")]];
        // Unigram weights log2(3/1); higher orders carry no information.
        assert!((nist(&h, &r, 5).unwrap() - 3f64.log2()).abs() < 1e-12);
        let h = vec![t("a"), t("a")];
        let r = vec![vec![t("a")], vec![t("a")]];
        assert_eq!(nist(&h, &r, 5).unwrap(), 0.0);
    }

    #[test]
    fn nist_brevity_halves_at_two_thirds() {
        let h = vec![t("x y")];
        let r = vec![vec![t("x y z")]];
        let info = nist_info(&r, 5);
        let raw = (info[&t("x")] + info[&t("y")]) / 2.0 + info[&t("x y")];
        assert!((nist(&h, &r, 5).unwrap() - 0.5 * raw).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_values() {
        let (p, r) = (0.75, 1.0);
        let b2 = 1.44;
        let expected = (1.0 + b2) * p * r / (r + b2 * p);
        assert!((rouge_l_pair(&t("a b c d"), &t("a c d")) - expected).abs() < 1e-12);
        assert_eq!(rouge_l_pair(&t("x y"), &t("a b")), 0.0);
        assert_eq!(rouge_l_pair(&t("a b"), &t("a b")), 1.0);
    }

    #[test]
    fn meteor_hand_alignment() {
        // the=the, sat=sat exact; cats~cat by stem; one chunk of 3.
        let s = meteor_pair(&t("the cats sat down"), &t("the cat sat up"));
        assert!((s - 0.75 * (1.0 - 0.5 / 27.0)).abs() < 1e-12);
        assert_eq!(stem("cats"), "cat");
        let id = meteor_pair(&t("a b c d e f"), &t("a b c d e f"));
        assert!((id - (1.0 - 0.5 / 216.0)).abs() < 1e-12);
    }

    #[test]
    fn distinct_values() {
        assert!((distinct_n(&[t("a b a")], 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let copies = vec![t("a b c a b"); 3];
        assert!((distinct_n(&copies, 2).unwrap() - 3.0 / 12.0).abs() < 1e-12);
        assert_eq!(distinct_n(&[t("a b"), t("c d")], 2), Some(1.0));
        assert_eq!(distinct_n(&[t("a"), t("b")], 2), None);
    }

    #[test]
    fn slot_hand_counts() {
        use SlotKey::*;
        let s = slot_prf(&[t("Name_SLOT is EatType_SLOT")], &[vec![Name, Food]]).unwrap();
        assert_eq!((s.precision, s.recall), (0.5, 0.5));
        let s = slot_prf(&[t("Name_SLOT and Name_SLOT")], &[vec![Name]]).unwrap();
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        let s = slot_prf(&[t("Name_SLOT serves Food_SLOT")], &[vec![Name, Food]]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn reference_groups() {
        let g = parse_reference_groups("a b\nc d\n\n\ne f\n");
        assert_eq!(g, vec![vec!["a b".to_string(), "c d".to_string()], vec!["e f".to_string()]]);
    }

    fn arb_corpus() -> impl Strategy<Value = (Vec<Tokens>, Vec<Vec<Tokens>>)> {
        let sent = prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..8)
            .prop_map(|v| v.into_iter().map(str::to_string).collect::<Tokens>());
        prop::collection::vec((sent.clone(), prop::collection::vec(sent, 1..3)), 1..6)
            .prop_map(|pairs| pairs.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn permutation_invariant((h, r) in arb_corpus(), rot in 0usize..6) {
            let k = rot % h.len();
            let mut h2 = h.clone();
            let mut r2 = r.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            prop_assert!((bleu(&h, &r, 4).unwrap() - bleu(&h2, &r2, 4).unwrap()).abs() < 1e-12);
            prop_assert!((nist(&h, &r, 5).unwrap() - nist(&h2, &r2, 5).unwrap()).abs() < 1e-9);
            prop_assert!((rouge_l(&h, &r).unwrap() - rouge_l(&h2, &r2).unwrap()).abs() < 1e-12);
            prop_assert!((meteor_lite(&h, &r).unwrap() - meteor_lite(&h2, &r2).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ranges_and_duplicate_references((h, r) in arb_corpus()) {
            let b = bleu(&h, &r, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!(nist(&h, &r, 5).unwrap() >= 0.0);
            let dup: Vec<Vec<Tokens>> = r.iter().map(|rs| { let mut x = rs.clone(); x.push(rs[0].clone()); x }).collect();
            prop_assert_eq!(bleu(&h, &dup, 4).unwrap(), b);
            let m = meteor_lite(&h, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }

        #[test]
        fn self_reference_is_maximal((h, _r) in arb_corpus()) {
            let r: Vec<Vec<Tokens>> = h.iter().map(|x| vec![x.clone()]).collect();
            prop_assert!((rouge_l(&h, &r).unwrap() - 1.0).abs() < 1e-12);
            let b = bleu(&h, &r, 4).unwrap();
            let has_4grams = h.iter().any(|x| x.len() >= 4);
            prop_assert!(!has_4grams || (b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn slot_f1_is_harmonic_mean(n in 0usize..4, extra in 0usize..3) {
            let keys: Vec<SlotKey> = SlotKey::ALL[..n].to_vec();
            let mut toks: Tokens = keys.iter().map(|k| k.slot_token()).collect();
            toks.extend(std::iter::repeat_n("Near_SLOT".to_string(), extra));
            let s = slot_prf(&[toks], &[keys]).unwrap();
            let hm = if s.precision + s.recall == 0.0 { 0.0 } else { 2.0 * s.precision * s.recall / (s.precision + s.recall) };
            prop_assert!((s.f1 - hm).abs() < 1e-12);
        }
    }
}
