//! Evaluation report tying the corpus metrics together.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::StyleReport;
use crate::corpus::SlotKey;
use crate::error::{arg_err, Result};
use crate::metrics::{bleu, distinct_n, meteor_per_example, nist, rouge_l_per_example, slot_prf, SlotScores, Tokens};

pub const BLEU_MAX_N: usize = 4;
pub const NIST_MAX_N: usize = 5;

/// Corpus-level distinct-n; `None` when no text has `n` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinctRow {
    pub n: usize,
    pub generated: Option<f64>,
    pub ground_truth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub index: usize,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub slots: Option<SlotScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub bleu: f64,
    pub nist: f64,
    pub meteor_lite: f64,
    pub rouge_l: f64,
    pub distinct: Vec<DistinctRow>,
    pub slots: Option<SlotScores>,
    pub style: Option<StyleReport>,
    pub per_example: Vec<ExampleScores>,
}

/// Order-preserving map over `items` on up to `threads` scoped threads.
pub fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

impl EvalReport {
    /// Text-overlap and diversity metrics. Ground-truth distinct-n pools
    /// every reference of every set.
    pub fn compute(hyps: &[Tokens], refs: &[Vec<Tokens>], threads: usize) -> Result<Self> {
        let bleu = bleu(hyps, refs, BLEU_MAX_N)?;
        let nist = nist(hyps, refs, NIST_MAX_N)?;
        let pairs: Vec<(Tokens, Vec<Tokens>)> = hyps.iter().cloned().zip(refs.iter().cloned()).collect();
        let per: Vec<(f64, f64)> = par_map(&pairs, threads, |(h, rs)| {
            let one = std::slice::from_ref(h);
            let set = std::slice::from_ref(rs);
            (rouge_l_per_example(one, set)[0], meteor_per_example(one, set)[0])
        });
        let n = hyps.len() as f64;
        let truth: Vec<Tokens> = refs.iter().flatten().cloned().collect();
        let distinct = (1..=4)
            .map(|k| DistinctRow { n: k, generated: distinct_n(hyps, k), ground_truth: distinct_n(&truth, k) })
            .collect();
        Ok(EvalReport {
            examples: hyps.len(),
            bleu,
            nist,
            meteor_lite: per.iter().map(|p| p.1).sum::<f64>() / n,
            rouge_l: per.iter().map(|p| p.0).sum::<f64>() / n,
            distinct,
            slots: None,
            style: None,
            per_example: per
                .iter()
                .enumerate()
                .map(|(index, &(rouge_l, meteor_lite))| ExampleScores { index, rouge_l, meteor_lite, slots: None })
                .collect(),
        })
    }

    /// Attach slot scores computed on delexicalized hypotheses.
    pub fn with_slots(mut self, delex_hyps: &[Tokens], expected: &[Vec<SlotKey>]) -> Result<Self> {
        if delex_hyps.len() != self.examples {
            return arg_err(format!("{} delexicalized hypotheses for {} examples", delex_hyps.len(), self.examples));
        }
        self.slots = Some(slot_prf(delex_hyps, expected)?);
        for (i, ex) in self.per_example.iter_mut().enumerate() {
            ex.slots = Some(slot_prf(&delex_hyps[i..=i], &expected[i..=i])?);
        }
        Ok(self)
    }

    pub fn with_style(mut self, style: StyleReport) -> Self {
        self.style = Some(style);
        self
    }

    /// Every score lies in its documented range.
    pub fn in_range(&self) -> bool {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let slot_ok = |s: &SlotScores| unit(s.precision) && unit(s.recall) && unit(s.f1);
        unit(self.bleu)
            && self.nist >= 0.0
            && unit(self.meteor_lite)
            && unit(self.rouge_l)
            && self.distinct.iter().all(|d| {
                [d.generated, d.ground_truth].iter().flatten().all(|&x| x > 0.0 && x <= 1.0)
            })
            && self.slots.as_ref().is_none_or(slot_ok)
            && self.style.as_ref().is_none_or(|s| unit(s.accuracy) && unit(s.macro_f1))
            && self.per_example.iter().all(|e| unit(e.rouge_l) && unit(e.meteor_lite))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "examples      {}", self.examples);
        let _ = writeln!(s, "BLEU-{BLEU_MAX_N}        {:.4}", self.bleu);
        let _ = writeln!(s, "NIST-{NIST_MAX_N}        {:.4}", self.nist);
        let _ = writeln!(s, "METEOR-lite   {:.4}", self.meteor_lite);
        let _ = writeln!(s, "ROUGE-L       {:.4}", self.rouge_l);
        let fmt = |x: Option<f64>| x.map_or("absent".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "distinct-n (corpus ratio)  generated  ground-truth");
        for d in &self.distinct {
            let _ = writeln!(s, "  n={}                       {:>9}  {:>12}", d.n, fmt(d.generated), fmt(d.ground_truth));
        }
        if let Some(sl) = &self.slots {
            let _ = writeln!(
                s,
                "slots (micro) P {:.4}  R {:.4}  F1 {:.4}  (tp {} fp {} fn {})",
                sl.precision, sl.recall, sl.f1, sl.true_pos, sl.false_pos, sl.false_neg
            );
        }
        if let Some(st) = &self.style {
            let _ = writeln!(
                s,
                "style accuracy {:.4}  macro P {:.4}  R {:.4}  F1 {:.4}",
                st.accuracy, st.macro_precision, st.macro_recall, st.macro_f1
            );
            let _ = writeln!(s, "confusion (rows gold, columns predicted): {}", st.labels.join(" "));
            for (label, row) in st.labels.iter().zip(&st.confusion) {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
                let _ = writeln!(s, "  {label:<16}{}", cells.join(""));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::style_report;
    use crate::corpus::StyleLabel;

    fn t(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_corpus_is_maximal() {
        let hyps = vec![t("Name_SLOT is a nice place to eat"), t("Name_SLOT serves Food_SLOT food in the centre")];
        let refs: Vec<Vec<Tokens>> = hyps.iter().map(|h| vec![h.clone()]).collect();
        let r = EvalReport::compute(&hyps, &refs, 2).unwrap();
        assert_eq!(r.bleu, 1.0);
        assert_eq!(r.rouge_l, 1.0);
        assert!((r.meteor_lite - EvalReport::compute(&hyps, &refs, 1).unwrap().meteor_lite).abs() == 0.0);
        assert_eq!(r.distinct[0].generated, r.distinct[0].ground_truth);
        let expected = vec![vec![SlotKey::Name], vec![SlotKey::Name, SlotKey::Food]];
        let r = r.with_slots(&hyps, &expected).unwrap();
        assert_eq!(r.slots.unwrap().f1, 1.0);
        assert!(r.per_example.iter().all(|e| e.slots.unwrap().f1 == 1.0));
        let r = r.with_style(style_report(&[StyleLabel::Agreeable], &[StyleLabel::Agreeable]));
        assert!(r.in_range());
        let table = r.to_table();
        assert!(table.contains("BLEU-4        1.0000"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn short_texts_report_absent_distinct() {
        let r = EvalReport::compute(&[t("a b")], &[vec![t("a b c")]], 1).unwrap();
        assert_eq!(r.distinct[2].generated, None);
        assert_eq!(r.distinct[2].ground_truth, Some(1.0));
        assert_eq!(r.distinct[3].ground_truth, None);
        assert!(r.to_table().contains("absent"));
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<usize> = (0..103).collect();
        assert_eq!(par_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(par_map(&Vec::<usize>::new(), 3, |x| *x).is_empty());
    }
}
