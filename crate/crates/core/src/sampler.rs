//! Conditional code-frequency tables and focused-variation generation.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::binio::{ByteReader, ByteWriter};
use crate::corpus::{
    control_labels, detokenize, encode_condition, lexicalize, Cmr, DatasetMode, DelexMode, Example, SlotKey,
    StyleLabel, SubstitutionMap,
};
use crate::error::{arg_err, FvnError, Result};
use crate::network::{DecodeMode, Fvn};

/// Normalized index counts per condition, plus marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeTables {
    pub mode: DatasetMode,
    pub content_size: usize,
    pub style_size: usize,
    /// Keyed by the sorted set of slot keys.
    pub content: BTreeMap<Vec<SlotKey>, Vec<f64>>,
    /// Keyed by style label, or by slot-value label for the lexicalized corpus.
    pub style: BTreeMap<String, Vec<f64>>,
    pub content_marginal: Vec<f64>,
    pub style_marginal: Vec<f64>,
}

fn normalize(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Style-table keys of a condition.
pub fn style_keys(cmr: &Cmr, style: Option<StyleLabel>, mode: DatasetMode) -> Vec<String> {
    match mode {
        DatasetMode::Personage => style.map(|s| vec![s.as_str().to_string()]).unwrap_or_default(),
        DatasetMode::E2e => control_labels(cmr, mode),
    }
}

/// Count nearest-code usage of every training text under its condition keys.
pub fn build_tables(model: &Fvn, examples: &[Example]) -> Result<CodeTables> {
    let kk = model.content_book().len(&model.params);
    let nn = model.style_book().len(&model.params);
    let mut content: BTreeMap<Vec<SlotKey>, Vec<u64>> = BTreeMap::new();
    let mut style: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut cm = vec![0u64; kk];
    let mut sm = vec![0u64; nn];
    for ex in examples {
        let (k, n) = model.code_indices(&ex.delex_tokens)?;
        content.entry(ex.cmr.key_set()).or_insert_with(|| vec![0; kk])[k] += 1;
        cm[k] += 1;
        for key in style_keys(&ex.cmr, ex.style, model.mode) {
            style.entry(key).or_insert_with(|| vec![0; nn])[n] += 1;
        }
        sm[n] += 1;
    }
    if examples.is_empty() {
        return Err(FvnError::State("cannot build code tables from an empty training set".into()));
    }
    Ok(CodeTables {
        mode: model.mode,
        content_size: kk,
        style_size: nn,
        content: content.into_iter().map(|(k, v)| (k, normalize(&v))).collect(),
        style: style.into_iter().map(|(k, v)| (k, normalize(&v))).collect(),
        content_marginal: normalize(&cm),
        style_marginal: normalize(&sm),
    })
}

/// Which table row served a lookup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", content = "key", rename_all = "kebab-case")]
pub enum Lookup {
    Exact(String),
    Overlap(String),
    Marginal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledCodes {
    pub k: usize,
    /// One index per style key (a single one for style-annotated data).
    pub ns: Vec<usize>,
    pub e_c: Tensor,
    pub e_s: Tensor,
    pub content_lookup: Lookup,
}

pub fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(probs).map_err(|e| FvnError::State(format!("bad probability vector: {e}")))?;
    Ok(dist.sample(rng))
}

fn key_name(keys: &[SlotKey]) -> String {
    keys.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+")
}

impl CodeTables {
    pub fn is_empty(&self) -> bool {
        self.content.is_empty() && self.style.is_empty()
    }

    /// Content vector for a key set: exact match, else the known key set
    /// with the largest overlap (then the smallest symmetric difference,
    /// then table order), else the marginal.
    pub fn content_vector(&self, keys: &[SlotKey]) -> (&[f64], Lookup) {
        if let Some(v) = self.content.get(keys) {
            return (v, Lookup::Exact(key_name(keys)));
        }
        let want: BTreeSet<SlotKey> = keys.iter().copied().collect();
        let mut best: Option<(usize, usize, &Vec<SlotKey>, &Vec<f64>)> = None;
        for (known, v) in &self.content {
            let have: BTreeSet<SlotKey> = known.iter().copied().collect();
            let overlap = want.intersection(&have).count();
            let diff = want.symmetric_difference(&have).count();
            if overlap > 0 && best.is_none_or(|(o, d, _, _)| overlap > o || (overlap == o && diff < d)) {
                best = Some((overlap, diff, known, v));
            }
        }
        match best {
            Some((_, _, known, v)) => (v, Lookup::Overlap(key_name(known))),
            None => (&self.content_marginal, Lookup::Marginal),
        }
    }

    pub fn style_vector(&self, key: &str) -> Option<&[f64]> {
        self.style.get(key).map(Vec::as_slice)
    }

    /// Draw `k` and the style index (or one per slot value, averaging the
    /// selected rows).
    pub fn sample_codes<R: Rng + ?Sized>(
        &self,
        model: &Fvn,
        cmr: &Cmr,
        style: Option<StyleLabel>,
        rng: &mut R,
    ) -> Result<SampledCodes> {
        if self.is_empty() {
            return Err(FvnError::State("code tables are empty".into()));
        }
        let (cv, content_lookup) = self.content_vector(&cmr.key_set());
        let k = draw_index(cv, rng)?;
        let mut ns = Vec::new();
        match self.mode {
            DatasetMode::Personage => {
                let Some(s) = style else {
                    return arg_err(format!("a style label is required; valid labels: {}", self.style_labels()));
                };
                let Some(v) = self.style_vector(s.as_str()) else {
                    return arg_err(format!("style {s} was not seen in training; valid labels: {}", self.style_labels()));
                };
                ns.push(draw_index(v, rng)?);
            }
            DatasetMode::E2e => {
                for key in style_keys(cmr, None, DatasetMode::E2e) {
                    let v = self.style_vector(&key).unwrap_or(&self.style_marginal);
                    ns.push(draw_index(v, rng)?);
                }
            }
        }
        let cbook = model.content_book().entries(&model.params);
        let sbook = model.style_book().entries(&model.params);
        let e_c = Tensor::vector(cbook.row(k).to_vec());
        let e_s = average_rows(sbook, &ns);
        Ok(SampledCodes { k, ns, e_c, e_s, content_lookup })
    }

    fn style_labels(&self) -> String {
        self.style.keys().cloned().collect::<Vec<_>>().join(", ")
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        w.u8(match self.mode {
            DatasetMode::Personage => 0,
            DatasetMode::E2e => 1,
        });
        w.u64(self.content_size as u64);
        w.u64(self.style_size as u64);
        w.u32(self.content.len() as u32);
        for (keys, v) in &self.content {
            w.str(&key_name(keys));
            w.f64s(v);
        }
        w.u32(self.style.len() as u32);
        for (key, v) in &self.style {
            w.str(key);
            w.f64s(v);
        }
        w.f64s(&self.content_marginal);
        w.f64s(&self.style_marginal);
    }

    pub(crate) fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let mode = match r.u8()? {
            0 => DatasetMode::Personage,
            1 => DatasetMode::E2e,
            m => return Err(FvnError::Integrity(format!("unknown table mode {m}"))),
        };
        let content_size = r.u64()? as usize;
        let style_size = r.u64()? as usize;
        let mut content = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let keys = if name.is_empty() {
                Vec::new()
            } else {
                name.split('+')
                    .map(|k| SlotKey::normalize(k).ok_or_else(|| FvnError::Integrity(format!("bad slot key {k}"))))
                    .collect::<Result<Vec<_>>>()?
            };
            content.insert(keys, r.f64s()?);
        }
        let mut style = BTreeMap::new();
        for _ in 0..r.u32()? {
            let key = r.str()?;
            style.insert(key, r.f64s()?);
        }
        let content_marginal = r.f64s()?;
        let style_marginal = r.f64s()?;
        Ok(CodeTables { mode, content_size, style_size, content, style, content_marginal, style_marginal })
    }
}

fn average_rows(book: &Tensor, rows: &[usize]) -> Tensor {
    let d = book.cols();
    let mut acc = vec![0.0; d];
    for &r in rows {
        acc.iter_mut().zip(book.row(r)).for_each(|(a, x)| *a += x);
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    Tensor::vector(acc)
}

/// One generated text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Delexicalized token text.
    pub delex: String,
    /// Surface text: slot placeholders filled from the CMR where the
    /// corpus keeps them delexicalized only partially.
    pub text: String,
    pub k: usize,
    pub ns: Vec<usize>,
    pub content_lookup: Lookup,
}

pub fn generate<R: Rng + ?Sized>(
    model: &Fvn,
    tables: &CodeTables,
    cmr: &Cmr,
    style: Option<StyleLabel>,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Generation> {
    if tables.mode != model.mode {
        return Err(FvnError::Config(format!("tables built for {} but model is {}", tables.mode, model.mode)));
    }
    let codes = tables.sample_codes(model, cmr, style, rng)?;
    let (content, style_ids) = encode_condition(cmr, style, model.mode, &model.vocab);
    let tokens = model.generate_tokens(&content, &style_ids, &codes.e_c, &codes.e_s, mode, rng)?;
    let delex = detokenize(&model.vocab.decode(&tokens));
    let text = match model.mode {
        DatasetMode::Personage => delex.clone(),
        DatasetMode::E2e => lexicalize(&delex, &SubstitutionMap::from_cmr(cmr, DelexMode::NameNearOnly))?,
    };
    Ok(Generation { delex, text, k: codes.k, ns: codes.ns, content_lookup: codes.content_lookup })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeReportEntry {
    pub index: usize,
    pub probability: f64,
    pub generations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeReport {
    pub style_key: String,
    pub entries: Vec<CodeReportEntry>,
}

/// The `top_m` most probable style codes of `style_key`, each with
/// `per_code` greedy generations for conditions drawn from `conditions`.
pub fn inspect_codes<R: Rng + ?Sized>(
    model: &Fvn,
    tables: &CodeTables,
    style_key: &str,
    top_m: usize,
    per_code: usize,
    conditions: &[Cmr],
    rng: &mut R,
) -> Result<CodeReport> {
    let Some(v) = tables.style_vector(style_key) else {
        return arg_err(format!("no style table for {style_key:?}; valid keys: {}", tables.style_labels()));
    };
    if conditions.is_empty() && per_code > 0 {
        return arg_err("inspect_codes needs at least one condition to generate from");
    }
    let mut ranked: Vec<(usize, f64)> = v.iter().copied().enumerate().filter(|(_, p)| *p > 0.0).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_m);
    let style = style_key.parse::<StyleLabel>().ok();
    let sbook = model.style_book().entries(&model.params);
    let cbook = model.content_book().entries(&model.params);
    let mut entries = Vec::with_capacity(ranked.len());
    for (index, probability) in ranked {
        let mut generations = Vec::with_capacity(per_code);
        for _ in 0..per_code {
            let cmr = &conditions[rng.gen_range(0..conditions.len())];
            let (cv, _) = tables.content_vector(&cmr.key_set());
            let k = draw_index(cv, rng)?;
            let (content, style_ids) = encode_condition(cmr, style, model.mode, &model.vocab);
            let e_c = Tensor::vector(cbook.row(k).to_vec());
            let e_s = Tensor::vector(sbook.row(index).to_vec());
            let tokens = model.generate_tokens(&content, &style_ids, &e_c, &e_s, DecodeMode::Greedy, rng)?;
            generations.push(detokenize(&model.vocab.decode(&tokens)));
        }
        entries.push(CodeReportEntry { index, probability, generations });
    }
    Ok(CodeReport { style_key: style_key.to_string(), entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_dataset, parse_cmr, RawRecord};
    use crate::network::{label_inventory, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model_and_data(mode: DatasetMode) -> (Fvn, Vec<Example>) {
        let recs = match mode {
            DatasetMode::Personage => vec![
                RawRecord::new("Name[A], Food[x]", "A serves x food.", Some("agreeable")),
                RawRecord::new("Name[B], Food[y]", "Well, B has y!", Some("extravert")),
                RawRecord::new("Name[C], Area[z]", "C is in z.", Some("agreeable")),
            ],
            DatasetMode::E2e => vec![
                RawRecord::new("name[A], food[French]", "A serves French food.", None),
                RawRecord::new("name[B], area[riverside]", "B is by the riverside.", None),
            ],
        };
        let ds = build_dataset(&recs, mode, None).unwrap();
        let labels = label_inventory(&ds.examples, mode);
        let cfg = ModelConfig { dim: 6, codebook_size: 5, encoder_layers: 1, max_decode_len: 12, ..ModelConfig::default() };
        (Fvn::new(cfg, mode, ds.vocab, labels, None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap(), ds.examples)
    }

    fn hand_tables(mode: DatasetMode, content: Vec<(Vec<SlotKey>, Vec<f64>)>, style: Vec<(&str, Vec<f64>)>) -> CodeTables {
        let k = content[0].1.len();
        let n = style[0].1.len();
        CodeTables {
            mode,
            content_size: k,
            style_size: n,
            content: content.into_iter().collect(),
            style: style.into_iter().map(|(a, b)| (a.to_string(), b)).collect(),
            content_marginal: vec![1.0 / k as f64; k],
            style_marginal: vec![1.0 / n as f64; n],
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize(&[2, 0, 2]), vec![0.5, 0.0, 0.5]);
        assert_eq!(normalize(&[0, 3, 0]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn built_tables_are_distributions_and_match_recount() {
        let (m, ex) = model_and_data(DatasetMode::Personage);
        let t = build_tables(&m, &ex).unwrap();
        assert_eq!(t.content_size, 5);
        assert_eq!(t.style_size, m.vocab.len());
        for v in t.content.values().chain(t.style.values()).chain([&t.content_marginal, &t.style_marginal]) {
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(v.iter().all(|p| *p >= 0.0));
        }
        for e in &ex {
            assert!(t.content.contains_key(&e.cmr.key_set()));
        }
        // Recount oracle for one key set.
        let key = ex[0].cmr.key_set();
        let mut counts = vec![0.0; 5];
        for e in ex.iter().filter(|e| e.cmr.key_set() == key) {
            counts[m.code_indices(&e.delex_tokens).unwrap().0] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let expected: Vec<f64> = counts.iter().map(|c| c / total).collect();
        assert_eq!(t.content[&key], expected);
        assert!(build_tables(&m, &[]).is_err());
    }

    #[test]
    fn one_hot_always_selected_and_fallbacks() {
        let (m, _) = model_and_data(DatasetMode::Personage);
        let n = m.vocab.len();
        let mut onehot = vec![0.0; n];
        onehot[7] = 1.0;
        let t = hand_tables(
            DatasetMode::Personage,
            vec![
                (vec![SlotKey::Name, SlotKey::Food], vec![0.0, 0.0, 1.0, 0.0, 0.0]),
                (vec![SlotKey::Name, SlotKey::Area, SlotKey::Near], vec![0.0, 0.0, 0.0, 1.0, 0.0]),
            ],
            vec![("agreeable", onehot)],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let c = t.sample_codes(&m, &parse_cmr("Name[Q], Food[w]").unwrap(), Some(StyleLabel::Agreeable), &mut rng).unwrap();
            assert_eq!((c.k, c.ns.as_slice()), (2, &[7][..]));
            assert_eq!(c.e_s.data(), m.params.get(m.style_book().param).row(7));
        }
        let c = t.sample_codes(&m, &parse_cmr("Name[Q], Area[w]").unwrap(), Some(StyleLabel::Agreeable), &mut rng).unwrap();
        assert_eq!(c.content_lookup, Lookup::Overlap("Name+Area+Near".into()));
        assert_eq!(c.k, 3);
        let c = t.sample_codes(&m, &parse_cmr("EatType[pub]").unwrap(), Some(StyleLabel::Agreeable), &mut rng).unwrap();
        assert_eq!(c.content_lookup, Lookup::Marginal);
        let err = t.sample_codes(&m, &parse_cmr("Name[Q]").unwrap(), Some(StyleLabel::Extravert), &mut rng).unwrap_err();
        assert!(err.to_string().contains("agreeable"));
        let empty = CodeTables { content: BTreeMap::new(), style: BTreeMap::new(), ..t };
        assert!(matches!(
            empty.sample_codes(&m, &parse_cmr("Name[Q]").unwrap(), Some(StyleLabel::Agreeable), &mut rng),
            Err(FvnError::State(_))
        ));
    }

    #[test]
    fn slot_value_rows_are_averaged() {
        let (m, _) = model_and_data(DatasetMode::E2e);
        let n = m.vocab.len();
        let hot = |i: usize| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        };
        let t = hand_tables(
            DatasetMode::E2e,
            vec![(vec![SlotKey::Name, SlotKey::Food], vec![1.0, 0.0, 0.0, 0.0, 0.0])],
            vec![("Name", hot(4)), ("Food[french]", hot(6))],
        );
        let c = t
            .sample_codes(&m, &parse_cmr("name[Q], food[French]").unwrap(), None, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let book = m.params.get(m.style_book().param);
        let expected: Vec<f64> = book.row(4).iter().zip(book.row(6)).map(|(a, b)| (a + b) / 2.0).collect();
        assert_eq!(c.ns, vec![4, 6]);
        assert_eq!(c.e_s.data(), &expected[..]);
    }

    #[test]
    fn empirical_frequencies_follow_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probs = [0.5, 0.0, 0.5];
        let mut counts = [0.0; 3];
        for _ in 0..10_000 {
            counts[draw_index(&probs, &mut rng).unwrap()] += 1.0;
        }
        let l1: f64 = counts.iter().zip(probs).map(|(c, p)| (c / 10_000.0 - p).abs()).sum();
        assert!(l1 < 0.03);
        assert_eq!(counts[1], 0.0);
    }

    #[test]
    fn generation_is_seeded_and_lexicalized() {
        for mode in [DatasetMode::Personage, DatasetMode::E2e] {
            let (m, ex) = model_and_data(mode);
            let t = build_tables(&m, &ex).unwrap();
            let run = |seed| {
                generate(&m, &t, &ex[0].cmr, ex[0].style, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(seed))
                    .unwrap()
            };
            assert_eq!(run(3), run(3));
            let g = run(3);
            if mode == DatasetMode::E2e {
                assert!(!g.text.contains("_SLOT"));
            }
        }
    }

    #[test]
    fn inspect_report_contract() {
        let (m, ex) = model_and_data(DatasetMode::Personage);
        let t = build_tables(&m, &ex).unwrap();
        let conds: Vec<Cmr> = ex.iter().map(|e| e.cmr.clone()).collect();
        let support = t.style["agreeable"].iter().filter(|p| **p > 0.0).count();
        let run = |seed| inspect_codes(&m, &t, "agreeable", 50, 3, &conds, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let r = run(1);
        assert_eq!(r.entries.len(), support);
        assert!(r.entries.windows(2).all(|w| w[0].probability >= w[1].probability));
        assert!(r.entries.iter().all(|e| e.generations.len() == 3));
        assert_eq!(r, run(1));
        assert!(inspect_codes(&m, &t, "nope", 2, 1, &conds, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let (m, ex) = model_and_data(DatasetMode::E2e);
        let t = build_tables(&m, &ex).unwrap();
        let mut w = ByteWriter::new();
        t.write(&mut w);
        let mut r = ByteReader::new(&w.buf, "TABL");
        assert_eq!(CodeTables::read(&mut r).unwrap(), t);
        r.finish().unwrap();
    }
}
