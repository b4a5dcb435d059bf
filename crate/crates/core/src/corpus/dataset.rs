use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cmr::{parse_cmr, Cmr, SlotKey, StyleLabel};
use super::delex::{delexicalize, value_paraphrases, DelexMode, SubstitutionMap};
use super::tokenize::tokenize;
use super::vocab::{Vocabulary, PAD};
use crate::error::{FvnError, Result};

/// Corpus flavour: style-annotated and fully delexicalized, or
/// lexicalized with only name/near placeholders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Personage,
    E2e,
}

impl DatasetMode {
    pub fn delex_mode(self) -> DelexMode {
        match self {
            DatasetMode::Personage => DelexMode::AllSlots,
            DatasetMode::E2e => DelexMode::NameNearOnly,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetMode::Personage => "personage",
            DatasetMode::E2e => "e2e",
        }
    }

    pub fn has_style(self) -> bool {
        self == DatasetMode::Personage
    }
}

impl fmt::Display for DatasetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetMode {
    type Err = FvnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "personage" => Ok(DatasetMode::Personage),
            "e2e" => Ok(DatasetMode::E2e),
            other => Err(FvnError::Argument(format!("unknown mode {other:?} (expected personage or e2e)"))),
        }
    }
}

/// One unparsed row of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub mr: String,
    pub reference: String,
    pub style: Option<String>,
    /// 1-based line number in the source file (0 for in-memory records).
    pub line: usize,
}

impl RawRecord {
    pub fn new(mr: impl Into<String>, reference: impl Into<String>, style: Option<&str>) -> Self {
        RawRecord { mr: mr.into(), reference: reference.into(), style: style.map(str::to_string), line: 0 }
    }
}

/// One training/evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub cmr: Cmr,
    pub style: Option<StyleLabel>,
    pub reference: String,
    pub delex_text: String,
    pub substitutions: SubstitutionMap,
    pub delex_tokens: Vec<u32>,
    pub slot_tokens_present: BTreeSet<SlotKey>,
    pub content_tokens: Vec<u32>,
    pub style_tokens: Vec<u32>,
}

/// Counters gathered while loading.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub records: usize,
    pub distinct_cmrs: usize,
    pub delex_misses: usize,
    pub misses_explained_by_paraphrase: usize,
    pub slot_violations: usize,
    pub slot_count_histogram: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub mode: DatasetMode,
    pub examples: Vec<Example>,
    pub vocab: Vocabulary,
    pub stats: LoadStats,
}

/// Linearize a condition into (content tokens, style tokens).
///
/// Content is `key value-tokens key value-tokens …` with values omitted for
/// placeholder slots. Style is the style label, or for the lexicalized
/// corpus the value tokens of the non-placeholder slots.
pub fn linearize_condition(cmr: &Cmr, style: Option<StyleLabel>, mode: DatasetMode) -> (Vec<String>, Vec<String>) {
    let delex = mode.delex_mode();
    let mut content = Vec::new();
    let mut style_seq = Vec::new();
    for (key, value) in cmr.slots() {
        content.push(key.condition_token());
        if !delex.covers(*key) {
            let toks = tokenize(value);
            content.extend(toks.iter().cloned());
            if mode == DatasetMode::E2e {
                style_seq.extend(toks);
            }
        }
    }
    if mode == DatasetMode::Personage {
        if let Some(s) = style {
            style_seq.push(s.as_str().to_string());
        }
    }
    (content, style_seq)
}

/// Labels predicted by the multi-label content head, and the keys of the
/// per-slot-value code tables: slot keys for placeholder slots,
/// `Key[value]` for lexicalized slots.
pub fn control_labels(cmr: &Cmr, mode: DatasetMode) -> Vec<String> {
    let delex = mode.delex_mode();
    cmr.slots()
        .iter()
        .map(|(k, v)| {
            if delex.covers(*k) {
                k.as_str().to_string()
            } else {
                format!("{k}[{}]", v.trim().to_lowercase())
            }
        })
        .collect()
}

/// Read a comma-separated corpus file with header `mr,ref[,personality]`.
pub fn read_records(path: &Path, mode: DatasetMode) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path)?;
    read_records_from(file, mode)
}

pub fn read_records_from<R: std::io::Read>(reader: R, mode: DatasetMode) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let fmt_err = |line: usize, message: String| FvnError::Format { line, message };
    let headers = rdr.headers().map_err(|e| fmt_err(1, e.to_string()))?.clone();
    let col = |names: &[&str]| {
        headers.iter().position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
    };
    let mr_col = col(&["mr", "meaning_representation"]).ok_or_else(|| fmt_err(1, "missing column 'mr'".into()))?;
    let ref_col = col(&["ref", "reference", "text"]).ok_or_else(|| fmt_err(1, "missing column 'ref'".into()))?;
    let style_col = col(&["personality", "style"]);
    if mode.has_style() && style_col.is_none() {
        return Err(fmt_err(1, "missing column 'personality'".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            fmt_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize, name: &str| {
            rec.get(i).map(str::to_string).ok_or_else(|| fmt_err(line, format!("missing column '{name}'")))
        };
        let style = match style_col {
            Some(i) if mode.has_style() => Some(field(i, "personality")?),
            _ => None,
        };
        out.push(RawRecord { mr: field(mr_col, "mr")?, reference: field(ref_col, "ref")?, style, line });
    }
    Ok(out)
}

/// A generation request: what to say and, for Personage, how.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub cmr: Cmr,
    pub style: Option<StyleLabel>,
}

/// Read a conditions file: a CSV with an `mr` column and, for Personage,
/// a `personality` column. Other columns (e.g. `ref`) are ignored, so a
/// corpus file doubles as a conditions file.
pub fn read_conditions_from<R: std::io::Read>(reader: R, mode: DatasetMode) -> Result<Vec<Condition>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let fmt_err = |line: usize, message: String| FvnError::Format { line, message };
    let headers = rdr.headers().map_err(|e| fmt_err(1, e.to_string()))?.clone();
    let col = |names: &[&str]| {
        headers.iter().position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
    };
    let mr_col = col(&["mr", "meaning_representation"]).ok_or_else(|| fmt_err(1, "missing column 'mr'".into()))?;
    let style_col = col(&["personality", "style"]);
    if mode.has_style() && style_col.is_none() {
        return Err(fmt_err(1, "missing column 'personality'".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| fmt_err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let at = |e: FvnError| fmt_err(line, e.to_string());
        let mr = rec.get(mr_col).ok_or_else(|| fmt_err(line, "missing column 'mr'".into()))?;
        let cmr = parse_cmr(mr).map_err(at)?;
        let style = match style_col {
            Some(i) if mode.has_style() => {
                let raw = rec.get(i).ok_or_else(|| fmt_err(line, "missing column 'personality'".into()))?;
                Some(raw.parse::<StyleLabel>().map_err(at)?)
            }
            _ => None,
        };
        out.push(Condition { cmr, style });
    }
    Ok(out)
}

pub fn read_conditions(path: &Path, mode: DatasetMode) -> Result<Vec<Condition>> {
    read_conditions_from(std::fs::File::open(path)?, mode)
}

/// Parse, delexicalize and tokenize records. With `vocab = None` a fresh
/// vocabulary is built from these records (training split).
pub fn build_dataset(records: &[RawRecord], mode: DatasetMode, vocab: Option<&Vocabulary>) -> Result<Dataset> {
    struct Pending {
        cmr: Cmr,
        style: Option<StyleLabel>,
        reference: String,
        delex_text: String,
        substitutions: SubstitutionMap,
        text: Vec<String>,
        content: Vec<String>,
        style_seq: Vec<String>,
    }
    let mut stats = LoadStats::default();
    let mut pending = Vec::with_capacity(records.len());
    let mut cmrs = BTreeSet::new();
    for r in records {
        let cmr = parse_cmr(&r.mr).map_err(|e| FvnError::Format { line: r.line, message: e.to_string() })?;
        let style = match (&r.style, mode.has_style()) {
            (Some(s), true) => {
                Some(s.parse().map_err(|e: FvnError| FvnError::Format { line: r.line, message: e.to_string() })?)
            }
            (None, true) => return Err(FvnError::Format { line: r.line, message: "missing style label".into() }),
            _ => None,
        };
        let d = delexicalize(&r.reference, &cmr, mode.delex_mode());
        stats.delex_misses += d.misses.len();
        stats.misses_explained_by_paraphrase += d
            .misses
            .iter()
            .filter(|k| {
                let lower = r.reference.to_lowercase();
                value_paraphrases(**k, cmr.value(**k).unwrap_or("")).iter().any(|p| lower.contains(p))
            })
            .count();
        let text = tokenize(&d.text);
        if text.is_empty() {
            return Err(FvnError::Format { line: r.line, message: "empty reference text".into() });
        }
        let (content, style_seq) = linearize_condition(&cmr, style, mode);
        cmrs.insert(cmr.to_string());
        *stats.slot_count_histogram.entry(cmr.len()).or_default() += 1;
        pending.push(Pending {
            cmr,
            style,
            reference: r.reference.clone(),
            delex_text: d.text,
            substitutions: d.substitutions,
            text,
            content,
            style_seq,
        });
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let mut v = Vocabulary::new();
            for p in &pending {
                for t in p.content.iter().chain(&p.style_seq).chain(&p.text) {
                    v.insert(t);
                }
            }
            v
        }
    };
    let examples = pending
        .into_iter()
        .map(|p| {
            let slot_tokens_present: BTreeSet<SlotKey> =
                p.text.iter().filter_map(|t| SlotKey::from_slot_token(t)).collect();
            stats.slot_violations += slot_tokens_present.iter().filter(|k| !p.cmr.contains(**k)).count();
            let mut style_tokens = vocab.encode(&p.style_seq);
            if style_tokens.is_empty() {
                style_tokens.push(PAD);
            }
            Example {
                delex_tokens: vocab.encode(&p.text),
                content_tokens: vocab.encode(&p.content),
                style_tokens,
                slot_tokens_present,
                cmr: p.cmr,
                style: p.style,
                reference: p.reference,
                delex_text: p.delex_text,
                substitutions: p.substitutions,
            }
        })
        .collect::<Vec<_>>();
    stats.records = examples.len();
    stats.distinct_cmrs = cmrs.len();
    Ok(Dataset { mode, examples, vocab, stats })
}

pub fn load_dataset(path: &Path, mode: DatasetMode, vocab: Option<&Vocabulary>) -> Result<Dataset> {
    build_dataset(&read_records(path, mode)?, mode, vocab)
}

/// Encode a generation-time condition with an existing vocabulary.
pub fn encode_condition(cmr: &Cmr, style: Option<StyleLabel>, mode: DatasetMode, vocab: &Vocabulary) -> (Vec<u32>, Vec<u32>) {
    let (content, style_seq) = linearize_condition(cmr, style, mode);
    let mut style_ids = vocab.encode(&style_seq);
    if style_ids.is_empty() {
        style_ids.push(PAD);
    }
    (vocab.encode(&content), style_ids)
}

/// Examples sharing an identical condition, for multi-reference scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceGroup {
    pub cmr: Cmr,
    pub style: Option<StyleLabel>,
    pub members: Vec<usize>,
}

/// Group by serialized CMR + style, in first-occurrence order.
pub fn group_references(examples: &[Example]) -> Vec<ReferenceGroup> {
    let mut index: BTreeMap<(String, Option<StyleLabel>), usize> = BTreeMap::new();
    let mut groups: Vec<ReferenceGroup> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let key = (ex.cmr.to_string(), ex.style);
        match index.get(&key) {
            Some(&g) => groups[g].members.push(i),
            None => {
                index.insert(key, groups.len());
                groups.push(ReferenceGroup { cmr: ex.cmr.clone(), style: ex.style, members: vec![i] });
            }
        }
    }
    groups
}

/// Seeded split into (train, validation) with `fraction` held out.
pub fn split_validation(examples: Vec<Example>, fraction: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let n = examples.len();
    let held = ((n as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_set: BTreeSet<usize> = order[..held.min(n)].iter().copied().collect();
    let mut train = Vec::with_capacity(n - val_set.len());
    let mut val = Vec::with_capacity(val_set.len());
    for (i, ex) in examples.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }
    (train, val)
}

#[derive(Serialize, Deserialize)]
struct DumpRecord<'a> {
    mr: String,
    style: Option<&'a str>,
    reference: &'a str,
    delex: &'a str,
    tokens: Vec<&'a str>,
    content: Vec<&'a str>,
    style_seq: Vec<&'a str>,
}

/// Write the canonical dump: one JSON object per line.
pub fn write_dump<W: Write>(examples: &[Example], vocab: &Vocabulary, mut out: W) -> Result<()> {
    for ex in examples {
        let rec = DumpRecord {
            mr: ex.cmr.to_string(),
            style: ex.style.map(StyleLabel::as_str),
            reference: &ex.reference,
            delex: &ex.delex_text,
            tokens: vocab.decode(&ex.delex_tokens),
            content: vocab.decode(&ex.content_tokens),
            style_seq: vocab.decode(&ex.style_tokens),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| FvnError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditions_file_reads_corpus_and_bare_formats() {
        let corpus = "mr,ref,personality\n\"name[A], food[x]\",A is nice.,agreeable\n";
        let c = read_conditions_from(corpus.as_bytes(), DatasetMode::Personage).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].style, Some(StyleLabel::Agreeable));
        assert_eq!(c[0].cmr.len(), 2);
        let bare = "mr\n\"name[A], near[B]\"\n";
        let c = read_conditions_from(bare.as_bytes(), DatasetMode::E2e).unwrap();
        assert_eq!(c[0].style, None);
        assert!(read_conditions_from(bare.as_bytes(), DatasetMode::Personage).is_err());
        let bad = "mr,personality\n\"name[A]\",grumpy\n";
        match read_conditions_from(bad.as_bytes(), DatasetMode::Personage) {
            Err(FvnError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn linearization_rules() {
        let cmr = parse_cmr("Name[Fitzbillies], EatType[pub]").unwrap();
        let (c, s) = linearize_condition(&cmr, Some(StyleLabel::Agreeable), DatasetMode::Personage);
        assert_eq!(c, ["name", "eattype"]);
        assert_eq!(s, ["agreeable"]);

        let cmr = parse_cmr("food[French]").unwrap();
        let (c, s) = linearize_condition(&cmr, None, DatasetMode::E2e);
        assert_eq!(c, ["food", "french"]);
        assert_eq!(s, ["french"]);

        let cmr = parse_cmr("name[Alimentum], near[Yippee Noodle Bar]").unwrap();
        let (c, s) = linearize_condition(&cmr, None, DatasetMode::E2e);
        assert_eq!(c, ["name", "near"]);
        assert!(s.is_empty());
    }

    #[test]
    fn control_label_inventories() {
        let cmr = parse_cmr("name[X], food[French], priceRange[High]").unwrap();
        assert_eq!(control_labels(&cmr, DatasetMode::E2e), ["Name", "Food[french]", "PriceRange[high]"]);
        assert_eq!(control_labels(&cmr, DatasetMode::Personage), ["Name", "Food", "PriceRange"]);
    }

    #[test]
    fn two_line_file() {
        let csv = "mr,ref\n\"name[Aromi], food[Chinese]\",Aromi serves Chinese food.\n\"name[Zizzi]\",\"Zizzi, a pub.\"\n";
        let ds = build_dataset(&read_records_from(csv.as_bytes(), DatasetMode::E2e).unwrap(), DatasetMode::E2e, None)
            .unwrap();
        assert_eq!(ds.examples.len(), 2);
        let expected: BTreeSet<&str> = [
            "name", "food", "chinese", "Name_SLOT", "serves", "food", ".", ",", "a", "pub",
        ]
        .into_iter()
        .collect();
        assert_eq!(ds.vocab.len(), expected.len() + 4);
        for t in expected {
            assert!(ds.vocab.id(t).is_some(), "{t}");
        }
        assert_eq!(ds.examples[1].style_tokens, vec![PAD]);
        assert_eq!(ds.stats.distinct_cmrs, 2);
    }

    #[test]
    fn missing_column_reports_line() {
        let csv = "mr,ref\nName[A],A is good\n";
        match read_records_from(csv.as_bytes(), DatasetMode::Personage) {
            Err(FvnError::Format { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let csv = "mr,ref,personality\nName[A],A is good,agreeable\nName[B]\n";
        match read_records_from(csv.as_bytes(), DatasetMode::Personage) {
            Err(FvnError::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocabulary_is_stable_and_grouping_works() {
        let recs = vec![
            RawRecord::new("Name[A], Food[x]", "A serves x.", Some("agreeable")),
            RawRecord::new("Name[A], Food[x]", "A has x food.", Some("agreeable")),
            RawRecord::new("Name[B]", "B is here.", Some("extravert")),
        ];
        let a = build_dataset(&recs, DatasetMode::Personage, None).unwrap();
        let b = build_dataset(&recs, DatasetMode::Personage, None).unwrap();
        assert_eq!(a.vocab, b.vocab);
        let groups = group_references(&a.examples);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].members, vec![0, 1]);
        assert_eq!(a.examples[0].slot_tokens_present, [SlotKey::Name, SlotKey::Food].into_iter().collect());
        let (tr, va) = split_validation(a.examples.clone(), 0.34, 1);
        assert_eq!((tr.len(), va.len()), (2, 1));
    }

    #[test]
    fn dump_is_one_json_per_line() {
        let recs = vec![RawRecord::new("Name[A]", "A is here.", Some("agreeable"))];
        let ds = build_dataset(&recs, DatasetMode::Personage, None).unwrap();
        let mut buf = Vec::new();
        write_dump(&ds.examples, &ds.vocab, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["delex"], "Name_SLOT is here.");
        assert_eq!(v["style"], "agreeable");
    }
}
