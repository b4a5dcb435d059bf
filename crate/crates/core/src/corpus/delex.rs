use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::cmr::{Cmr, SlotKey};
use crate::error::{FvnError, Result};

/// Which slots get replaced by placeholders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DelexMode {
    AllSlots,
    NameNearOnly,
}

impl DelexMode {
    pub fn covers(self, key: SlotKey) -> bool {
        match self {
            DelexMode::AllSlots => true,
            DelexMode::NameNearOnly => matches!(key, SlotKey::Name | SlotKey::Near),
        }
    }
}

/// Surface strings replaced per slot, in order of occurrence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionMap {
    entries: BTreeMap<SlotKey, Vec<String>>,
}

impl SubstitutionMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: SlotKey, surface: impl Into<String>) {
        self.entries.entry(key).or_default().push(surface.into());
    }

    /// One surface per slot, taken from the CMR values of the covered slots.
    pub fn from_cmr(cmr: &Cmr, mode: DelexMode) -> Self {
        let mut map = Self::new();
        for (k, v) in cmr.slots() {
            if mode.covers(*k) {
                map.push(*k, v.clone());
            }
        }
        map
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn surfaces(&self, key: SlotKey) -> &[String] {
        self.entries.get(&key).map_or(&[], Vec::as_slice)
    }
}

/// Result of delexicalizing one text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delexicalized {
    pub text: String,
    pub substitutions: SubstitutionMap,
    /// Covered slots whose value was not found in the text.
    pub misses: Vec<SlotKey>,
}

const FAMILY_YES: [&str; 9] = [
    "family-friendly",
    "family friendly",
    "kid friendly",
    "kid-friendly",
    "kids friendly",
    "child friendly",
    "child-friendly",
    "children friendly",
    "children-friendly",
];

const FAMILY_NO: [&str; 11] = [
    "not family-friendly",
    "not family friendly",
    "not kid friendly",
    "not kid-friendly",
    "not kids friendly",
    "not child friendly",
    "not child-friendly",
    "not children friendly",
    "not children-friendly",
    "non family-friendly",
    "non-family-friendly",
];

/// Inflectional endings a matched value may absorb (`moderate` → `moderately`).
const SUFFIXES: [&str; 4] = ["ally", "ly", "es", "s"];

fn surface_patterns(key: SlotKey, value: &str) -> Vec<String> {
    let v = value.trim();
    if key == SlotKey::FamilyFriendly {
        match v.to_lowercase().as_str() {
            "yes" => return FAMILY_YES.iter().map(|s| s.to_string()).collect(),
            "no" => return FAMILY_NO.iter().map(|s| s.to_string()).collect(),
            _ => {}
        }
    }
    if v.is_empty() {
        Vec::new()
    } else {
        vec![v.to_string()]
    }
}

fn chars_eq_ci(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

/// Case-insensitive match of `pat` at byte `start`; returns the end offset.
fn match_at(text: &str, start: usize, pat: &str) -> Option<usize> {
    let mut it = text[start..].char_indices();
    for p in pat.chars() {
        let (_, c) = it.next()?;
        if !chars_eq_ci(c, p) {
            return None;
        }
    }
    Some(it.next().map_or(text.len(), |(i, _)| start + i))
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn boundary_before(text: &str, i: usize) -> bool {
    text[..i].chars().next_back().is_none_or(|c| !is_word_char(c))
}

fn boundary_after(text: &str, i: usize) -> bool {
    text[i..].chars().next().is_none_or(|c| !is_word_char(c))
}

fn find_matches(text: &str, pat: &str) -> Vec<(usize, usize)> {
    let mut found = Vec::new();
    for (i, _) in text.char_indices() {
        if !boundary_before(text, i) {
            continue;
        }
        let Some(end) = match_at(text, i, pat) else { continue };
        if boundary_after(text, end) {
            found.push((i, end));
            continue;
        }
        let ends_alpha = pat.chars().next_back().is_some_and(char::is_alphabetic);
        if !ends_alpha {
            continue;
        }
        for suffix in SUFFIXES {
            if let Some(e) = match_at(text, end, suffix) {
                if boundary_after(text, e) {
                    found.push((i, e));
                    break;
                }
            }
        }
    }
    found
}

/// Replace slot values in `text` by `Key_SLOT` placeholders.
///
/// Matching is case-insensitive, anchored at word boundaries, and resolved
/// longest-first so overlapping candidates never both apply.
pub fn delexicalize(text: &str, cmr: &Cmr, mode: DelexMode) -> Delexicalized {
    let mut candidates: Vec<(usize, usize, SlotKey)> = Vec::new();
    let mut covered = Vec::new();
    for (key, value) in cmr.slots() {
        if !mode.covers(*key) {
            continue;
        }
        covered.push(*key);
        for pat in surface_patterns(*key, value) {
            candidates.extend(find_matches(text, &pat).into_iter().map(|(s, e)| (s, e, *key)));
        }
    }
    candidates.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    let mut accepted: Vec<(usize, usize, SlotKey)> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|a| c.1 <= a.0 || c.0 >= a.1) {
            accepted.push(c);
        }
    }
    accepted.sort_by_key(|a| a.0);

    let mut out = String::with_capacity(text.len());
    let mut substitutions = SubstitutionMap::new();
    let mut cursor = 0;
    for (s, e, key) in &accepted {
        out.push_str(&text[cursor..*s]);
        out.push_str(&key.slot_token());
        substitutions.push(*key, &text[*s..*e]);
        cursor = *e;
    }
    out.push_str(&text[cursor..]);
    let misses = covered.into_iter().filter(|k| substitutions.surfaces(*k).is_empty()).collect();
    Delexicalized { text: out, substitutions, misses }
}

/// Locate `Key_SLOT` placeholders: `(start, end, key-or-raw-token)`.
fn find_placeholders(text: &str) -> Vec<(usize, usize, std::result::Result<SlotKey, String>)> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = text[from..].find("_SLOT") {
        let marker = from + rel;
        let end = marker + "_SLOT".len();
        let start = text[..marker]
            .char_indices()
            .rev()
            .take_while(|(_, c)| c.is_ascii_alphabetic())
            .last()
            .map_or(marker, |(i, _)| i);
        from = end;
        if start == marker || !boundary_after(text, end) || !boundary_before(text, start) {
            continue;
        }
        let token = &text[start..end];
        out.push((start, end, SlotKey::from_slot_token(token).ok_or_else(|| token.to_string())));
    }
    out
}

/// Inverse of [`delexicalize`]: the i-th placeholder of a key receives the
/// i-th recorded surface (the last one once they run out).
pub fn lexicalize(text: &str, map: &SubstitutionMap) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut used: BTreeMap<SlotKey, usize> = BTreeMap::new();
    let mut cursor = 0;
    for (s, e, key) in find_placeholders(text) {
        let key = key.map_err(FvnError::Lexicalization)?;
        let surfaces = map.surfaces(key);
        let n = used.entry(key).or_insert(0);
        let Some(surface) = surfaces.get(*n).or(surfaces.last()) else {
            return Err(FvnError::Lexicalization(key.slot_token()));
        };
        *n += 1;
        out.push_str(&text[cursor..s]);
        out.push_str(surface);
        cursor = e;
    }
    out.push_str(&text[cursor..]);
    Ok(out)
}

/// Known paraphrases of E2E values, for explaining delexicalization misses.
pub fn value_paraphrases(key: SlotKey, value: &str) -> &'static [&'static str] {
    let v = value.trim().to_lowercase();
    match (key, v.as_str()) {
        (SlotKey::PriceRange, "high") | (SlotKey::PriceRange, "more than £30") => &["expensive", "high", "pricey"],
        (SlotKey::PriceRange, "cheap") | (SlotKey::PriceRange, "less than £20") => &["cheap", "low", "inexpensive"],
        (SlotKey::PriceRange, "moderate") | (SlotKey::PriceRange, "£20-25") => &["moderate", "average", "mid"],
        (SlotKey::CustomerRating, "5 out of 5") | (SlotKey::CustomerRating, "high") => &["high", "5 star", "five star"],
        (SlotKey::CustomerRating, "1 out of 5") | (SlotKey::CustomerRating, "low") => &["low", "1 star", "one star"],
        (SlotKey::CustomerRating, "3 out of 5") | (SlotKey::CustomerRating, "average") => &["average", "3 star", "three star"],
        _ => &[],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_cmr;

    const TABLE1_CMR: &str = "Name[Fitzbillies], EatType[pub], Food[Italian], CustomerRating[decent], \
        Area[Riverside], FamilyFriendly[No], Near[The Sorrento], PriceRange[Moderate]";
    const TABLE1_TEXT: &str = "Fitzbillies is a pub with a decent rating. It is a moderately priced Italian \
        restaurant in riverside near The Sorrento. It is not family-friendly.";
    const TABLE1_DELEX: &str = "Name_SLOT is a EatType_SLOT with a CustomerRating_SLOT rating. It is a \
        PriceRange_SLOT priced Food_SLOT restaurant in Area_SLOT near Near_SLOT. It is FamilyFriendly_SLOT.";

    #[test]
    fn table_one_text_delexicalizes_exactly() {
        let cmr = parse_cmr(TABLE1_CMR).unwrap();
        let d = delexicalize(TABLE1_TEXT, &cmr, DelexMode::AllSlots);
        assert_eq!(d.text, TABLE1_DELEX);
        assert!(d.misses.is_empty());
        assert_eq!(lexicalize(&d.text, &d.substitutions).unwrap(), TABLE1_TEXT);
    }

    #[test]
    fn slot_free_text_is_unchanged() {
        let cmr = parse_cmr("Name[Blue Spice]").unwrap();
        let d = delexicalize("a quiet place", &cmr, DelexMode::AllSlots);
        assert_eq!(d.text, "a quiet place");
        assert!(d.substitutions.is_empty());
        assert_eq!(d.misses, vec![SlotKey::Name]);
    }

    #[test]
    fn name_near_only_mode() {
        let cmr = parse_cmr(
            "name[The Phoenix], food[French], near[Crowne Plaza Hotel], area[city centre]",
        )
        .unwrap();
        let d = delexicalize("The Phoenix is near Crowne Plaza Hotel", &cmr, DelexMode::NameNearOnly);
        assert_eq!(d.text, "Name_SLOT is near Near_SLOT");
        let d = delexicalize("The Phoenix serves French food in the city centre", &cmr, DelexMode::NameNearOnly);
        assert_eq!(d.text, "Name_SLOT serves French food in the city centre");
    }

    #[test]
    fn longest_match_wins() {
        let cmr = parse_cmr("Name[The Sorrento], Near[Sorrento]").unwrap();
        let d = delexicalize("The Sorrento is near Sorrento.", &cmr, DelexMode::AllSlots);
        assert_eq!(d.text, "Name_SLOT is near Near_SLOT.");
    }

    #[test]
    fn no_match_inside_words() {
        let cmr = parse_cmr("EatType[pub]").unwrap();
        let d = delexicalize("a republic of pubs", &cmr, DelexMode::AllSlots);
        assert_eq!(d.text, "a republic of EatType_SLOT");
    }

    #[test]
    fn lexicalize_cases() {
        let mut map = SubstitutionMap::new();
        map.push(SlotKey::Name, "Fitzbillies");
        assert_eq!(lexicalize("Name_SLOT is nice", &map).unwrap(), "Fitzbillies is nice");
        assert_eq!(lexicalize("plain text", &SubstitutionMap::new()).unwrap(), "plain text");
        match lexicalize("near Near_SLOT", &map) {
            Err(FvnError::Lexicalization(tok)) => assert_eq!(tok, "Near_SLOT"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(lexicalize("Bogus_SLOT", &map), Err(FvnError::Lexicalization(_))));
    }

    #[test]
    fn paraphrase_table() {
        assert!(value_paraphrases(SlotKey::PriceRange, "high").contains(&"expensive"));
        assert!(value_paraphrases(SlotKey::Name, "x").is_empty());
    }
}
