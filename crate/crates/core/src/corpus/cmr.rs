use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FvnError, Result};

/// The closed slot inventory shared by both corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SlotKey {
    Name,
    EatType,
    Food,
    PriceRange,
    CustomerRating,
    Area,
    FamilyFriendly,
    Near,
}

impl SlotKey {
    pub const ALL: [SlotKey; 8] = [
        SlotKey::Name,
        SlotKey::EatType,
        SlotKey::Food,
        SlotKey::PriceRange,
        SlotKey::CustomerRating,
        SlotKey::Area,
        SlotKey::FamilyFriendly,
        SlotKey::Near,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SlotKey::Name => "Name",
            SlotKey::EatType => "EatType",
            SlotKey::Food => "Food",
            SlotKey::PriceRange => "PriceRange",
            SlotKey::CustomerRating => "CustomerRating",
            SlotKey::Area => "Area",
            SlotKey::FamilyFriendly => "FamilyFriendly",
            SlotKey::Near => "Near",
        }
    }

    /// Case- and spacing-insensitive lookup: `customer rating` → `CustomerRating`.
    pub fn normalize(raw: &str) -> Option<SlotKey> {
        let folded: String = raw
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        SlotKey::ALL.into_iter().find(|k| k.as_str().to_lowercase() == folded)
    }

    /// Placeholder used in delexicalized text, e.g. `Name_SLOT`.
    pub fn slot_token(self) -> String {
        format!("{}_SLOT", self.as_str())
    }

    /// Parse a `Key_SLOT` placeholder.
    pub fn from_slot_token(token: &str) -> Option<SlotKey> {
        token.strip_suffix("_SLOT").and_then(|k| SlotKey::ALL.into_iter().find(|s| s.as_str() == k))
    }

    /// Lowercased key as it appears in a linearized condition.
    pub fn condition_token(self) -> String {
        self.as_str().to_lowercase()
    }
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The five personality styles of the style-annotated corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StyleLabel {
    Agreeable,
    Disagreeable,
    Conscientious,
    Unconscientious,
    Extravert,
}

impl StyleLabel {
    pub const ALL: [StyleLabel; 5] = [
        StyleLabel::Agreeable,
        StyleLabel::Disagreeable,
        StyleLabel::Conscientious,
        StyleLabel::Unconscientious,
        StyleLabel::Extravert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StyleLabel::Agreeable => "agreeable",
            StyleLabel::Disagreeable => "disagreeable",
            StyleLabel::Conscientious => "conscientious",
            StyleLabel::Unconscientious => "unconscientious",
            StyleLabel::Extravert => "extravert",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<StyleLabel> {
        StyleLabel::ALL.get(i).copied()
    }
}

impl fmt::Display for StyleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StyleLabel {
    type Err = FvnError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_lowercase();
        if lower == "extrovert" {
            return Ok(StyleLabel::Extravert);
        }
        StyleLabel::ALL.into_iter().find(|l| l.as_str() == lower).ok_or_else(|| {
            let valid: Vec<_> = StyleLabel::ALL.iter().map(|l| l.as_str()).collect();
            FvnError::Argument(format!("unknown style {s:?}; valid styles: {}", valid.join(", ")))
        })
    }
}

/// A content meaning representation: ordered slot key/value pairs.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cmr {
    slots: Vec<(SlotKey, String)>,
}

impl Cmr {
    pub fn new(slots: Vec<(SlotKey, String)>) -> Result<Self> {
        if slots.is_empty() || slots.len() > SlotKey::ALL.len() {
            return Err(FvnError::Argument(format!("a CMR holds 1-8 slots, got {}", slots.len())));
        }
        for (i, (k, _)) in slots.iter().enumerate() {
            if slots[..i].iter().any(|(other, _)| other == k) {
                return Err(FvnError::Argument(format!("duplicate slot key {k}")));
            }
        }
        Ok(Cmr { slots })
    }

    pub fn slots(&self) -> &[(SlotKey, String)] {
        &self.slots
    }

    pub fn keys(&self) -> impl Iterator<Item = SlotKey> + '_ {
        self.slots.iter().map(|(k, _)| *k)
    }

    pub fn value(&self, key: SlotKey) -> Option<&str> {
        self.slots.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: SlotKey) -> bool {
        self.value(key).is_some()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Sorted set of slot keys, the conditioning key for content codes.
    pub fn key_set(&self) -> Vec<SlotKey> {
        let mut keys: Vec<_> = self.keys().collect();
        keys.sort();
        keys
    }
}

impl fmt::Display for Cmr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.slots.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}[{v}]")?;
        }
        Ok(())
    }
}

impl FromStr for Cmr {
    type Err = FvnError;

    fn from_str(s: &str) -> Result<Self> {
        parse_cmr(s)
    }
}

/// Parse `Key[value], Key[value], …`.
pub fn parse_cmr(text: &str) -> Result<Cmr> {
    let perr = |offset: usize, message: String| Err(FvnError::Parse { offset, message });
    let mut slots: Vec<(SlotKey, String)> = Vec::new();
    let mut pos = 0;
    let bytes = text.as_bytes();
    loop {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            if slots.is_empty() {
                return perr(pos, "empty CMR".into());
            }
            return perr(pos, "trailing comma".into());
        }
        let key_start = pos;
        let Some(open_rel) = text[pos..].find('[') else {
            return perr(key_start, format!("missing '[' after key {:?}", text[pos..].trim()));
        };
        let open = pos + open_rel;
        let raw_key = text[key_start..open].trim();
        if raw_key.is_empty() || raw_key.contains(',') || raw_key.contains(']') {
            return perr(key_start, format!("malformed key {raw_key:?}"));
        }
        let Some(key) = SlotKey::normalize(raw_key) else {
            return perr(key_start, format!("unknown slot key {raw_key:?}"));
        };
        let value_start = open + 1;
        let Some(close_rel) = text[value_start..].find(']') else {
            return perr(value_start, "unclosed '['".into());
        };
        let close = value_start + close_rel;
        let value = text[value_start..close].trim();
        if value.contains('[') {
            return perr(value_start, "nested '[' inside value".into());
        }
        if slots.iter().any(|(k, _)| *k == key) {
            return perr(key_start, format!("duplicate slot key {key}"));
        }
        slots.push((key, value.to_string()));
        pos = close + 1;
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            break;
        }
        if bytes[pos] != b',' {
            return perr(pos, format!("expected ',' between slots, found {:?}", &text[pos..pos + 1]));
        }
        pos += 1;
    }
    Cmr::new(slots).map_err(|e| FvnError::Parse { offset: 0, message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_table_one_prefix() {
        let cmr = parse_cmr("Name[Fitzbillies], EatType[pub]").unwrap();
        assert_eq!(
            cmr.slots(),
            &[(SlotKey::Name, "Fitzbillies".to_string()), (SlotKey::EatType, "pub".to_string())]
        );
    }

    #[test]
    fn parses_lowercase_keys() {
        let cmr = parse_cmr("name[The Phoenix], food[French]").unwrap();
        assert_eq!(cmr.len(), 2);
        assert_eq!(cmr.value(SlotKey::Name), Some("The Phoenix"));
        let cmr = parse_cmr("customer rating[5 out of 5], priceRange[more than £30]").unwrap();
        assert_eq!(cmr.value(SlotKey::CustomerRating), Some("5 out of 5"));
        assert_eq!(cmr.value(SlotKey::PriceRange), Some("more than £30"));
    }

    #[test]
    fn unclosed_bracket_reports_offset() {
        match parse_cmr("Name[X") {
            Err(FvnError::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(matches!(parse_cmr("Name[a], name[b]"), Err(FvnError::Parse { offset: 9, .. })));
        assert!(matches!(parse_cmr("Name"), Err(FvnError::Parse { .. })));
        assert!(matches!(parse_cmr("Colour[red]"), Err(FvnError::Parse { .. })));
        assert!(matches!(parse_cmr("Name[a] Food[b]"), Err(FvnError::Parse { .. })));
        assert!(matches!(parse_cmr(""), Err(FvnError::Parse { .. })));
    }

    #[test]
    fn style_labels() {
        assert_eq!("Agreeable".parse::<StyleLabel>().unwrap(), StyleLabel::Agreeable);
        assert_eq!("extrovert".parse::<StyleLabel>().unwrap(), StyleLabel::Extravert);
        let err = "grumpy".parse::<StyleLabel>().unwrap_err().to_string();
        assert!(err.contains("agreeable") && err.contains("extravert"));
    }

    fn arb_cmr() -> impl Strategy<Value = Cmr> {
        let value = "[A-Za-z0-9£ -]{0,12}".prop_map(|s| s.trim().to_string());
        proptest::sample::subsequence(SlotKey::ALL.to_vec(), 1..=8)
            .prop_flat_map(move |keys| {
                let n = keys.len();
                (Just(keys), proptest::collection::vec(value.clone(), n))
            })
            .prop_map(|(keys, values)| Cmr::new(keys.into_iter().zip(values).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn serialize_parse_fixed_point(cmr in arb_cmr()) {
            let text = cmr.to_string();
            let reparsed = parse_cmr(&text).unwrap();
            prop_assert_eq!(&reparsed, &cmr);
            prop_assert_eq!(reparsed.to_string(), text);
        }
    }
}
