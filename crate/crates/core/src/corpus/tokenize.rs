//! Rule-based word tokenizer: splits punctuation and English clitics,
//! lowercases everything except `Key_SLOT` placeholders.

const CLITICS: [&str; 6] = ["'s", "'re", "'ve", "'ll", "'d", "'m"];

fn is_slot_token(s: &str) -> bool {
    s.strip_suffix("_SLOT")
        .is_some_and(|k| !k.is_empty() && k.chars().all(|c| c.is_ascii_alphabetic()))
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && c != '_' && c != '£' && c != '$' && c != '€'
}

fn normalize(word: &str) -> String {
    if is_slot_token(word) {
        word.to_string()
    } else {
        word.to_lowercase()
    }
}

fn push_core(core: &str, out: &mut Vec<String>) {
    if core.is_empty() {
        return;
    }
    let lower = core.to_lowercase();
    if lower.len() > 3 && lower.ends_with("n't") {
        let split = core.len() - 3;
        out.push(normalize(&core[..split]));
        out.push("n't".to_string());
        return;
    }
    for clitic in CLITICS {
        if lower.len() > clitic.len() && lower.ends_with(clitic) {
            let split = core.len() - clitic.len();
            out.push(normalize(&core[..split]));
            out.push(clitic.to_string());
            return;
        }
    }
    out.push(normalize(core));
}

/// Split `text` into tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let text = text.replace(['\u{2019}', '\u{2018}'], "'");
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<(usize, char)> = chunk.char_indices().collect();
        let mut lo = 0;
        while lo < chars.len() && is_punct(chars[lo].1) {
            out.push(chars[lo].1.to_string());
            lo += 1;
        }
        let mut hi = chars.len();
        while hi > lo && is_punct(chars[hi - 1].1) {
            hi -= 1;
        }
        let core_start = chars.get(lo).map_or(chunk.len(), |c| c.0);
        let core_end = chars.get(hi).map_or(chunk.len(), |c| c.0);
        push_core(&chunk[core_start..core_end], &mut out);

        // Trailing punctuation, keeping runs of dots together as one token.
        let mut i = hi;
        while i < chars.len() {
            let c = chars[i].1;
            if c == '.' {
                let mut j = i;
                while j < chars.len() && chars[j].1 == '.' {
                    j += 1;
                }
                out.push(".".repeat(j - i));
                i = j;
            } else {
                out.push(c.to_string());
                i += 1;
            }
        }
    }
    out
}

/// Join tokens back with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Name_SLOT is a EatType_SLOT. It's nice, isn't it?"),
            ["Name_SLOT", "is", "a", "EatType_SLOT", ".", "it", "'s", "nice", ",", "is", "n't", "it", "?"]
        );
    }

    #[test]
    fn clitics_and_ellipsis() {
        assert_eq!(tokenize("Let's see... Emm"), ["let", "'s", "see", "...", "emm"]);
        assert_eq!(tokenize("I don't know."), ["i", "do", "n't", "know", "."]);
        assert_eq!(tokenize("Let’s go"), ["let", "'s", "go"]);
    }

    #[test]
    fn keeps_internal_hyphens_and_currency() {
        assert_eq!(tokenize("family-friendly (£20-25)"), ["family-friendly", "(", "£20-25", ")"]);
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("   ").is_empty());
    }
}
