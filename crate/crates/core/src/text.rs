//! Title normalization and token-aligned title containment.
//!
//! Leakage auditing and recommendation matching both reduce to the question
//! "does this text mention that title?". Both sides are normalized the same
//! way and compared as token sequences, so `"I loved The Matrix!"` contains
//! `"matrix"` while `"sci-fi"` does not.

const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Minimum character length for a single-token title to match inside a
/// longer text. Shorter single-token titles only match a message that
/// consists of the title alone.
pub const MIN_MATCHABLE_LEN: usize = 3;

/// Lower-cases, strips punctuation and collapses whitespace without touching
/// articles or years. Apostrophes are removed rather than split on so that
/// `"Schindler's"` stays one token.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.chars() {
        if ch == '\'' || ch == '\u{2019}' {
            continue;
        }
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// Canonical title form used for every title comparison in the crate.
///
/// `"The Matrix (1999)"` becomes `"matrix"`. A trailing parenthesized
/// four-digit year is removed, leading articles are dropped while at least
/// one other token remains, then punctuation and whitespace are folded as in
/// [`normalize_text`]. The function is idempotent.
pub fn normalize_title(raw: &str) -> String {
    let without_year = strip_trailing_year(raw.trim());
    let folded = normalize_text(without_year);
    let mut tokens: Vec<&str> = folded.split(' ').filter(|t| !t.is_empty()).collect();
    while tokens.len() > 1 && ARTICLES.contains(&tokens[0]) {
        tokens.remove(0);
    }
    tokens.join(" ")
}

fn strip_trailing_year(s: &str) -> &str {
    let bytes = s.as_bytes();
    // "(dddd)" is six ASCII bytes.
    if bytes.len() < 6 || !s.ends_with(')') {
        return s;
    }
    let tail = &bytes[bytes.len() - 6..];
    let is_year = tail[0] == b'(' && tail[1..5].iter().all(u8::is_ascii_digit);
    if !is_year {
        return s;
    }
    let head = s[..s.len() - 6].trim_end();
    if head.is_empty() {
        s
    } else {
        head
    }
}

/// True when `text` mentions the already-normalized `title` as a
/// token-aligned run.
pub fn contains_title(text: &str, title: &str) -> bool {
    let title_tokens: Vec<&str> = title.split(' ').filter(|t| !t.is_empty()).collect();
    if title_tokens.is_empty() {
        return false;
    }
    let normalized = normalize_text(text);
    let text_tokens: Vec<&str> = normalized.split(' ').filter(|t| !t.is_empty()).collect();

    if title_tokens.len() == 1 && title_tokens[0].chars().count() < MIN_MATCHABLE_LEN {
        return text_tokens == title_tokens;
    }
    find_token_run(&text_tokens, &title_tokens).is_some()
}

/// Index of the first token at which `needle` occurs in `haystack`.
pub(crate) fn find_token_run(haystack: &[&str], needle: &[&str]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Replaces every token-aligned occurrence of `title` in `text` with
/// `replacement`. The returned string is built from normalized tokens, so
/// original casing and punctuation are lost; it is only used as a last-resort
/// redaction.
pub fn redact_title(text: &str, title: &str, replacement: &str) -> String {
    let title_tokens: Vec<&str> = title.split(' ').filter(|t| !t.is_empty()).collect();
    if title_tokens.is_empty() || !contains_title(text, title) {
        return text.to_string();
    }
    // Walk the original text word by word so untouched words keep their form.
    let words: Vec<&str> = text.split_whitespace().collect();
    let keys: Vec<String> = words.iter().map(|w| normalize_text(w)).collect();
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        if let Some(consumed) = match_at(&keys[i..], &title_tokens) {
            out.push(replacement.to_string());
            i += consumed;
        } else {
            out.push(words[i].to_string());
            i += 1;
        }
    }
    let rebuilt = out.join(" ");
    if contains_title(&rebuilt, title) {
        // Title straddles punctuation inside a word ("Se7en-like"); fall back
        // to the normalized form.
        let normalized = normalize_text(text);
        let tokens: Vec<&str> = normalized.split(' ').collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if tokens[i..].starts_with(&title_tokens) {
                out.push(replacement);
                i += title_tokens.len();
            } else {
                out.push(tokens[i]);
                i += 1;
            }
        }
        return out.join(" ");
    }
    rebuilt
}

/// Matches title tokens against a prefix of word keys, where a word key may
/// itself hold several tokens ("sci-fi" -> "sci fi"). Returns how many words
/// were consumed.
fn match_at(keys: &[String], title_tokens: &[&str]) -> Option<usize> {
    let mut needed = title_tokens;
    for (consumed, key) in keys.iter().enumerate() {
        let parts: Vec<&str> = key.split(' ').filter(|t| !t.is_empty()).collect();
        if parts.is_empty() {
            if consumed == 0 {
                return None;
            }
            continue;
        }
        if parts.len() > needed.len() || parts[..] != needed[..parts.len()] {
            return None;
        }
        needed = &needed[parts.len()..];
        if needed.is_empty() {
            return Some(consumed + 1);
        }
    }
    None
}
