//! Target-title oracle and the response post-filters.

use tracing::warn;

use crate::domain::{Catalog, CatalogItem, ItemId, PreferenceFacet, RecommendedItem};
use crate::llm::{ChatBackend, ChatRequest, LlmError};
use crate::text::{contains_title, normalize_text, redact_title};

/// Opaque view of the session targets. Plugins can ask questions about the
/// targets but never read their names, which keeps titles out of
/// `AgentMemory`.
pub trait TargetOracle: Send + Sync {
    /// Whether a recommended entry is one of the targets.
    fn is_target(&self, item: &RecommendedItem) -> bool;
    /// Whether an item id belongs to a target (used to hold targets out of
    /// the summarized history).
    fn is_target_id(&self, id: &ItemId) -> bool;
    /// Whether `text` mentions a target title.
    fn leaks(&self, text: &str) -> bool;
    /// `text` with every target title replaced.
    fn redact(&self, text: &str) -> String;
}

pub const REDACTION: &str = "that movie";

/// Title-matching oracle over the session target items.
#[derive(Debug, Clone)]
pub struct TitleOracle {
    ids: Vec<ItemId>,
    titles: Vec<String>,
}

impl TitleOracle {
    pub fn new(targets: &[CatalogItem]) -> Self {
        TitleOracle {
            ids: targets.iter().map(|t| t.item_id.clone()).collect(),
            titles: targets.iter().map(CatalogItem::normalized_title).collect(),
        }
    }

    pub fn titles(&self) -> &[String] {
        &self.titles
    }
}

impl TargetOracle for TitleOracle {
    fn is_target(&self, item: &RecommendedItem) -> bool {
        if item.item_id.as_ref().is_some_and(|id| self.ids.contains(id)) {
            return true;
        }
        self.titles.iter().any(|t| contains_title(&item.title, t))
    }

    fn is_target_id(&self, id: &ItemId) -> bool {
        self.ids.contains(id)
    }

    fn leaks(&self, text: &str) -> bool {
        self.titles.iter().any(|t| contains_title(text, t))
    }

    fn redact(&self, text: &str) -> String {
        self.titles
            .iter()
            .fold(text.to_string(), |acc, t| redact_title(&acc, t, REDACTION))
    }
}

/// Oracle for sessions with no targets (e.g. a free-form live session).
pub struct NoTargets;

impl TargetOracle for NoTargets {
    fn is_target(&self, _item: &RecommendedItem) -> bool {
        false
    }
    fn is_target_id(&self, _id: &ItemId) -> bool {
        false
    }
    fn leaks(&self, _text: &str) -> bool {
        false
    }
    fn redact(&self, text: &str) -> String {
        text.to_string()
    }
}

const REGENERATE_NOTE: &str =
    "Do not mention any specific movie title in your reply; describe preferences instead.";

/// Calls the backend and enforces the leakage guard: a reply that mentions a
/// target title is regenerated once with a stricter instruction, and if it
/// still leaks the title is redacted.
pub fn guarded_complete(
    llm: &dyn ChatBackend,
    request: &ChatRequest,
    oracle: &dyn TargetOracle,
) -> Result<String, LlmError> {
    let first = llm.complete(request)?.text;
    if !oracle.leaks(&first) {
        return Ok(first);
    }
    warn!(tag = %request.tag, "reply mentioned a target title, regenerating");
    let mut retry = request.clone();
    retry.system_text = format!("{}\n{}", request.system_text, REGENERATE_NOTE);
    let second = llm.complete(&retry)?.text;
    if !oracle.leaks(&second) {
        return Ok(second);
    }
    warn!(tag = %request.tag, "regenerated reply still leaks, redacting");
    Ok(oracle.redact(&second))
}

/// Whether `text` mentions `value` as a token run, case and punctuation
/// insensitive.
pub fn mentions_value(text: &str, value: &str) -> bool {
    let value = normalize_text(value);
    if value.is_empty() {
        return false;
    }
    let text = normalize_text(text);
    let hay: Vec<&str> = text.split(' ').collect();
    let needle: Vec<&str> = value.split(' ').collect();
    crate::text::find_token_run(&hay, &needle).is_some()
}

/// Drops sentences that voice an Unknown facet value which is not also held
/// as a Known value.
pub fn scrub_unknown(text: &str, facets: &[PreferenceFacet]) -> String {
    let secret: Vec<&str> = facets
        .iter()
        .filter(|f| !f.is_known())
        .map(|f| f.value.as_str())
        .filter(|v| {
            !facets
                .iter()
                .any(|k| k.is_known() && normalize_text(&k.value) == normalize_text(v))
        })
        .collect();
    if secret.is_empty() || !secret.iter().any(|v| mentions_value(text, v)) {
        return text.to_string();
    }
    let kept: Vec<&str> = split_sentences(text)
        .into_iter()
        .filter(|s| !secret.iter().any(|v| mentions_value(s, v)))
        .collect();
    kept.join(" ").trim().to_string()
}

fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if matches!(ch, '.' | '!' | '?') {
            let end = i + ch.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Looks up a recommended item in the catalog, as plugins see it.
pub fn resolve<'c>(catalog: &'c Catalog, item: &RecommendedItem) -> Option<&'c CatalogItem> {
    catalog.resolve(item)
}
