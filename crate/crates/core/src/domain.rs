//! Shared domain types.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::text::{contains_title, normalize_title};

/// Attribute names used by the movie catalogs.
pub mod attr {
    pub const GENRE: &str = "genre";
    pub const DIRECTOR: &str = "director";
    pub const ACTOR: &str = "actor";
    pub const LANGUAGE: &str = "language";
    pub const RELEASE_DATE: &str = "release_date";
    pub const RUNTIME: &str = "runtime";
    pub const PLOT_KEYWORDS: &str = "plot_keywords";

    pub const ALL: [&str; 7] = [
        GENRE,
        DIRECTOR,
        ACTOR,
        LANGUAGE,
        RELEASE_DATE,
        RUNTIME,
        PLOT_KEYWORDS,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_string())
    }
}

impl From<String> for ItemId {
    fn from(s: String) -> Self {
        ItemId(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: ItemId,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default)]
    pub attributes: BTreeMap<String, Vec<String>>,
}

impl CatalogItem {
    /// Title with the year appended when the raw title does not carry one.
    pub fn display_title(&self) -> String {
        match self.year {
            Some(y) if !self.title.trim_end().ends_with(')') => format!("{} ({y})", self.title),
            _ => self.title.clone(),
        }
    }

    pub fn normalized_title(&self) -> String {
        normalize_title(&self.title)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl Default for RatingScale {
    fn default() -> Self {
        RatingScale { min: 0.5, max: 5.0 }
    }
}

impl RatingScale {
    pub fn contains(&self, rating: f64) -> bool {
        rating >= self.min && rating <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    #[serde(default)]
    pub persona_text: String,
    #[serde(default)]
    pub taste_summary: String,
    #[serde(default)]
    pub basic_info: BTreeMap<String, String>,
    #[serde(default)]
    pub interaction_history: Vec<RatingRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Known,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacetOrigin {
    Initial,
    Activated,
}

/// One attribute-level real-time preference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferenceFacet {
    pub attribute: String,
    pub value: String,
    pub visibility: Visibility,
    pub origin: FacetOrigin,
    pub anonymized: bool,
    /// Message turn at which an Unknown facet was promoted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activated_at: Option<u32>,
}

impl PreferenceFacet {
    pub fn new(attribute: impl Into<String>, value: impl Into<String>) -> Self {
        PreferenceFacet {
            attribute: attribute.into(),
            value: value.into(),
            visibility: Visibility::Known,
            origin: FacetOrigin::Initial,
            anonymized: false,
            activated_at: None,
        }
    }

    pub fn with_visibility(mut self, visibility: Visibility) -> Self {
        self.visibility = visibility;
        self
    }

    pub fn is_known(&self) -> bool {
        self.visibility == Visibility::Known
    }

    /// Unknown -> Known. Known facets are left untouched; the transition
    /// never runs the other way.
    pub fn promote(&mut self, turn: u32) -> bool {
        if self.visibility == Visibility::Unknown {
            self.visibility = Visibility::Known;
            self.origin = FacetOrigin::Activated;
            self.activated_at = Some(turn);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Simulator,
    Crs,
    Human,
}

impl Role {
    /// Role as seen by a CRS on the wire: anything on the user side is "user".
    pub fn wire_name(self) -> &'static str {
        match self {
            Role::Simulator | Role::Human => "user",
            Role::Crs => "assistant",
        }
    }

    pub fn is_user_side(self) -> bool {
        matches!(self, Role::Simulator | Role::Human)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendedItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<ItemId>,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    pub turn: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommended_items: Option<Vec<RecommendedItem>>,
}

impl Message {
    pub fn is_recommendation(&self) -> bool {
        self.recommended_items.as_ref().is_some_and(|items| !items.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentKind {
    Ask,
    Recommend,
    ChitChat,
}

/// A classified CRS intent. `rel_attr` is carried only by [`Intent::Ask`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intent {
    Ask { rel_attr: String },
    Recommend,
    ChitChat,
}

impl Intent {
    pub fn kind(&self) -> IntentKind {
        match self {
            Intent::Ask { .. } => IntentKind::Ask,
            Intent::Recommend => IntentKind::Recommend,
            Intent::ChitChat => IntentKind::ChitChat,
        }
    }

    pub fn rel_attr(&self) -> Option<&str> {
        match self {
            Intent::Ask { rel_attr } => Some(rel_attr),
            _ => None,
        }
    }
}

/// Simulator-side memory. It never holds a target title; the titles stay
/// with the harness and reach plugins only through an opaque oracle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentMemory {
    pub long_term: UserProfile,
    pub real_time: Vec<PreferenceFacet>,
    pub dialogue_log: Vec<Message>,
}

impl AgentMemory {
    pub fn known_facets(&self) -> impl Iterator<Item = &PreferenceFacet> {
        self.real_time.iter().filter(|f| f.is_known())
    }

    pub fn unknown_facets(&self) -> impl Iterator<Item = &PreferenceFacet> {
        self.real_time.iter().filter(|f| !f.is_known())
    }

    /// True when any string in the memory mentions one of `titles`
    /// (normalized titles).
    pub fn mentions_any(&self, titles: &[String]) -> bool {
        let serialized = serde_json::to_string(self).unwrap_or_default();
        let mut texts = vec![serialized];
        texts.push(self.long_term.persona_text.clone());
        texts.push(self.long_term.taste_summary.clone());
        texts.extend(self.real_time.iter().map(|f| f.value.clone()));
        texts.extend(self.dialogue_log.iter().map(|m| m.text.clone()));
        titles.iter().any(|t| texts.iter().any(|s| contains_title(s, t)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "turn", rename_all = "snake_case")]
pub enum SessionStatus {
    Ongoing,
    /// CRS round (1-based) in which a target was first recommended.
    Succeeded(u32),
    MaxTurnsReached,
}

impl SessionStatus {
    pub fn success_turn(self) -> Option<u32> {
        match self {
            SessionStatus::Succeeded(t) => Some(t),
            _ => None,
        }
    }

    pub fn is_terminal(self) -> bool {
        !matches!(self, SessionStatus::Ongoing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakKind {
    History,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakEvidence {
    pub kind: LeakKind,
    pub turn: u32,
    pub title: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageFlags {
    pub history_leak: bool,
    pub response_leak: bool,
    pub evidence: Vec<LeakEvidence>,
}

impl LeakageFlags {
    /// Flags derived from the evidence list, so they can never disagree.
    pub fn from_evidence(evidence: Vec<LeakEvidence>) -> Self {
        LeakageFlags {
            history_leak: evidence.iter().any(|e| e.kind == LeakKind::History),
            response_leak: evidence.iter().any(|e| e.kind == LeakKind::Response),
            evidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub target_items: Vec<CatalogItem>,
    pub memory: AgentMemory,
    pub transcript: Vec<Message>,
    /// Number of leading transcript messages taken from an annotated prefix.
    #[serde(default)]
    pub seed_prefix_len: usize,
    pub status: SessionStatus,
    pub leakage: LeakageFlags,
    pub rng_seed: u64,
    pub max_turns: u32,
}

impl SessionState {
    pub fn target_titles(&self) -> Vec<String> {
        self.target_items.iter().map(|i| i.normalized_title()).collect()
    }

    /// CRS rounds taken after the annotated prefix.
    pub fn crs_rounds(&self) -> u32 {
        self.transcript[self.seed_prefix_len.min(self.transcript.len())..]
            .iter()
            .filter(|m| m.role == Role::Crs)
            .count() as u32
    }

    pub fn next_turn_index(&self) -> u32 {
        self.transcript.last().map_or(0, |m| m.turn + 1)
    }
}

/// Item lookup by id and by normalized title.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: Vec<CatalogItem>,
    by_id: HashMap<ItemId, usize>,
    by_title: HashMap<String, usize>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CatalogError {
    #[error("duplicate item id {0}")]
    DuplicateId(ItemId),
    #[error("item {item}: release_date {value:?} is not a calendar date")]
    BadReleaseDate { item: ItemId, value: String },
    #[error("item {item}: runtime {value:?} is not a minute count")]
    BadRuntime { item: ItemId, value: String },
}

impl Catalog {
    pub fn new(items: Vec<CatalogItem>) -> Result<Self, CatalogError> {
        let mut by_id = HashMap::with_capacity(items.len());
        let mut by_title = HashMap::with_capacity(items.len());
        for (idx, item) in items.iter().enumerate() {
            if by_id.insert(item.item_id.clone(), idx).is_some() {
                return Err(CatalogError::DuplicateId(item.item_id.clone()));
            }
            for value in item.attributes.get(attr::RELEASE_DATE).into_iter().flatten() {
                if crate::plugins::preferences::parse_calendar_date(value).is_none() {
                    return Err(CatalogError::BadReleaseDate {
                        item: item.item_id.clone(),
                        value: value.clone(),
                    });
                }
            }
            for value in item.attributes.get(attr::RUNTIME).into_iter().flatten() {
                if crate::plugins::preferences::parse_minutes(value).is_none() {
                    return Err(CatalogError::BadRuntime {
                        item: item.item_id.clone(),
                        value: value.clone(),
                    });
                }
            }
            by_title.entry(item.normalized_title()).or_insert(idx);
        }
        Ok(Catalog {
            items,
            by_id,
            by_title,
        })
    }

    pub fn get(&self, id: &ItemId) -> Option<&CatalogItem> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn by_title(&self, title: &str) -> Option<&CatalogItem> {
        self.by_title.get(&normalize_title(title)).map(|&i| &self.items[i])
    }

    /// Resolves a recommended item by id first, then by title.
    pub fn resolve(&self, item: &RecommendedItem) -> Option<&CatalogItem> {
        item.item_id
            .as_ref()
            .and_then(|id| self.get(id))
            .or_else(|| self.by_title(&item.title))
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Attribute names present anywhere in the catalog, plus the standard set.
    pub fn attribute_vocabulary(&self) -> Vec<String> {
        let mut vocab: Vec<String> = attr::ALL.iter().map(|s| s.to_string()).collect();
        for item in &self.items {
            for key in item.attributes.keys() {
                if !vocab.contains(key) {
                    vocab.push(key.clone());
                }
            }
        }
        vocab
    }
}
