//! User-profile plugins: basic-info configuration and preference summary.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::guard::TargetOracle;
use super::{generate, MemoryEvent, PluginError, SessionEnv};
use crate::domain::{Catalog, ItemId, RatingRecord, RatingScale, UserId};
use crate::pipeline::{Plugin, PluginContext, PluginFlow};

/// Ratings at or above this value count as liked.
pub const LIKE_THRESHOLD: f64 = 3.0;

/// Splits ratings into (liked, disliked) by [`LIKE_THRESHOLD`].
pub fn partition_ratings(ratings: &[RatingRecord]) -> (Vec<&RatingRecord>, Vec<&RatingRecord>) {
    ratings.iter().partition(|r| r.rating >= LIKE_THRESHOLD)
}

/// Titles fed to the summary prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryInput {
    pub liked: Vec<String>,
    pub disliked: Vec<String>,
}

impl SummaryInput {
    fn render_list(titles: &[String]) -> String {
        if titles.is_empty() {
            "none".to_string()
        } else {
            titles.join("; ")
        }
    }
}

/// Builds the liked/disliked lists, leaving out items the oracle marks as
/// session targets.
pub fn summary_input(
    ratings: &[RatingRecord],
    catalog: &Catalog,
    oracle: &dyn TargetOracle,
) -> Result<SummaryInput, PluginError> {
    if ratings.is_empty() {
        return Err(PluginError::EmptyHistory);
    }
    let kept: Vec<RatingRecord> = ratings
        .iter()
        .filter(|r| !oracle.is_target_id(&r.item_id))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(PluginError::EmptyHistory);
    }
    let (liked, disliked) = partition_ratings(&kept);
    let label = |r: &RatingRecord| -> Result<String, PluginError> {
        let item = catalog
            .get(&r.item_id)
            .ok_or_else(|| PluginError::UnknownItem(r.item_id.to_string()))?;
        Ok(format!("{} (rated {})", item.display_title(), r.rating))
    };
    Ok(SummaryInput {
        liked: liked.into_iter().map(label).collect::<Result<_, _>>()?,
        disliked: disliked.into_iter().map(label).collect::<Result<_, _>>()?,
    })
}

/// Summarizes long-term taste from a rating history.
pub fn summarize_preferences(
    env: &SessionEnv,
    ratings: &[RatingRecord],
    temperature: f64,
) -> Result<String, PluginError> {
    let input = summary_input(ratings, &env.catalog, env.oracle.as_ref())?;
    let prompt = env.templates.render(
        "preference_summary",
        &[
            ("liked", &SummaryInput::render_list(&input.liked)),
            ("disliked", &SummaryInput::render_list(&input.disliked)),
        ],
    )?;
    generate(env, &[], "preference_summary", prompt, temperature)
}

pub struct PreferenceSummaryPlugin {
    pub temperature: f64,
}

impl Plugin for PreferenceSummaryPlugin {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        let history = ctx.memory.long_term.interaction_history.clone();
        let summary = summarize_preferences(ctx.env, &history, self.temperature)?;
        ctx.memory.long_term.taste_summary = summary;
        ctx.events.push(MemoryEvent::ProfileUpdated);
        Ok(PluginFlow::Continue)
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum StringOrNumber {
    Str(String),
    Num(serde_json::Number),
}

impl StringOrNumber {
    fn into_string(self) -> String {
        match self {
            StringOrNumber::Str(s) => s,
            StringOrNumber::Num(n) => n.to_string(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRating {
    item_id: StringOrNumber,
    rating: f64,
    #[serde(default)]
    timestamp: Option<i64>,
}

#[derive(Debug, Deserialize)]
struct RawUserRecord {
    user_id: StringOrNumber,
    #[serde(default)]
    age: Option<StringOrNumber>,
    #[serde(default)]
    gender: Option<String>,
    #[serde(default)]
    occupation: Option<StringOrNumber>,
    #[serde(default)]
    ratings: Vec<RawRating>,
    #[serde(default)]
    rating_scale: Option<RatingScale>,
}

/// Basic information extracted from a source-dataset user record.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicInfo {
    pub user_id: UserId,
    pub basic_info: BTreeMap<String, String>,
    pub interaction_history: Vec<RatingRecord>,
}

/// Parses a raw user record. Fields absent from the record stay absent.
pub fn basic_info(raw: &serde_json::Value) -> Result<BasicInfo, PluginError> {
    let record: RawUserRecord = serde_json::from_value(raw.clone())
        .map_err(|e| PluginError::SchemaMismatch(e.to_string()))?;
    let scale = record.rating_scale.unwrap_or_default();
    let user_id = UserId(record.user_id.into_string());
    let mut info = BTreeMap::new();
    if let Some(age) = record.age {
        info.insert("age".to_string(), age.into_string());
    }
    if let Some(gender) = record.gender.filter(|g| !g.trim().is_empty()) {
        info.insert("gender".to_string(), gender);
    }
    if let Some(occupation) = record.occupation {
        info.insert("occupation".to_string(), occupation.into_string());
    }
    let mut history = Vec::with_capacity(record.ratings.len());
    for r in record.ratings {
        if !scale.contains(r.rating) {
            return Err(PluginError::SchemaMismatch(format!(
                "rating {} outside [{}, {}]",
                r.rating, scale.min, scale.max
            )));
        }
        history.push(RatingRecord {
            user_id: user_id.clone(),
            item_id: ItemId(r.item_id.into_string()),
            rating: r.rating,
            timestamp: r.timestamp,
        });
    }
    Ok(BasicInfo {
        user_id,
        basic_info: info,
        interaction_history: history,
    })
}

pub struct BasicInfoPlugin;

impl Plugin for BasicInfoPlugin {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        let Some(raw) = ctx.env.raw_user.as_ref() else {
            return Ok(PluginFlow::Continue);
        };
        let parsed = basic_info(raw)?;
        let profile = &mut ctx.memory.long_term;
        profile.user_id = parsed.user_id;
        profile.basic_info = parsed.basic_info;
        profile.interaction_history = parsed
            .interaction_history
            .into_iter()
            .filter(|r| !ctx.env.oracle.is_target_id(&r.item_id))
            .collect();
        ctx.events.push(MemoryEvent::ProfileUpdated);
        Ok(PluginFlow::Continue)
    }
}
