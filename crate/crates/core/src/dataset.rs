//! Dataset loaders.
//!
//! Canonical format, one JSON object per line:
//!
//! * items: `{"item_id", "title", "year", "attributes": {"genre": [...], ...}}`
//! * ratings: `{"user_id", "item_id", "rating", "timestamp"}`
//! * conversations: `{"conversation_id", "turns": [{"role", "text"}], "target_item_ids": [...]}`
//!
//! MovieLens `movies.csv`/`ratings.csv` and ReDial JSONL are read directly.
//! OpenDialKG dialogues are expected in the canonical conversation format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{attr, CatalogItem, ItemId, RatingRecord, UserId};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedTurn {
    /// `seeker`/`user` for the user side, `recommender`/`assistant` for the CRS.
    pub role: String,
    pub text: String,
}

impl AnnotatedTurn {
    pub fn is_user_side(&self) -> bool {
        matches!(
            self.role.to_ascii_lowercase().as_str(),
            "seeker" | "user" | "human" | "simulator"
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedConversation {
    pub conversation_id: String,
    pub turns: Vec<AnnotatedTurn>,
    pub target_item_ids: Vec<ItemId>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<CatalogItem>,
    pub ratings: Vec<RatingRecord>,
    pub conversations: Vec<AnnotatedConversation>,
}

fn open(path: &Path) -> Result<BufReader<File>, DatasetError> {
    File::open(path).map(BufReader::new).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> DatasetError {
    DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Numeric ids are accepted and read as strings.
fn stringify_ids(value: &mut Value) {
    if let Some(obj) = value.as_object_mut() {
        for key in ["item_id", "user_id", "conversation_id"] {
            if let Some(Value::Number(n)) = obj.get(key) {
                let s = n.to_string();
                obj.insert(key.into(), Value::String(s));
            }
        }
        if let Some(Value::Array(ids)) = obj.get_mut("target_item_ids") {
            for id in ids.iter_mut() {
                if let Value::Number(n) = id {
                    *id = Value::String(n.to_string());
                }
            }
        }
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut value: Value = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e))?;
        stringify_ids(&mut value);
        out.push(serde_json::from_value(value).map_err(|e| parse_err(path, i + 1, e))?);
    }
    Ok(out)
}

pub fn load_items_jsonl(path: &Path) -> Result<Vec<CatalogItem>, DatasetError> {
    read_jsonl(path)
}

pub fn load_ratings_jsonl(path: &Path) -> Result<Vec<RatingRecord>, DatasetError> {
    read_jsonl(path)
}

pub fn load_conversations_jsonl(path: &Path) -> Result<Vec<AnnotatedConversation>, DatasetError> {
    read_jsonl(path)
}

/// Splits `Title (1999)` into title and year.
pub fn split_title_year(raw: &str) -> (String, Option<i32>) {
    static YEAR: OnceLock<Regex> = OnceLock::new();
    let re = YEAR.get_or_init(|| Regex::new(r"^(.*\S)\s*\((\d{4})\)\s*$").unwrap());
    match re.captures(raw.trim()) {
        Some(c) => (c[1].to_string(), c[2].parse().ok()),
        None => (raw.trim().to_string(), None),
    }
}

#[derive(Deserialize)]
struct MlMovie {
    #[serde(rename = "movieId")]
    movie_id: String,
    title: String,
    #[serde(default)]
    genres: String,
}

#[derive(Deserialize)]
struct MlRating {
    #[serde(rename = "userId")]
    user_id: String,
    #[serde(rename = "movieId")]
    movie_id: String,
    rating: f64,
    #[serde(default)]
    timestamp: Option<i64>,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>, DatasetError> {
    csv::Reader::from_path(path).map_err(|e| parse_err(path, 0, e))
}

/// MovieLens `movies.csv` (movieId,title,genres).
pub fn load_movielens_movies(path: &Path) -> Result<Vec<CatalogItem>, DatasetError> {
    let mut out = Vec::new();
    for (i, row) in csv_reader(path)?.deserialize::<MlMovie>().enumerate() {
        let row = row.map_err(|e| parse_err(path, i + 2, e))?;
        let (title, year) = split_title_year(&row.title);
        let genres: Vec<String> = row
            .genres
            .split('|')
            .map(str::trim)
            .filter(|g| !g.is_empty() && *g != "(no genres listed)")
            .map(str::to_lowercase)
            .collect();
        let mut attributes = BTreeMap::new();
        if !genres.is_empty() {
            attributes.insert(attr::GENRE.to_string(), genres);
        }
        out.push(CatalogItem {
            item_id: ItemId(row.movie_id),
            title,
            year,
            attributes,
        });
    }
    Ok(out)
}

/// MovieLens `ratings.csv` (userId,movieId,rating,timestamp).
pub fn load_movielens_ratings(path: &Path) -> Result<Vec<RatingRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, row) in csv_reader(path)?.deserialize::<MlRating>().enumerate() {
        let row = row.map_err(|e| parse_err(path, i + 2, e))?;
        out.push(RatingRecord {
            user_id: UserId(row.user_id),
            item_id: ItemId(row.movie_id),
            rating: row.rating,
            timestamp: row.timestamp,
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RedialMessage {
    text: String,
    sender_worker_id: i64,
}

#[derive(Deserialize, Default)]
struct RedialQuestion {
    #[serde(default)]
    suggested: Option<i64>,
    #[serde(default)]
    liked: Option<i64>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RedialConversation {
    conversation_id: Value,
    messages: Vec<RedialMessage>,
    initiator_worker_id: i64,
    #[serde(default)]
    movie_mentions: BTreeMap<String, Option<String>>,
    #[serde(default)]
    initiator_questions: Value,
}

/// ReDial JSONL. `@123` mentions are replaced by titles. Targets are the
/// movies the recommender suggested and the seeker liked, or every
/// suggested movie when none was marked liked.
pub fn load_redial(path: &Path) -> Result<(Vec<CatalogItem>, Vec<AnnotatedConversation>), DatasetError> {
    static MENTION: OnceLock<Regex> = OnceLock::new();
    let mention = MENTION.get_or_init(|| Regex::new(r"@(\d+)").unwrap());
    let mut items: BTreeMap<String, CatalogItem> = BTreeMap::new();
    let mut conversations = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: RedialConversation =
            serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e))?;
        for (id, title) in &conv.movie_mentions {
            let Some(title) = title else { continue };
            let (title, year) = split_title_year(title);
            items.entry(id.clone()).or_insert_with(|| CatalogItem {
                item_id: ItemId(id.clone()),
                title,
                year,
                attributes: BTreeMap::new(),
            });
        }
        let title_of = |id: &str| items.get(id).map(CatalogItem::display_title);
        let turns = conv
            .messages
            .iter()
            .map(|m| AnnotatedTurn {
                role: if m.sender_worker_id == conv.initiator_worker_id {
                    "seeker".into()
                } else {
                    "recommender".into()
                },
                text: mention
                    .replace_all(&m.text, |c: &regex::Captures| {
                        title_of(&c[1]).unwrap_or_else(|| c[0].to_string())
                    })
                    .into_owned(),
            })
            .collect();
        let questions: BTreeMap<String, RedialQuestion> =
            serde_json::from_value(conv.initiator_questions.clone()).unwrap_or_default();
        let suggested: Vec<&String> = questions
            .iter()
            .filter(|(_, q)| q.suggested == Some(1))
            .map(|(id, _)| id)
            .collect();
        let liked: Vec<&String> = suggested
            .iter()
            .copied()
            .filter(|id| questions[*id].liked == Some(1))
            .collect();
        let targets = if liked.is_empty() { suggested } else { liked };
        let conversation_id = match &conv.conversation_id {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        conversations.push(AnnotatedConversation {
            conversation_id,
            turns,
            target_item_ids: targets
                .into_iter()
                .filter(|id| items.contains_key(*id))
                .map(|id| ItemId(id.clone()))
                .collect(),
        });
    }
    Ok((items.into_values().collect(), conversations))
}

fn first_line_has(path: &Path, needle: &str) -> Result<bool, DatasetError> {
    let mut line = String::new();
    open(path)?
        .read_line(&mut line)
        .map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(line.contains(needle))
}

fn is_csv(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) == Some("csv")
}

impl Dataset {
    /// Loads whichever files are given, picking the reader from the file
    /// extension (`.csv` is MovieLens) or content (ReDial conversations).
    pub fn load(
        items: Option<&Path>,
        ratings: Option<&Path>,
        conversations: Option<&Path>,
    ) -> Result<Dataset, DatasetError> {
        let mut data = Dataset::default();
        if let Some(p) = items {
            data.items = if is_csv(p) { load_movielens_movies(p)? } else { load_items_jsonl(p)? };
        }
        if let Some(p) = ratings {
            data.ratings = if is_csv(p) { load_movielens_ratings(p)? } else { load_ratings_jsonl(p)? };
        }
        if let Some(p) = conversations {
            if first_line_has(p, "movieMentions")? {
                let (extra, convs) = load_redial(p)?;
                for item in extra {
                    if !data.items.iter().any(|i| i.item_id == item.item_id) {
                        data.items.push(item);
                    }
                }
                data.conversations = convs;
            } else {
                data.conversations = load_conversations_jsonl(p)?;
            }
        }
        Ok(data)
    }
}
