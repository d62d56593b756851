//! Real-time preference generation: known/unknown split and anonymization
//! of sensitive attributes.

use std::sync::OnceLock;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::guard::TargetOracle;
use super::{MemoryEvent, PluginError, TargetInfo};
use crate::domain::{attr, PreferenceFacet, Visibility};
use crate::pipeline::{Plugin, PluginContext, PluginFlow};
use crate::text::normalize_text;

pub fn default_sensitive() -> Vec<String> {
    vec![attr::RELEASE_DATE.to_string(), attr::RUNTIME.to_string()]
}

/// Shares of candidate facets that become Known (`k1`) and Unknown (`k2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub k1: f64,
    pub k2: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            k1: 0.5,
            k2: 0.5,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), PluginError> {
        let in_unit = |k: f64| (0.0..=1.0).contains(&k);
        if !in_unit(self.k1) || !in_unit(self.k2) || self.k1 + self.k2 > 1.0 + 1e-9 {
            return Err(PluginError::InvalidSplit(self.k1 + self.k2));
        }
        Ok(())
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// (known, unknown) facet counts for `n` candidates. When both shares round
/// up past `n` (e.g. k1 = k2 = 0.5 with n odd) the Unknown count gives way.
pub fn split_counts(n: usize, k1: f64, k2: f64) -> (usize, usize) {
    let known = round_half_up(k1 * n as f64).min(n);
    let unknown = round_half_up(k2 * n as f64).min(n - known);
    (known, unknown)
}

/// Fisher-Yates permutation of `0..n` driven by ChaCha8 seeded with `seed`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn month_formats() -> &'static [&'static str] {
    &[
        "%B %d, %Y",
        "%b %d, %Y",
        "%d %B %Y",
        "%d %b %Y",
        "%Y-%m-%d",
        "%m/%d/%Y",
        "%B %d %Y",
    ]
}

pub fn parse_calendar_date(value: &str) -> Option<NaiveDate> {
    let v = value.trim().trim_end_matches('.');
    month_formats()
        .iter()
        .find_map(|f| NaiveDate::parse_from_str(v, f).ok())
}

fn year_of(value: &str) -> Option<i32> {
    if let Some(d) = parse_calendar_date(value) {
        return Some(d.year());
    }
    let v = value.trim();
    if v.len() == 4 && v.chars().all(|c| c.is_ascii_digit()) {
        return v.parse().ok();
    }
    None
}

/// Minutes from forms like `144 minutes`, `144 min`, `144`, `2h 24m`.
pub fn parse_minutes(value: &str) -> Option<u32> {
    static PLAIN: OnceLock<Regex> = OnceLock::new();
    static HOURS: OnceLock<Regex> = OnceLock::new();
    let plain = PLAIN.get_or_init(|| {
        Regex::new(r"(?i)^\s*(\d{1,4})\s*(m|min|mins|minute|minutes)?\.?\s*$").unwrap()
    });
    let hours = HOURS.get_or_init(|| {
        Regex::new(r"(?i)^\s*(\d{1,2})\s*(?:h|hr|hrs|hour|hours)\s*(?:(\d{1,2})\s*(?:m|min|mins|minutes)?)?\s*$")
            .unwrap()
    });
    if let Some(c) = plain.captures(value) {
        return c[1].parse().ok();
    }
    if let Some(c) = hours.captures(value) {
        let h: u32 = c[1].parse().ok()?;
        let m: u32 = c.get(2).map_or(Some(0), |m| m.as_str().parse().ok())?;
        return Some(h * 60 + m);
    }
    None
}

/// Decade phrase for a year: 2012 -> "the 2010s".
pub fn decade_phrase(year: i32) -> String {
    format!("the {}s", year.div_euclid(10) * 10)
}

/// Approximate-duration phrase. Minutes are floored to the half hour
/// (144 -> "about 2 hours", 150 -> "about 2.5 hours"), with half an hour as
/// the floor.
pub fn duration_phrase(minutes: u32) -> String {
    let half_hours = (minutes / 30).max(1);
    match half_hours {
        1 => "about half an hour".to_string(),
        2 => "about 1 hour".to_string(),
        h if h % 2 == 0 => format!("about {} hours", h / 2),
        h => format!("about {}.5 hours", h / 2),
    }
}

/// Coarsens a sensitive facet. Facets outside `sensitive` are returned as-is.
pub fn anonymize_facet(
    facet: &PreferenceFacet,
    sensitive: &[String],
) -> Result<PreferenceFacet, PluginError> {
    if !sensitive.iter().any(|s| s == &facet.attribute) || facet.anonymized {
        return Ok(facet.clone());
    }
    let unparseable = || PluginError::UnparseableValue {
        attribute: facet.attribute.clone(),
        value: facet.value.clone(),
    };
    let value = match facet.attribute.as_str() {
        attr::RELEASE_DATE => decade_phrase(year_of(&facet.value).ok_or_else(unparseable)?),
        attr::RUNTIME => duration_phrase(parse_minutes(&facet.value).ok_or_else(unparseable)?),
        // A sensitive attribute with no coarsening rule is withheld as a
        // generic phrase rather than passed through.
        _ => return Err(unparseable()),
    };
    Ok(PreferenceFacet {
        value,
        anonymized: true,
        ..facet.clone()
    })
}

/// Turns target attributes into real-time facets.
///
/// Candidates are every (attribute, value) pair of every target, in
/// attribute order, with title mentions removed, sensitive values anonymized
/// and duplicates merged. One seeded shuffle then picks `round(k1*n)` Known
/// and `round(k2*n)` Unknown facets; the rest are dropped. The result keeps
/// candidate order.
pub fn realtime_preferences(
    target_info: &[TargetInfo],
    cfg: &SplitConfig,
    sensitive: &[String],
    oracle: &dyn TargetOracle,
) -> Result<Vec<PreferenceFacet>, PluginError> {
    cfg.validate()?;
    let candidates = candidate_facets(target_info, sensitive, oracle)?;
    Ok(assign_visibility(candidates, cfg))
}

pub fn candidate_facets(
    target_info: &[TargetInfo],
    sensitive: &[String],
    oracle: &dyn TargetOracle,
) -> Result<Vec<PreferenceFacet>, PluginError> {
    let mut out: Vec<PreferenceFacet> = Vec::new();
    for info in target_info {
        for (attribute, values) in info {
            if attribute == "title" {
                continue;
            }
            for value in values {
                let value = value.trim();
                if value.is_empty() || oracle.leaks(value) {
                    continue;
                }
                let facet = anonymize_facet(&PreferenceFacet::new(attribute, value), sensitive)?;
                let key = normalize_text(&facet.value);
                if !out
                    .iter()
                    .any(|f| f.attribute == facet.attribute && normalize_text(&f.value) == key)
                {
                    out.push(facet);
                }
            }
        }
    }
    Ok(out)
}

fn assign_visibility(candidates: Vec<PreferenceFacet>, cfg: &SplitConfig) -> Vec<PreferenceFacet> {
    let n = candidates.len();
    let (known, unknown) = split_counts(n, cfg.k1, cfg.k2);
    let order = seeded_permutation(n, cfg.seed);
    let mut visibility: Vec<Option<Visibility>> = vec![None; n];
    for (rank, &idx) in order.iter().enumerate() {
        visibility[idx] = if rank < known {
            Some(Visibility::Known)
        } else if rank < known + unknown {
            Some(Visibility::Unknown)
        } else {
            None
        };
    }
    candidates
        .into_iter()
        .zip(visibility)
        .filter_map(|(facet, v)| v.map(|v| facet.with_visibility(v)))
        .collect()
}

pub struct RealtimePreferencePlugin;

impl Plugin for RealtimePreferencePlugin {
    fn run(&self, ctx: &mut PluginContext<'_>) -> Result<PluginFlow, PluginError> {
        let env = ctx.env;
        let facets =
            realtime_preferences(&env.target_info, &env.split, &env.sensitive, env.oracle.as_ref())?;
        ctx.events.push(MemoryEvent::FacetsInitialized {
            count: facets.len(),
        });
        ctx.memory.real_time = facets;
        Ok(PluginFlow::Continue)
    }
}
