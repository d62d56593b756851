use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{metrics_report, MetricsReport, Outcome, Variant};
use super::{
    DenominatorPolicy, FailureTurns, HarnessError, Mode, ScenarioConfig, SessionRecord,
    SimulatorKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnCount {
    pub turn: u32,
    pub successes: usize,
    /// Successes left after dropping any leaked session.
    pub successes_minus_leakage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: Mode,
    pub simulator: SimulatorKind,
    pub max_turns: u32,
    pub denominator: DenominatorPolicy,
    pub failure_turns: FailureTurns,
    pub n_sessions: usize,
    pub successes: usize,
    pub failures: usize,
    pub errored: usize,
    pub variants: Vec<MetricsReport>,
    pub per_turn: Vec<TurnCount>,
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.n_sessions == 0
    }

    pub fn variant(&self, v: Variant) -> Option<&MetricsReport> {
        self.variants.iter().find(|m| m.variant == v)
    }
}

pub fn build_report(records: &[SessionRecord], cfg: &ScenarioConfig) -> Report {
    let outcomes: Vec<Outcome> = records.iter().map(Outcome::from_record).collect();
    let errored = outcomes.iter().filter(|o| o.errored).count();
    let successes = outcomes
        .iter()
        .filter(|o| !o.errored && o.success_turn.is_some())
        .count();
    let per_turn = (1..=cfg.max_turns)
        .map(|turn| {
            let at_turn = outcomes
                .iter()
                .filter(|o| !o.errored && o.success_turn == Some(turn));
            TurnCount {
                turn,
                successes: at_turn.clone().count(),
                successes_minus_leakage: at_turn
                    .filter(|o| !o.history_leak && !o.response_leak)
                    .count(),
            }
        })
        .collect();
    Report {
        mode: cfg.mode,
        simulator: cfg.simulator,
        max_turns: cfg.max_turns,
        denominator: cfg.denominator,
        failure_turns: cfg.failure_turns,
        n_sessions: records.len(),
        successes,
        failures: records.len() - successes - errored,
        errored,
        variants: Variant::ALL
            .iter()
            .map(|&v| {
                metrics_report(
                    &outcomes,
                    v,
                    &cfg.k_values,
                    cfg.max_turns,
                    cfg.denominator,
                    cfg.failure_turns,
                )
            })
            .collect(),
        per_turn,
    }
}

fn fmt_rate(count: usize, total: usize) -> String {
    if total == 0 {
        String::new()
    } else {
        format!("{:.6}", count as f64 / total as f64)
    }
}

/// Writes `report.json`, `sessions.jsonl` and `per_turn.csv` into `dir`.
pub fn write_outputs(dir: &Path, report: &Report, records: &[SessionRecord]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    fs::write(dir.join("report.json"), json)?;

    let mut sessions = fs::File::create(dir.join("sessions.jsonl"))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(sessions, "{line}")?;
    }

    let evaluated = report.n_sessions - report.errored;
    let mut csv = String::from("turn,successes,cumulative,sr,successes_minus_leakage,cumulative_minus_leakage,sr_minus_leakage\n");
    let (mut cum, mut cum_clean) = (0, 0);
    for t in &report.per_turn {
        cum += t.successes;
        cum_clean += t.successes_minus_leakage;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            t.turn,
            t.successes,
            cum,
            fmt_rate(cum, evaluated),
            t.successes_minus_leakage,
            cum_clean,
            fmt_rate(cum_clean, evaluated)
        ));
    }
    fs::write(dir.join("per_turn.csv"), csv)?;
    Ok(())
}

pub fn read_sessions(path: &Path) -> Result<Vec<SessionRecord>, HarnessError> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| HarnessError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
