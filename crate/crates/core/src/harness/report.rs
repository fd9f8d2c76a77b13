use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{extract_code, HarnessError, Result, Transcript};
use crate::rtllint::{count_by_rule, lint_sources, thresholds, Rule};
use crate::score::{score_design, ScoreReport};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Fixed CSV columns; one `lint_<rule>` column per rule follows.
pub const CSV_COLUMNS: [&str; 9] = [
    "label",
    "policy",
    "source",
    "ref_tokens",
    "gen_tokens",
    "matched",
    "fix_cost",
    "success_pct",
    "correct_pct",
];

/// One scored generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInput {
    pub label: String,
    pub policy: String,
    /// Transcript path, or `local`.
    pub source: String,
    pub score: ScoreReport,
    pub lint: BTreeMap<Rule, usize>,
}

/// Extracts code from a transcript, scores it against the reference design
/// and lints both the code and any prose around it.
pub fn evaluate(
    label: &str,
    source: &str,
    transcript: &Transcript,
    reference: &[(String, String)],
) -> Result<EvalInput> {
    let ex = extract_code(&transcript.completion);
    let generated = vec![(format!("{label}.sv"), ex.code.clone())];
    let score = score_design(reference, &generated)?.total;
    let mut files = generated;
    if !ex.prose.trim().is_empty() {
        files.push((format!("{label}.txt"), ex.prose));
    }
    Ok(EvalInput {
        label: label.to_string(),
        policy: transcript.policy.clone(),
        source: source.to_string(),
        score,
        lint: count_by_rule(&lint_sources(&files)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub policy: String,
    pub source: String,
    pub ref_tokens: usize,
    pub gen_tokens: usize,
    pub matched: usize,
    pub fix_cost: usize,
    pub success_pct: f64,
    pub correct_pct: f64,
    pub lint: BTreeMap<Rule, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    /// Thresholds and whatever the caller adds.
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
}

/// Rows keep input order. `config` is merged into the snapshot.
pub fn report_aggregate(inputs: &[EvalInput], config: serde_json::Value) -> Result<ExperimentReport> {
    if inputs.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let rows = inputs
        .iter()
        .map(|i| {
            let mut lint: BTreeMap<Rule, usize> = Rule::ALL.into_iter().map(|r| (r, 0)).collect();
            lint.extend(i.lint.iter().map(|(r, n)| (*r, *n)));
            ReportRow {
                label: i.label.clone(),
                policy: i.policy.clone(),
                source: i.source.clone(),
                ref_tokens: i.score.ref_tokens,
                gen_tokens: i.score.gen_tokens,
                matched: i.score.matched,
                fix_cost: i.score.fix_cost,
                success_pct: i.score.success_pct,
                correct_pct: i.score.correct_pct,
                lint,
            }
        })
        .collect();
    let mut snapshot = serde_json::json!({ "lint_thresholds": thresholds() });
    if let (Some(dst), serde_json::Value::Object(src)) = (snapshot.as_object_mut(), config) {
        dst.extend(src);
    }
    Ok(ExperimentReport {
        format_version: REPORT_FORMAT_VERSION,
        config: snapshot,
        rows,
    })
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn csv_header() -> Vec<String> {
        CSV_COLUMNS
            .iter()
            .map(|c| c.to_string())
            .chain(Rule::ALL.iter().map(|r| format!("lint_{}", r.id().replace('-', "_"))))
            .collect()
    }

    /// Percentages carry four decimals.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::csv_header()).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.label.clone(),
                r.policy.clone(),
                r.source.clone(),
                r.ref_tokens.to_string(),
                r.gen_tokens.to_string(),
                r.matched.to_string(),
                r.fix_cost.to_string(),
                format!("{:.4}", r.success_pct),
                format!("{:.4}", r.correct_pct),
            ];
            rec.extend(Rule::ALL.iter().map(|k| r.lint.get(k).copied().unwrap_or(0).to_string()));
            w.write_record(rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let lint: usize = r.lint.values().sum();
            s.push_str(&format!(
                "{:<12} {:<12} ref={:<6} fix={:<6} success={:>8.4}% correct={:>8.4}% lint={}\n",
                r.label, r.policy, r.ref_tokens, r.fix_cost, r.success_pct, r.correct_pct, lint
            ));
        }
        s
    }
}
