//! Evaluation reports: versioned JSON plus CSV companions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{AttackRecord, CascadeReport, StageSummary};
use crate::error::{Error, Result};
use crate::retrieval::SweepSummary;

pub const SCHEMA_VERSION: u32 = 1;

/// One model evaluated under one attack set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalEntry {
    /// `base`, `ropust`, `defense-free`, `transfer` or `ablation:<flags>`.
    pub tag: String,
    /// Attack names joined by `+`.
    pub attacks: String,
    pub n_samples: usize,
    pub eps: f64,
    pub natural_accuracy: f64,
    pub robust_accuracy: f64,
    pub stages: Vec<StageSummary>,
    /// Accuracy of this model on inputs crafted against the base model.
    pub transfer_accuracy: Option<f64>,
}

impl EvalEntry {
    pub fn from_cascade(tag: &str, eps: f64, report: &CascadeReport) -> Self {
        let attacks = report
            .stages
            .iter()
            .skip(1)
            .map(|s| s.stage.as_str())
            .collect::<Vec<_>>()
            .join("+");
        Self {
            tag: tag.to_string(),
            attacks,
            n_samples: report.n_samples,
            eps,
            natural_accuracy: report.clean_accuracy(),
            robust_accuracy: report.robust_accuracy(),
            stages: report.stages.clone(),
            transfer_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("natural_accuracy", Some(self.natural_accuracy)),
            ("robust_accuracy", Some(self.robust_accuracy)),
            ("transfer_accuracy", self.transfer_accuracy),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!("{} {name} = {v}", self.tag)));
                }
            }
        }
        if !self.stages.is_empty() {
            let successes: usize = self.stages.iter().map(|s| s.successes).sum();
            let robust = (self.robust_accuracy * self.n_samples as f64).round() as usize;
            if successes + robust != self.n_samples {
                return Err(Error::Validation(format!(
                    "{}: {successes} stage successes and {robust} survivors for {} samples",
                    self.tag, self.n_samples
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub command: String,
    pub entries: Vec<EvalEntry>,
    pub sweep: Option<SweepSummary>,
    /// The resolved configuration of the run.
    pub config: Value,
}

impl EvalReport {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            entries: Vec::new(),
            sweep: None,
            config,
        }
    }

    pub fn entry(&self, tag: &str, attacks: &str) -> Option<&EvalEntry> {
        self.entries
            .iter()
            .find(|e| e.tag == tag && e.attacks == attacks)
    }

    pub fn validate(&self) -> Result<()> {
        self.entries.iter().try_for_each(EvalEntry::validate)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let found = v
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Validation("report has no schema_version".into()))?;
        if found != u64::from(SCHEMA_VERSION) {
            return Err(Error::SchemaVersion {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// One row per entry.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "tag",
            "attacks",
            "n_samples",
            "eps",
            "natural_accuracy",
            "robust_accuracy",
            "transfer_accuracy",
        ])?;
        for e in &self.entries {
            w.write_record([
                e.tag.clone(),
                e.attacks.clone(),
                e.n_samples.to_string(),
                e.eps.to_string(),
                e.natural_accuracy.to_string(),
                e.robust_accuracy.to_string(),
                e.transfer_accuracy
                    .map(|t| t.to_string())
                    .unwrap_or_default(),
            ])?;
        }
        finish_csv(w)
    }

    /// One row per (entry, stage).
    pub fn stages_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tag", "attacks", "stage", "attacked", "successes"])?;
        for e in &self.entries {
            for s in &e.stages {
                w.write_record([
                    e.tag.clone(),
                    e.attacks.clone(),
                    s.stage.clone(),
                    s.attacked.to_string(),
                    s.successes.to_string(),
                ])?;
            }
        }
        finish_csv(w)
    }
}

/// Per-sample stage records of one cascade.
pub fn records_csv_string(tag: &str, records: &[AttackRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "tag",
        "stage",
        "sample_id",
        "success",
        "iterations",
        "final_margin",
    ])?;
    for r in records {
        w.write_record([
            tag.to_string(),
            r.stage.clone(),
            r.sample_id.to_string(),
            r.success.to_string(),
            r.iterations.to_string(),
            r.final_margin.to_string(),
        ])?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Validation(e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EvalReport {
        let mut r = EvalReport::new("evaluate", serde_json::json!({"seed": 1}));
        r.entries.push(EvalEntry {
            tag: "base".into(),
            attacks: "apgd-ce".into(),
            n_samples: 4,
            eps: 0.1,
            natural_accuracy: 0.75,
            robust_accuracy: 0.25,
            stages: vec![
                StageSummary {
                    stage: "clean".into(),
                    attacked: 4,
                    successes: 1,
                },
                StageSummary {
                    stage: "apgd-ce".into(),
                    attacked: 3,
                    successes: 2,
                },
            ],
            transfer_accuracy: None,
        });
        r
    }

    #[test]
    fn json_round_trip() {
        let r = sample();
        let back = EvalReport::from_json_str(&r.to_json_string().unwrap()).unwrap();
        assert_eq!(r, back);
        r.validate().unwrap();
    }

    #[test]
    fn schema_mismatch_is_a_migration_error() {
        let text = sample()
            .to_json_string()
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 0");
        assert!(matches!(
            EvalReport::from_json_str(&text),
            Err(Error::SchemaVersion {
                found: 0,
                expected: 1
            })
        ));
    }

    #[test]
    fn csv_rows_match_entries() {
        let csv = sample().to_csv_string().unwrap();
        assert_eq!(csv.lines().count(), 1 + sample().entries.len());
    }

    #[test]
    fn inconsistent_bookkeeping_is_rejected() {
        let mut r = sample();
        r.entries[0].robust_accuracy = 0.5;
        assert!(r.validate().is_err());
    }
}
