//! Loading and validation of experiment tables.
//!
//! Both CSV (`test_id,arm_id,text,impressions,clicks[,significant]`, header
//! required) and JSONL (one object per arm, same field names) are accepted.
//! Rows that share `(test_id, arm_id)` are merged by summing counts, and
//! experiments left with fewer than two arms are skipped and counted.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::ranking::{fractional_ranks, RankOrder};

/// One arm (treatment) of an A/B test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub arm_id: String,
    pub text: String,
    pub impressions: u64,
    pub clicks: u64,
}

impl ArmRecord {
    /// Observed CTR as a fraction, `None` when there are no impressions.
    pub fn observed_ctr(&self) -> Option<f64> {
        (self.impressions > 0).then(|| self.clicks as f64 / self.impressions as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment_id: String,
    pub arms: Vec<ArmRecord>,
}

impl ExperimentRecord {
    pub fn observed_ctr(&self) -> Result<Vec<f64>> {
        self.arms.iter().map(compute_ctr).collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.arms.iter().map(|a| a.text.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSet {
    pub experiments: Vec<ExperimentRecord>,
    pub source_tag: String,
}

impl ExperimentSet {
    pub fn new(experiments: Vec<ExperimentRecord>, source_tag: impl Into<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &experiments {
            if !seen.insert(e.experiment_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate experiment id `{}`",
                    e.experiment_id
                )));
            }
        }
        Ok(Self {
            experiments,
            source_tag: source_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.experiments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiments.is_empty()
    }

    pub fn all_texts(&self) -> Vec<String> {
        self.experiments.iter().flat_map(|e| e.texts()).collect()
    }

    /// Splits into (first `n`, rest), keeping order.
    pub fn split_at(&self, n: usize) -> (ExperimentSet, ExperimentSet) {
        let n = n.min(self.experiments.len());
        let (a, b) = self.experiments.split_at(n);
        (
            ExperimentSet {
                experiments: a.to_vec(),
                source_tag: self.source_tag.clone(),
            },
            ExperimentSet {
                experiments: b.to_vec(),
                source_tag: self.source_tag.clone(),
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl InputFormat {
    /// Guesses from the file extension; anything other than `.jsonl`/`.ndjson` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => InputFormat::Jsonl,
            _ => InputFormat::Csv,
        }
    }
}

/// Counts of what was dropped while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadSummary {
    pub rows_read: usize,
    pub rows_merged: usize,
    pub experiments_too_few_arms: usize,
    pub rows_in_skipped_experiments: usize,
    pub experiments_not_significant: usize,
}

impl LoadSummary {
    pub fn has_skips(&self) -> bool {
        self.experiments_too_few_arms > 0 || self.experiments_not_significant > 0
    }
}

impl std::fmt::Display for LoadSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "read {} rows ({} merged); skipped {} experiments with < 2 arms ({} rows), {} not significant",
            self.rows_read,
            self.rows_merged,
            self.experiments_too_few_arms,
            self.rows_in_skipped_experiments,
            self.experiments_not_significant
        )
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    test_id: String,
    arm_id: String,
    text: String,
    impressions: u64,
    clicks: u64,
    #[serde(default)]
    significant: Option<bool>,
}

/// NFC-normalizes and collapses runs of whitespace to single spaces.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn compute_ctr(arm: &ArmRecord) -> Result<f64> {
    arm.observed_ctr()
        .ok_or_else(|| Error::UndefinedCtr(arm.arm_id.clone()))
}

/// Fractional ranks of observed CTR, rank 1 = highest.
pub fn true_ranks(experiment: &ExperimentRecord) -> Result<Vec<f64>> {
    let ctr = experiment.observed_ctr()?;
    Ok(fractional_ranks(&ctr, RankOrder::Descending))
}

pub fn load_experiments(path: &Path, format: InputFormat) -> Result<(ExperimentSet, LoadSummary)> {
    let tag = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("experiments")
        .to_string();
    let file = File::open(path)?;
    let rows = match format {
        InputFormat::Csv => read_csv(file)?,
        InputFormat::Jsonl => read_jsonl(file)?,
    };
    assemble(rows, tag)
}

/// Writes `test_id,arm_id,text,impressions,clicks` with a header row.
pub fn write_csv(set: &ExperimentSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["test_id", "arm_id", "text", "impressions", "clicks"]).map_err(io)?;
    for exp in &set.experiments {
        for arm in &exp.arms {
            w.write_record([
                exp.experiment_id.as_str(),
                arm.arm_id.as_str(),
                arm.text.as_str(),
                &arm.impressions.to_string(),
                &arm.clicks.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_csv(file: File) -> Result<Vec<(usize, Row)>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    for required in ["test_id", "arm_id", "text", "impressions", "clicks"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing required column `{required}`"),
            });
        }
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| Error::Parse { line, message: e.to_string() })?;
        out.push((line, row));
    }
    Ok(out)
}

fn read_jsonl(file: File) -> Result<Vec<(usize, Row)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, row));
    }
    Ok(out)
}

fn assemble(rows: Vec<(usize, Row)>, tag: String) -> Result<(ExperimentSet, LoadSummary)> {
    let mut summary = LoadSummary {
        rows_read: rows.len(),
        ..Default::default()
    };
    // test_id -> (arm_id -> arm, rows seen, significant flag)
    let mut groups: IndexMap<String, (IndexMap<String, ArmRecord>, usize, bool)> = IndexMap::new();

    for (line, row) in rows {
        if row.clicks > row.impressions {
            return Err(Error::Parse {
                line,
                message: format!(
                    "clicks ({}) exceed impressions ({}) for test `{}` arm `{}`",
                    row.clicks, row.impressions, row.test_id, row.arm_id
                ),
            });
        }
        let text = normalize_text(&row.text);
        if text.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("empty text for test `{}` arm `{}`", row.test_id, row.arm_id),
            });
        }
        let group = groups
            .entry(row.test_id.clone())
            .or_insert_with(|| (IndexMap::new(), 0, true));
        group.1 += 1;
        if row.significant == Some(false) {
            group.2 = false;
        }
        match group.0.get_mut(&row.arm_id) {
            Some(arm) => {
                if arm.text != text {
                    log::warn!(
                        "line {line}: test `{}` arm `{}` repeats with different text; keeping the first",
                        row.test_id,
                        row.arm_id
                    );
                }
                arm.impressions += row.impressions;
                arm.clicks += row.clicks;
                summary.rows_merged += 1;
            }
            None => {
                group.0.insert(
                    row.arm_id.clone(),
                    ArmRecord {
                        arm_id: row.arm_id,
                        text,
                        impressions: row.impressions,
                        clicks: row.clicks,
                    },
                );
            }
        }
    }

    let mut experiments = Vec::new();
    for (id, (arms, n_rows, significant)) in groups {
        if !significant {
            summary.experiments_not_significant += 1;
            continue;
        }
        if arms.len() < 2 {
            log::warn!("skipping experiment `{id}`: {} arm(s)", arms.len());
            summary.experiments_too_few_arms += 1;
            summary.rows_in_skipped_experiments += n_rows;
            continue;
        }
        experiments.push(ExperimentRecord {
            experiment_id: id,
            arms: arms.into_values().collect(),
        });
    }
    Ok((ExperimentSet::new(experiments, tag)?, summary))
}
