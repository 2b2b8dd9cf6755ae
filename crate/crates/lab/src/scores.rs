//! Tabular score files: raw detection scores and raw ASR/accuracy samples.
//!
//! Every CSV starts with a `# plan_hash=<hex>` comment tying the rows to the
//! run that produced them; aggregation re-reads these files, so result
//! tables stay reproducible from the raw artifacts alone.

use std::fs;
use std::path::Path;

use fewshot_core::detection::{Label, SplitMode, StatisticKind};
use fewshot_core::filters::FilterKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, LabError, Result};

/// One scored support set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub class: String,
    /// Attack that produced the support set; `"-"` for clean draws.
    pub attack: String,
    pub seed: u64,
    pub filter_kind: FilterKind,
    pub statistic_kind: StatisticKind,
    pub split_mode: SplitMode,
    pub value: f64,
    pub ground_truth: Label,
}

/// One attack-success measurement for a single perturbation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRow {
    pub attack: String,
    pub scenario: String,
    pub class: String,
    pub set_index: usize,
    pub n_episodes: usize,
    pub asr: f64,
    pub asr_std: f64,
}

/// One evaluation episode's accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub episode: usize,
    pub accuracy: f64,
}

pub(crate) fn write_rows<T: Serialize>(path: &Path, plan_hash: &str, rows: &[T]) -> Result<()> {
    let mut out = format!("# plan_hash={plan_hash}\n").into_bytes();
    let mut w = csv::Writer::from_writer(&mut out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| LabError::format(path, format!("row serialization failed: {e}")))?;
    }
    w.flush().at(path)?;
    drop(w);
    fs::write(path, out).at(path)
}

pub(crate) fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<(String, Vec<T>)> {
    let text = fs::read_to_string(path).at(path)?;
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| LabError::format(path, "empty score file"))?;
    let plan_hash = first
        .strip_prefix("# plan_hash=")
        .ok_or_else(|| LabError::format(path, "missing `# plan_hash=` header line"))?
        .to_string();
    let mut rows = Vec::new();
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    for row in reader.deserialize() {
        rows.push(row.map_err(|e| LabError::format(path, format!("malformed row: {e}")))?);
    }
    Ok((plan_hash, rows))
}

pub fn write_scores(path: &Path, plan_hash: &str, rows: &[ScoreRow]) -> Result<()> {
    write_rows(path, plan_hash, rows)
}

pub fn read_scores(path: &Path) -> Result<(String, Vec<ScoreRow>)> {
    read_rows(path)
}

pub fn write_asr_rows(path: &Path, plan_hash: &str, rows: &[AsrRow]) -> Result<()> {
    write_rows(path, plan_hash, rows)
}

pub fn read_asr_rows(path: &Path) -> Result<(String, Vec<AsrRow>)> {
    read_rows(path)
}

pub fn write_accuracy_rows(path: &Path, plan_hash: &str, rows: &[AccuracyRow]) -> Result<()> {
    write_rows(path, plan_hash, rows)
}

pub fn read_accuracy_rows(path: &Path) -> Result<(String, Vec<AccuracyRow>)> {
    read_rows(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<ScoreRow> {
        vec![
            ScoreRow {
                class: "class_00".into(),
                attack: "-".into(),
                seed: 41,
                filter_kind: FilterKind::Fpa,
                statistic_kind: StatisticKind::LogitsL1,
                split_mode: SplitMode::SingleRandom,
                value: 0.323_467_890_123_4,
                ground_truth: Label::Clean,
            },
            ScoreRow {
                class: "class_01".into(),
                attack: "pgd".into(),
                seed: 52,
                filter_kind: FilterKind::Median2x2,
                statistic_kind: StatisticKind::HardLabel,
                split_mode: SplitMode::AllSplitsMean,
                value: 0.8,
                ground_truth: Label::Adversarial,
            },
        ]
    }

    #[test]
    fn scores_roundtrip_with_plan_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let rows = sample_rows();
        write_scores(&path, "abc123", &rows).unwrap();

        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# plan_hash=abc123\n"), "{text}");
        assert!(text.contains("median_2x2"), "{text}");

        let (hash, back) = read_scores(&path).unwrap();
        assert_eq!(hash, "abc123");
        assert_eq!(back, rows);
        assert_eq!(back[0].value.to_bits(), rows[0].value.to_bits());
    }

    #[test]
    fn missing_plan_hash_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        fs::write(&path, "class,attack\n").unwrap();
        let err = read_scores(&path).unwrap_err();
        assert!(err.to_string().contains("plan_hash"), "{err}");
    }

    #[test]
    fn asr_and_accuracy_tables_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let asr = vec![AsrRow {
            attack: "pgd".into(),
            scenario: "fixed_supports".into(),
            class: "c".into(),
            set_index: 1,
            n_episodes: 10,
            asr: 0.9,
            asr_std: 0.05,
        }];
        let p = dir.path().join("asr.csv");
        write_asr_rows(&p, "h", &asr).unwrap();
        assert_eq!(read_asr_rows(&p).unwrap().1, asr);

        let acc = vec![AccuracyRow {
            model: "relation".into(),
            episode: 0,
            accuracy: 0.96,
        }];
        let p = dir.path().join("acc.csv");
        write_accuracy_rows(&p, "h", &acc).unwrap();
        assert_eq!(read_accuracy_rows(&p).unwrap().1, acc);
    }
}
