//! Classification metrics and their on-disk forms.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EpochRecord;
use crate::error::{Error, Result};

/// Scores of one labelled evaluation. `confusion[gold][predicted]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Class names in index order.
    pub classes: Vec<String>,
    pub overall_accuracy: f64,
    pub macro_f1: f64,
    pub per_class_recall: BTreeMap<String, f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// Derives every score from a square confusion matrix. A class with no
    /// gold examples has recall 0; F1 is 0 when precision + recall is 0.
    pub fn from_confusion(classes: Vec<String>, confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = classes.len();
        if k == 0 || confusion.len() != k || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("confusion matrix must be {k}x{k}")));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::InvalidInput("no evaluated examples".into()));
        }
        let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
        let mut per_class_recall = BTreeMap::new();
        let mut f1_sum = 0.0;
        for c in 0..k {
            let tp = confusion[c][c] as f64;
            let gold: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            let recall = if gold == 0 { 0.0 } else { tp / gold as f64 };
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            if precision + recall > 0.0 {
                f1_sum += 2.0 * precision * recall / (precision + recall);
            }
            per_class_recall.insert(classes[c].clone(), recall);
        }
        Ok(Self { overall_accuracy: correct as f64 / total as f64, macro_f1: f1_sum / k as f64, per_class_recall, confusion, classes })
    }

    pub fn from_predictions(classes: Vec<String>, gold: &[usize], predicted: &[usize]) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::Shape(format!("{} gold labels for {} predictions", gold.len(), predicted.len())));
        }
        let k = classes.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for (&g, &p) in gold.iter().zip(predicted) {
            if g >= k || p >= k {
                return Err(Error::InvalidInput(format!("class index outside 0..{k}")));
            }
            confusion[g][p] += 1;
        }
        Self::from_confusion(classes, confusion)
    }

    /// Recall values in class order.
    pub fn recalls(&self) -> Vec<f64> {
        self.classes.iter().map(|c| self.per_class_recall.get(c).copied().unwrap_or(0.0)).collect()
    }
}

/// Report plus the metadata identifying the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_seconds: f64,
}

impl RunMetrics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Accepts both a bare report and one with run metadata.
    pub fn read_report(path: &Path) -> Result<MetricsReport> {
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut obj = value.as_object().cloned().ok_or_else(|| Error::InvalidInput("metrics file is not a JSON object".into()))?;
        for key in ["config_hash", "seed", "wall_time_seconds"] {
            obj.remove(key);
        }
        Ok(serde_json::from_value(serde_json::Value::Object(obj))?)
    }
}

/// Header `epoch,train_loss,val_accuracy`, one row per completed epoch.
pub fn write_history_csv<W: Write>(out: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rec in history {
        w.serialize(rec).map_err(csv_error)?;
    }
    if history.is_empty() {
        w.write_record(["epoch", "train_loss", "val_accuracy"]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|c| format!("c{c}")).collect()
    }

    #[test]
    fn perfect_predictions() {
        let m = MetricsReport::from_predictions(names(3), &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(m.overall_accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn all_one_class() {
        let m = MetricsReport::from_predictions(names(2), &[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!(m.overall_accuracy, 0.5);
        // F1(A) = 2·(1/2)·1 / (3/2) = 2/3, F1(B) = 0
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recalls(), vec![1.0, 0.0]);
    }

    #[test]
    fn history_csv_round_trip() {
        let h = vec![
            EpochRecord { epoch: 1, train_loss: 1.25, val_accuracy: 0.5 },
            EpochRecord { epoch: 2, train_loss: 0.75, val_accuracy: 0.625 },
        ];
        let mut buf = Vec::new();
        write_history_csv(&mut buf, &h).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,train_loss,val_accuracy\n1,1.25,0.5\n2,0.75,0.625\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(&p, text).unwrap();
        assert_eq!(read_history_csv(&p).unwrap(), h);
    }

    #[test]
    fn metrics_json_carries_metadata_and_reads_back() {
        let report = MetricsReport::from_predictions(names(2), &[0, 1, 1], &[0, 1, 0]).unwrap();
        let run = RunMetrics { report: report.clone(), config_hash: "abc".into(), seed: 7, wall_time_seconds: 1.5 };
        let v: serde_json::Value = serde_json::from_str(&run.to_json().unwrap()).unwrap();
        for key in ["overall_accuracy", "macro_f1", "per_class_recall", "confusion", "config_hash", "seed", "wall_time_seconds"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        run.write(&p).unwrap();
        assert_eq!(RunMetrics::read_report(&p).unwrap(), report);
    }

    fn confusion_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..6)
            .prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0u64..20, k), k))
            .prop_filter("non-empty", |m| m.iter().flatten().sum::<u64>() > 0)
    }

    proptest! {
        #[test]
        fn invariants_hold(conf in confusion_strategy()) {
            let k = conf.len();
            let m = MetricsReport::from_confusion(names(k), conf.clone()).unwrap();
            let total: u64 = conf.iter().flatten().sum();
            let trace: u64 = (0..k).map(|c| conf[c][c]).sum();
            prop_assert_eq!(m.overall_accuracy, trace as f64 / total as f64);
            prop_assert!((0.0..=1.0).contains(&m.macro_f1));
            prop_assert!(m.recalls().iter().all(|r| (0.0..=1.0).contains(r)));
        }
    }
}
