//! Per-epoch training history and its serialized forms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;

pub const HISTORY_VERSION: u32 = 1;

/// Metric summary of one split at one epoch. Precision/recall/F1 are macro
/// averages; loss and KLD come from the same clamped probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss: f64,
    pub kld: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
}

/// Complete run log: self-describing configuration plus one record per
/// completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub version: u32,
    pub seed: u64,
    pub mode: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub learning_rate: f64,
    pub records: Vec<EpochRecord>,
    /// 1-based epoch with the highest test accuracy (earliest on ties).
    pub best_epoch: usize,
}

impl TrainingHistory {
    /// Recomputes the best epoch from the records: argmax of test accuracy
    /// with the lowest epoch winning ties.
    pub fn compute_best_epoch(records: &[EpochRecord]) -> usize {
        let mut best = 0usize;
        let mut best_acc = f64::NEG_INFINITY;
        for r in records {
            if r.test.accuracy > best_acc {
                best_acc = r.test.accuracy;
                best = r.epoch;
            }
        }
        best
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(self).expect("history serializes");
        fs::write(path, json).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        let history: TrainingHistory =
            serde_json::from_str(&text).map_err(|e| TrainError::BadHistory(e.to_string()))?;
        if history.version != HISTORY_VERSION {
            return Err(TrainError::BadHistory(format!(
                "history version {} unsupported (expected {HISTORY_VERSION})",
                history.version
            )));
        }
        Ok(history)
    }
}

/// Metric families exported as `epoch,train,test` CSV curves.
pub const CURVE_FAMILIES: [&str; 6] = ["accuracy", "precision", "recall", "f1", "loss", "kld"];

/// Writes one CSV per metric family into `out_dir`.
pub fn export_curves(history: &TrainingHistory, out_dir: &Path) -> Result<(), TrainError> {
    if history.records.is_empty() {
        return Err(TrainError::BadHistory("history holds no epochs".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    for family in CURVE_FAMILIES {
        let pick = |m: &SplitMetrics| -> f64 {
            match family {
                "accuracy" => m.accuracy,
                "precision" => m.precision,
                "recall" => m.recall,
                "f1" => m.f1,
                "loss" => m.loss,
                _ => m.kld,
            }
        };
        let mut csv = String::from("epoch,train,test\n");
        for r in &history.records {
            let _ = writeln!(csv, "{},{},{}", r.epoch, pick(&r.train), pick(&r.test));
        }
        let path = out_dir.join(format!("{family}.csv"));
        fs::write(&path, csv).map_err(|e| TrainError::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(acc: f64) -> SplitMetrics {
        SplitMetrics {
            accuracy: acc,
            precision: acc,
            recall: acc,
            f1: acc,
            loss: 1.0 - acc,
            kld: 1.0 - acc,
        }
    }

    fn history() -> TrainingHistory {
        let records = vec![
            EpochRecord {
                epoch: 1,
                train: metrics(0.5),
                test: metrics(0.6),
            },
            EpochRecord {
                epoch: 2,
                train: metrics(0.7),
                test: metrics(0.9),
            },
            EpochRecord {
                epoch: 3,
                train: metrics(0.8),
                test: metrics(0.9),
            },
        ];
        TrainingHistory {
            version: HISTORY_VERSION,
            seed: 5,
            mode: "fused".into(),
            epochs: 3,
            batch_size: 8,
            optimizer: "adam".into(),
            learning_rate: 1e-3,
            best_epoch: TrainingHistory::compute_best_epoch(&records),
            records,
        }
    }

    #[test]
    fn best_epoch_breaks_ties_toward_the_earliest() {
        let h = history();
        assert_eq!(h.best_epoch, 2);
        assert!(h
            .records
            .iter()
            .all(|r| r.test.accuracy <= h.best_record().unwrap().test.accuracy));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.json");
        let h = history();
        h.save(&path).unwrap();
        assert_eq!(TrainingHistory::load(&path).unwrap(), h);
    }

    #[test]
    fn curves_have_one_row_per_epoch_and_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let h = history();
        export_curves(&h, dir.path()).unwrap();
        for family in CURVE_FAMILIES {
            let text = fs::read_to_string(dir.path().join(format!("{family}.csv"))).unwrap();
            assert_eq!(text.lines().count(), 1 + h.records.len());
            assert!(text.starts_with("epoch,train,test\n"));
        }
        // Test-accuracy column peaks at the best epoch.
        let acc = fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
        let best_row: Vec<&str> = acc.lines().nth(h.best_epoch).unwrap().split(',').collect();
        assert_eq!(best_row[0], h.best_epoch.to_string());

        // Re-export is byte identical.
        let before = fs::read(dir.path().join("loss.csv")).unwrap();
        export_curves(&h, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("loss.csv")).unwrap(), before);
    }
}
