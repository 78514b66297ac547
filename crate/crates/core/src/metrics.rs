//! Evaluation metrics: confusion matrix, accuracy, per-class and macro
//! precision/recall/F1, quadratic weighted kappa, KL divergence, and
//! one-vs-rest ROC AUC via the rank statistic.

use std::fmt::Write as _;

use thiserror::Error;

/// Probabilities are clamped to this floor before any logarithm, matching
/// the loss computation so loss and KLD coincide on one-hot targets.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix holds no samples")]
    EmptyMatrix,
    #[error("chance-agreement denominator is zero; marginals are degenerate")]
    DegenerateMarginals,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Rows are true classes, columns are predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_labels(
        true_labels: &[usize],
        predicted_labels: &[usize],
        class_names: &[String],
    ) -> Result<Self, MetricsError> {
        if true_labels.len() != predicted_labels.len() {
            return Err(MetricsError::ShapeMismatch(format!(
                "{} true labels vs {} predictions",
                true_labels.len(),
                predicted_labels.len()
            )));
        }
        let classes = class_names.len();
        let mut counts = vec![0u64; classes * classes];
        for (&t, &p) in true_labels.iter().zip(predicted_labels) {
            if t >= classes {
                return Err(MetricsError::LabelOutOfRange { label: t, classes });
            }
            if p >= classes {
                return Err(MetricsError::LabelOutOfRange { label: p, classes });
            }
            counts[t * classes + p] += 1;
        }
        Ok(Self {
            classes,
            counts,
            class_names: class_names.to_vec(),
        })
    }

    /// Builds directly from counts; `counts` is row-major `[true][predicted]`.
    pub fn from_counts(counts: Vec<u64>, class_names: Vec<String>) -> Result<Self, MetricsError> {
        let classes = class_names.len();
        if counts.len() != classes * classes {
            return Err(MetricsError::ShapeMismatch(format!(
                "{} counts for {} classes",
                counts.len(),
                classes
            )));
        }
        Ok(Self {
            classes,
            counts,
            class_names,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.count(i, i)).sum()
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        (0..self.classes).map(|p| self.count(true_class, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|t| self.count(t, predicted)).sum()
    }

    /// CSV with a header row and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for name in &self.class_names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for t in 0..self.classes {
            let _ = write!(out, "{}", self.class_names[t]);
            for p in 0..self.classes {
                let _ = write!(out, ",{}", self.count(t, p));
            }
            out.push('\n');
        }
        out
    }
}

/// Ratio of correctly identified samples to all samples.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Harmonic mean of precision and recall; zero when both vanish.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True when the class had no predictions (precision defined as 0) or no
    /// true samples (recall defined as 0).
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct PrfReport {
    pub per_class: Vec<ClassPrf>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Per-class precision/recall/F1 plus their unweighted (macro) means.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> Result<PrfReport, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let per_class: Vec<ClassPrf> = (0..cm.classes())
        .map(|c| {
            let hit = cm.count(c, c) as f64;
            let col = cm.col_sum(c);
            let row = cm.row_sum(c);
            let precision = if col == 0 { 0.0 } else { hit / col as f64 };
            let recall = if row == 0 { 0.0 } else { hit / row as f64 };
            ClassPrf {
                precision,
                recall,
                f1: f1_score(precision, recall),
                degenerate: col == 0 || row == 0,
            }
        })
        .collect();
    let n = per_class.len() as f64;
    Ok(PrfReport {
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / n,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / n,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / n,
        per_class,
    })
}

/// Quadratic weighted kappa over class indices treated as an ordinal scale:
/// `1 - sum(w * observed) / sum(w * expected)` with `w_ij = (i-j)^2/(J-1)^2`
/// and `expected` the outer product of the marginals scaled to the total.
pub fn qwk(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let j = cm.classes();
    if j < 2 {
        return Err(MetricsError::DegenerateMarginals);
    }
    let denom_scale = ((j - 1) * (j - 1)) as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for t in 0..j {
        let row = cm.row_sum(t) as f64;
        for p in 0..j {
            let w = ((t as f64 - p as f64) * (t as f64 - p as f64)) / denom_scale;
            observed += w * cm.count(t, p) as f64;
            expected += w * row * cm.col_sum(p) as f64 / total as f64;
        }
    }
    if expected == 0.0 {
        return Err(MetricsError::DegenerateMarginals);
    }
    Ok(1.0 - observed / expected)
}

/// Mean Kullback-Leibler divergence of `pred` rows from `target` rows,
/// with `0 * log(0/x) = 0` and predictions clamped at `PROB_CLAMP`.
pub fn kld(pred: &[f64], target: &[f64], cols: usize) -> Result<f64, MetricsError> {
    if pred.len() != target.len() || cols == 0 || !pred.len().is_multiple_of(cols) {
        return Err(MetricsError::ShapeMismatch(format!(
            "pred holds {} values, target {}, cols {}",
            pred.len(),
            target.len(),
            cols
        )));
    }
    let rows = pred.len() / cols;
    if rows == 0 {
        return Err(MetricsError::ShapeMismatch("no rows".into()));
    }
    let mut acc = 0.0;
    for r in 0..rows {
        let p = &pred[r * cols..][..cols];
        let t = &target[r * cols..][..cols];
        for (tv, pv) in t.iter().zip(p) {
            if *tv > 0.0 {
                acc += tv * (tv / pv.max(PROB_CLAMP)).ln();
            }
        }
    }
    Ok(acc / rows as f64)
}

/// One-hot encodes labels into row-major `[n, cols]` values.
pub fn one_hot(labels: &[usize], cols: usize) -> Result<Vec<f64>, MetricsError> {
    let mut out = vec![0.0; labels.len() * cols];
    for (r, &l) in labels.iter().enumerate() {
        if l >= cols {
            return Err(MetricsError::LabelOutOfRange {
                label: l,
                classes: cols,
            });
        }
        out[r * cols + l] = 1.0;
    }
    Ok(out)
}

/// Mean negative log-likelihood of the true class, clamped like [`kld`].
pub fn nll_loss(scores: &[f64], labels: &[usize], cols: usize) -> Result<f64, MetricsError> {
    if cols == 0 || scores.len() != labels.len() * cols {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} scores for {} labels with {} columns",
            scores.len(),
            labels.len(),
            cols
        )));
    }
    let mut acc = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        if l >= cols {
            return Err(MetricsError::LabelOutOfRange {
                label: l,
                classes: cols,
            });
        }
        acc -= scores[r * cols + l].max(PROB_CLAMP).ln();
    }
    Ok(acc / labels.len() as f64)
}

#[derive(Clone, Debug)]
pub struct AucReport {
    /// `None` marks a class with no positives or no negatives, for which the
    /// AUC is undefined; such classes are excluded from the macro mean.
    pub per_class: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
}

/// One-vs-rest AUC per class from per-sample per-class scores (row-major
/// `[n, cols]`), computed with the rank statistic; ties contribute half.
pub fn roc_auc(scores: &[f64], labels: &[usize], cols: usize) -> Result<AucReport, MetricsError> {
    if cols == 0 || scores.len() != labels.len() * cols {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} scores for {} labels with {} columns",
            scores.len(),
            labels.len(),
            cols
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(MetricsError::LabelOutOfRange {
            label: bad,
            classes: cols,
        });
    }
    let n = labels.len();
    let per_class: Vec<Option<f64>> = (0..cols)
        .map(|c| {
            let n_pos = labels.iter().filter(|&&l| l == c).count();
            let n_neg = n - n_pos;
            if n_pos == 0 || n_neg == 0 {
                return None;
            }
            // Average ranks; tied scores share the mean of their rank range.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                scores[a * cols + c]
                    .partial_cmp(&scores[b * cols + c])
                    .expect("scores must not be NaN")
            });
            let mut rank_sum_pos = 0.0;
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j + 1 < n
                    && scores[order[j + 1] * cols + c] == scores[order[i] * cols + c]
                {
                    j += 1;
                }
                // ranks are 1-based; ties span i..=j
                let avg_rank = (i + j + 2) as f64 / 2.0;
                for &sample in &order[i..=j] {
                    if labels[sample] == c {
                        rank_sum_pos += avg_rank;
                    }
                }
                i = j + 1;
            }
            let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
            Some(u / (n_pos as f64 * n_neg as f64))
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().filter_map(|a| *a).collect();
    let macro_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(AucReport {
        per_class,
        macro_auc,
    })
}

/// Everything reported for one evaluation pass.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub epoch: usize,
    pub accuracy: f64,
    pub qwk: f64,
    pub kld: f64,
    pub loss: f64,
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassPrf>,
    pub per_class_auc: Vec<Option<f64>>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_auc: Option<f64>,
}

impl MetricsReport {
    /// Computes the full report from a confusion matrix plus the per-sample
    /// probability rows that produced it. Loss and KLD share one clamped
    /// probability path, so they coincide on one-hot targets.
    pub fn compute(
        cm: &ConfusionMatrix,
        scores: &[f64],
        labels: &[usize],
        epoch: usize,
    ) -> Result<Self, MetricsError> {
        let cols = cm.classes();
        let prf = precision_recall_f1(cm)?;
        let auc = roc_auc(scores, labels, cols)?;
        let target = one_hot(labels, cols)?;
        Ok(Self {
            epoch,
            accuracy: accuracy(cm)?,
            qwk: qwk(cm)?,
            kld: kld(scores, &target, cols)?,
            loss: nll_loss(scores, labels, cols)?,
            class_names: cm.class_names().to_vec(),
            per_class: prf.per_class,
            per_class_auc: auc.per_class,
            macro_precision: prf.macro_precision,
            macro_recall: prf.macro_recall,
            macro_f1: prf.macro_f1,
            macro_auc: auc.macro_auc,
        })
    }

    /// Versioned key/value text; values carry full precision.
    pub fn to_text(&self) -> String {
        let mut out = String::from("temviro-metrics v1\n");
        let _ = writeln!(out, "epoch = {}", self.epoch);
        let _ = writeln!(out, "accuracy = {}", self.accuracy);
        let _ = writeln!(out, "qwk = {}", self.qwk);
        let _ = writeln!(out, "kld = {}", self.kld);
        let _ = writeln!(out, "loss = {}", self.loss);
        let _ = writeln!(out, "macro_precision = {}", self.macro_precision);
        let _ = writeln!(out, "macro_recall = {}", self.macro_recall);
        let _ = writeln!(out, "macro_f1 = {}", self.macro_f1);
        match self.macro_auc {
            Some(a) => {
                let _ = writeln!(out, "macro_auc = {a}");
            }
            None => {
                let _ = writeln!(out, "macro_auc = undefined");
            }
        }
        for (i, (name, c)) in self.class_names.iter().zip(&self.per_class).enumerate() {
            let auc = match self.per_class_auc[i] {
                Some(a) => a.to_string(),
                None => "undefined".to_string(),
            };
            let _ = writeln!(
                out,
                "class {name} precision = {} recall = {} f1 = {} auc = {auc}{}",
                c.precision,
                c.recall,
                c.f1,
                if c.degenerate { " degenerate" } else { "" },
            );
        }
        out
    }

    /// CSV with one row per class and a final macro row; percentages carry
    /// full precision as ratios.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,auc\n");
        for (i, (name, c)) in self.class_names.iter().zip(&self.per_class).enumerate() {
            let auc = self.per_class_auc[i]
                .map(|a| a.to_string())
                .unwrap_or_default();
            let _ = writeln!(out, "{name},{},{},{},{auc}", c.precision, c.recall, c.f1);
        }
        let macro_auc = self.macro_auc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "macro,{},{},{},{macro_auc}",
            self.macro_precision, self.macro_recall, self.macro_f1
        );
        out
    }
}
