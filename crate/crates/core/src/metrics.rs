//! Confusion matrices and per-class precision / recall / F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::shape("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { classes, counts: rows.iter().flatten().copied().collect() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }
}

/// Tally predictions against targets over `classes` classes.
pub fn confusion(predictions: &[usize], targets: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch(predictions.len(), targets.len()));
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&p, &t) in predictions.iter().zip(targets) {
        if let Some(&bad) = [p, t].iter().find(|&&c| c >= classes) {
            return Err(Error::InvalidTarget { target: bad, classes });
        }
        m.add(t, p);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_id: Option<usize>,
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Accuracy plus per-class metrics. Classes with no predictions (or no
/// samples) get precision (or recall) 0 rather than NaN.
pub fn report(m: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let per_class = (0..m.classes())
        .map(|c| {
            let tp = m.get(c, c);
            let precision = ratio(tp, m.col_sum(c));
            let recall = ratio(tp, m.row_sum(c));
            ClassMetrics { precision, recall, f1: f1_score(precision, recall) }
        })
        .collect();
    Ok(MetricsReport { accuracy: ratio(m.trace(), total), per_class, fold_id: None, confusion: m.rows() })
}

impl MetricsReport {
    pub fn macro_f1(&self) -> f64 {
        self.per_class.iter().map(|c| c.f1).sum::<f64>() / self.per_class.len() as f64
    }

    pub fn recall(&self, class: usize) -> f64 {
        self.per_class[class].recall
    }

    /// Recall pooled over all samples; always equals accuracy.
    pub fn micro_recall(&self) -> f64 {
        let tp: u64 = (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum();
        let all: u64 = self.confusion.iter().flatten().sum();
        ratio(tp, all)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One line of a results table: validation and test metrics for one fold
/// (or the mean over folds when `fold` is `None`) under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub condition: String,
    pub fold: Option<usize>,
    pub accuracy_val: f64,
    pub accuracy_test: f64,
    /// Test-split metrics per class.
    pub per_class: Vec<ClassMetrics>,
}

impl TableRow {
    pub fn new(condition: &str, fold: Option<usize>, val: &MetricsReport, test: &MetricsReport) -> Self {
        TableRow {
            condition: condition.to_string(),
            fold,
            accuracy_val: val.accuracy,
            accuracy_test: test.accuracy,
            per_class: test.per_class.clone(),
        }
    }

    fn numbers(&self) -> Vec<f64> {
        let mut v = vec![self.accuracy_val, self.accuracy_test];
        for c in &self.per_class {
            v.extend([c.precision, c.recall, c.f1]);
        }
        v
    }

    /// Arithmetic mean of every numeric column.
    pub fn mean(condition: &str, rows: &[TableRow]) -> Result<TableRow> {
        let first = rows.first().ok_or(Error::EmptyMatrix)?;
        let n = rows.len() as f64;
        let mut sums = vec![0.0; first.numbers().len()];
        for r in rows {
            let nums = r.numbers();
            if nums.len() != sums.len() {
                return Err(Error::LengthMismatch(nums.len(), sums.len()));
            }
            sums.iter_mut().zip(nums).for_each(|(s, v)| *s += v);
        }
        let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
        let per_class =
            means[2..].chunks(3).map(|c| ClassMetrics { precision: c[0], recall: c[1], f1: c[2] }).collect();
        Ok(TableRow {
            condition: condition.to_string(),
            fold: None,
            accuracy_val: means[0],
            accuracy_test: means[1],
            per_class,
        })
    }
}

/// CSV with one row per fold per condition; `fold` reads `mean` on mean rows.
pub fn table_csv(rows: &[TableRow], class_names: &[&str]) -> String {
    let mut out = String::from("condition,fold,accuracy_val,accuracy_test");
    for name in class_names {
        let _ = write!(out, ",precision_{name},recall_{name},f1_{name}");
    }
    out.push('\n');
    for r in rows {
        let fold = r.fold.map_or_else(|| "mean".to_string(), |f| f.to_string());
        let _ = write!(out, "{},{},{:.6},{:.6}", r.condition, fold, r.accuracy_val, r.accuracy_test);
        for c in &r.per_class {
            let _ = write!(out, ",{:.6},{:.6},{:.6}", c.precision, c.recall, c.f1);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_fixtures() {
        let m = confusion(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 1, 2, 2], 3).unwrap();
        assert_eq!(m.rows(), vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        let m = confusion(&[0, 0, 0, 0], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.col_sum(0), 4);
        let m = confusion(&[0, 1, 1], &[0, 0, 1], 3).unwrap();
        assert_eq!(m.rows(), vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 0]]);
        assert!(matches!(confusion(&[0], &[0, 1], 3), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn report_fixtures() {
        let perfect =
            report(&ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 5]]).unwrap()).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert!(perfect.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));

        let r = report(&ConfusionMatrix::from_rows(&[vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 0]]).unwrap()).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[1].precision, 0.5);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert_eq!(r.per_class[2], ClassMetrics { precision: 0.0, recall: 0.0, f1: 0.0 });

        let single = report(&confusion(&[1], &[1], 2).unwrap()).unwrap();
        assert_eq!(single.accuracy, 1.0);
        assert!(matches!(report(&ConfusionMatrix::new(3)), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn mean_row_and_csv() {
        let a = report(&confusion(&[0, 1], &[0, 1], 2).unwrap()).unwrap();
        let b = report(&confusion(&[0, 0], &[0, 1], 2).unwrap()).unwrap();
        let rows = vec![TableRow::new("Baseline", Some(0), &a, &a), TableRow::new("Baseline", Some(1), &b, &b)];
        let mean = TableRow::mean("Baseline", &rows).unwrap();
        assert_eq!(mean.accuracy_test, 0.75);
        let csv = table_csv(&[rows[0].clone(), mean], &["AD", "CN"]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "condition,fold,accuracy_val,accuracy_test,precision_AD,recall_AD,f1_AD,precision_CN,recall_CN,f1_CN"
        );
        assert!(lines[2].starts_with("Baseline,mean,0.750000,0.750000"));
    }

    #[test]
    fn json_round_trip() {
        let r = report(&confusion(&[0, 1, 1], &[0, 0, 1], 3).unwrap()).unwrap();
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
