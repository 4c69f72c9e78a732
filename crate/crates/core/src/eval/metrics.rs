use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// Each row divided by its support, in percent; empty rows stay zero.
    pub fn row_normalized_percent(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self, class_names: &[String], percent: bool) -> String {
        let mut out = String::from("true");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        let pct = self.row_normalized_percent();
        for (i, name) in class_names.iter().enumerate() {
            out.push_str(name);
            for j in 0..self.classes() {
                if percent {
                    out.push_str(&format!(",{:.2}", pct[i][j]));
                } else {
                    out.push_str(&format!(",{}", self.counts[i][j]));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    /// Per-class scores weighted by support.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
    /// Number of precision/recall/F1 values that were 0/0 and set to 0.
    pub zero_divisions: usize,
}

fn ratio(num: u64, den: u64, zero_divisions: &mut usize) -> f64 {
    if den == 0 {
        *zero_divisions += 1;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(truth: &[usize], pred: &[usize], k: usize, averaging: Averaging) -> Result<Metrics> {
    if truth.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                classes: k,
            });
        }
        cm.counts[t][p] += 1;
    }
    let mut zero_divisions = 0;
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.counts[c][c];
        let p = ratio(tp, cm.predicted(c), &mut zero_divisions);
        let r = ratio(tp, cm.support(c), &mut zero_divisions);
        let f = if p + r == 0.0 {
            zero_divisions += 1;
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        precision.push(p);
        recall.push(r);
        f1.push(f);
    }
    if zero_divisions > 0 {
        log::debug!("{zero_divisions} undefined precision/recall/F1 values set to 0");
    }
    let total = cm.total();
    let average = |v: &[f64]| -> f64 {
        if k == 0 {
            return 0.0;
        }
        match averaging {
            Averaging::Macro => v.iter().sum::<f64>() / k as f64,
            Averaging::Weighted if total == 0 => 0.0,
            Averaging::Weighted => (0..k).map(|c| v[c] * cm.support(c) as f64).sum::<f64>() / total as f64,
        }
    };
    Ok(Metrics {
        accuracy: if total == 0 {
            0.0
        } else {
            cm.trace() as f64 / total as f64
        },
        precision: average(&precision),
        recall: average(&recall),
        f1: average(&f1),
        per_class_precision: precision,
        per_class_recall: recall,
        per_class_f1: f1,
        confusion: cm,
        zero_divisions,
    })
}

/// Mean and sample standard deviation (n - 1); std is 0 for fewer than two
/// values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
