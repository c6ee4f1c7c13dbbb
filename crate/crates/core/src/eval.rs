//! Accuracy, per-class accuracy, confusion matrix and report files.

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::scalar::Scalar;
use crate::tensor::FeatureMapStack;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const PER_CLASS_FILE: &str = "per_class.csv";

/// Counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        Self {
            class_names,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.n_classes();
        if truth >= n || predicted >= n {
            return Err(Error::contract(format!("label pair ({truth}, {predicted}) outside {n} classes")));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    /// Diagonal over row sum; `None` for a class with no test samples.
    pub fn class_accuracy(&self, truth: usize) -> Option<f64> {
        let n = self.row_sum(truth);
        (n > 0).then(|| self.counts[truth][truth] as f64 / n as f64)
    }
}

/// Metrics for one evaluated split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    /// One minus the mean accuracy over classes present in the set.
    pub avg_error: f64,
    pub confusion: ConfusionMatrix,
}

/// Scores `(truth, prediction)` pairs.
pub fn evaluate_predictions(pairs: &[(usize, usize)], class_names: &[String]) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::config("cannot evaluate an empty test set"));
    }
    let mut confusion = ConfusionMatrix::new(class_names.to_vec());
    for &(t, p) in pairs {
        confusion.record(t, p)?;
    }
    let per_class: Vec<Option<f64>> = (0..confusion.n_classes()).map(|c| confusion.class_accuracy(c)).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(Evaluation {
        accuracy: confusion.trace() as f64 / confusion.total() as f64,
        avg_error: (1.0 - mean).clamp(0.0, 1.0),
        per_class,
        confusion,
    })
}

/// Runs `model` over a labelled set and scores it.
pub fn evaluate<T: Scalar>(model: &NetworkGraph<T>, test_set: &[(FeatureMapStack<T>, usize)]) -> Result<Evaluation> {
    let pairs = test_set
        .iter()
        .map(|(x, y)| Ok((*y, model.forward(x)?.predicted_class())))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&pairs, model.class_names())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub avg_error: f64,
    /// Class name to accuracy; `null` for classes absent from the set.
    pub per_class: serde_json::Map<String, serde_json::Value>,
}

impl Evaluation {
    pub fn metrics_record(&self) -> MetricsRecord {
        let per_class = self
            .confusion
            .class_names
            .iter()
            .zip(&self.per_class)
            .map(|(name, acc)| (name.clone(), acc.map_or(serde_json::Value::Null, serde_json::Value::from)))
            .collect();
        MetricsRecord {
            accuracy: self.accuracy,
            avg_error: self.avg_error,
            per_class,
        }
    }

    pub fn metrics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.metrics_record())? + "\n")
    }

    /// Header row `truth\pred,<classes>`, then one row per true class.
    pub fn confusion_csv(&self) -> String {
        let c = &self.confusion;
        let mut s = String::from("truth\\pred");
        for name in &c.class_names {
            s.push(',');
            s.push_str(&csv_field(name));
        }
        s.push('\n');
        for (name, row) in c.class_names.iter().zip(&c.counts) {
            s.push_str(&csv_field(name));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// `class,support,correct,accuracy`; accuracy is empty for absent classes.
    pub fn per_class_csv(&self) -> String {
        let c = &self.confusion;
        let mut s = String::from("class,support,correct,accuracy\n");
        for (i, name) in c.class_names.iter().enumerate() {
            let acc = self.per_class[i].map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(s, "{},{},{},{}", csv_field(name), c.row_sum(i), c.counts[i][i], acc);
        }
        s
    }

    /// Writes the three report files into `dir`, creating it if needed.
    pub fn write_reports(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, body) in [
            (METRICS_FILE, self.metrics_json()?),
            (CONFUSION_FILE, self.confusion_csv()),
            (PER_CLASS_FILE, self.per_class_csv()),
        ] {
            let path = dir.join(file);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
