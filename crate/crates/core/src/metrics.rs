//! Confusion matrix and the per-class / global scores derived from it.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `C x C` counts, rows are reference classes and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub f1: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub oa: f64,
    /// Mean recall over the classes that occur in the reference.
    pub aa: f64,
    pub kappa: f64,
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pair per pixel; pixels whose reference is `ignore` are skipped.
    pub fn accumulate(&mut self, labels: &[u8], predictions: &[u8], ignore: Option<u8>) -> Result<()> {
        if labels.len() != predictions.len() {
            return Err(Error::shape(
                "accumulate",
                format!("{} predictions", labels.len()),
                format!("{}", predictions.len()),
            ));
        }
        let c = self.classes;
        let mut add = vec![0u64; c * c];
        for (&l, &p) in labels.iter().zip(predictions) {
            if Some(l) == ignore {
                continue;
            }
            let (l, p) = (l as usize, p as usize);
            if l >= c || p >= c {
                return Err(Error::invalid("accumulate", format!("class id {} outside 0..{c}", l.max(p))));
            }
            add[l * c + p] += 1;
        }
        for (a, b) in self.counts.iter_mut().zip(add) {
            *a += b;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape(
                "merge",
                format!("{} classes", self.classes),
                format!("{} classes", other.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("scores", "confusion matrix is empty"));
        }
        let c = self.classes;
        let t = total as f64;
        let row: Vec<u64> = (0..c).map(|i| (0..c).map(|j| self.get(i, j)).sum()).collect();
        let col: Vec<u64> = (0..c).map(|j| (0..c).map(|i| self.get(i, j)).sum()).collect();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut f1 = Vec::with_capacity(c);
        let mut precision = Vec::with_capacity(c);
        let mut recall = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.get(k, k);
            let (fp, fn_) = (col[k] - tp, row[k] - tp);
            f1.push(ratio(2 * tp, 2 * tp + fp + fn_));
            precision.push(ratio(tp, col[k]));
            recall.push(ratio(tp, row[k]));
        }
        let trace: u64 = (0..c).map(|k| self.get(k, k)).sum();
        let oa = trace as f64 / t;
        let present: Vec<usize> = (0..c).filter(|&k| row[k] > 0).collect();
        let aa = present.iter().map(|&k| recall[k]).sum::<f64>() / present.len() as f64;
        let pe = (0..c).map(|k| row[k] as f64 * col[k] as f64).sum::<f64>() / (t * t);
        let kappa = if pe >= 1.0 { 1.0 } else { (oa - pe) / (1.0 - pe) };
        Ok(Scores {
            f1,
            precision,
            recall,
            oa,
            aa,
            kappa,
            total,
        })
    }
}

impl Scores {
    /// `name,value` rows: per-class F1, then oa, aa, kappa.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("name,value\n");
        for (k, f) in self.f1.iter().enumerate() {
            let _ = writeln!(s, "f1_{},{f:.6}", class_name(class_names, k));
        }
        let _ = writeln!(s, "oa,{:.6}\naa,{:.6}\nkappa,{:.6}", self.oa, self.aa, self.kappa);
        s
    }

    pub fn to_table(&self, class_names: &[String]) -> String {
        let width = (0..self.f1.len())
            .map(|k| class_name(class_names, k).len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut s = format!("{:<width$}  {:>9}  {:>9}  {:>9}\n", "class", "precision", "recall", "f1");
        for k in 0..self.f1.len() {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}",
                class_name(class_names, k),
                self.precision[k],
                self.recall[k],
                self.f1[k]
            );
        }
        let _ = writeln!(s, "{:<width$}  {:>9.4}", "OA", self.oa);
        let _ = writeln!(s, "{:<width$}  {:>9.4}", "AA", self.aa);
        let _ = writeln!(s, "{:<width$}  {:>9.4}", "kappa", self.kappa);
        s
    }
}

fn class_name(names: &[String], k: usize) -> String {
    names.get(k).cloned().unwrap_or_else(|| format!("class{k}"))
}
