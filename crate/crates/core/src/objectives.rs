//! Training losses and macro-averaged recognition metrics.

use mubert_tensor::{Graph, Real, Var};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossWeights {
    /// Reconstruction weight.
    pub gamma: f64,
    /// Contextual agreement weight.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.beta < 0.0 || !self.gamma.is_finite() || !self.beta.is_finite() {
            return Err(Error::config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        if self.gamma == 0.0 && self.beta == 0.0 {
            return Err(Error::config("loss weights gamma and beta are both zero"));
        }
        Ok(())
    }
}

/// Mean squared error between the reconstruction and the target frame.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, predicted: Var, target: Var) -> Result<Var> {
    Ok(g.mse(predicted, target)?)
}

/// Mean squared error between two contextual feature vectors.
pub fn agreement_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    Ok(g.mse(a, b)?)
}

pub fn total_loss<T: Real>(g: &mut Graph<T>, recon: Var, agree: Var, w: &LossWeights) -> Result<Var> {
    let r = g.scale(recon, T::lit(w.gamma))?;
    if w.beta == 0.0 {
        return Ok(r);
    }
    let a = g.scale(agree, T::lit(w.beta))?;
    Ok(g.add(r, a)?)
}

pub fn classification_loss<T: Real>(g: &mut Graph<T>, logits: Var, label: usize) -> Result<Var> {
    Ok(g.cross_entropy(logits, label)?)
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::usage("confusion matrix must be square"));
        }
        Ok(Self { classes: c, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::usage(format!(
                "class pair ({truth}, {predicted}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::usage("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, i: usize) -> u64 {
        self.get(i, i)
    }

    pub fn false_positives(&self, i: usize) -> u64 {
        (0..self.classes).filter(|&t| t != i).map(|t| self.get(t, i)).sum()
    }

    pub fn false_negatives(&self, i: usize) -> u64 {
        (0..self.classes).filter(|&p| p != i).map(|p| self.get(i, p)).sum()
    }

    pub fn support(&self, i: usize) -> u64 {
        (0..self.classes).map(|p| self.get(i, p)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(|r| r.to_vec()).collect()
    }

    fn f1(&self, i: usize) -> f64 {
        let tp = self.true_positives(i) as f64;
        let denom = 2.0 * tp + (self.false_positives(i) + self.false_negatives(i)) as f64;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    }

    fn precision(&self, i: usize) -> f64 {
        let tp = self.true_positives(i) as f64;
        let denom = tp + self.false_positives(i) as f64;
        if denom == 0.0 {
            0.0
        } else {
            tp / denom
        }
    }
}

/// Unweighted (macro) F1. Classes with no true, predicted or missed
/// samples contribute 0.
pub fn uf1(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.classes == 0 || cm.total() == 0 {
        return Err(Error::Metric("UF1 of an empty confusion matrix".into()));
    }
    Ok((0..cm.classes).map(|i| cm.f1(i)).sum::<f64>() / cm.classes as f64)
}

/// Unweighted average recall; every class needs support.
pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.classes == 0 || cm.total() == 0 {
        return Err(Error::Metric("UAR of an empty confusion matrix".into()));
    }
    let mut acc = 0.0;
    for i in 0..cm.classes {
        let n = cm.support(i);
        if n == 0 {
            return Err(Error::Metric(format!("class {i} has no samples")));
        }
        acc += cm.true_positives(i) as f64 / n as f64;
    }
    Ok(acc / cm.classes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub uf1: f64,
    pub uar: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, config_hash: impl Into<String>) -> Result<Self> {
        let per_class = (0..cm.classes)
            .map(|i| {
                let support = cm.support(i);
                ClassMetrics {
                    class: i,
                    support,
                    precision: cm.precision(i),
                    recall: if support == 0 { 0.0 } else { cm.true_positives(i) as f64 / support as f64 },
                    f1: cm.f1(i),
                }
            })
            .collect();
        Ok(Self {
            samples: cm.total(),
            uf1: uf1(cm)?,
            uar: uar(cm)?,
            per_class,
            confusion: cm.rows(),
            config_hash: config_hash.into(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("samples {}\n", self.samples));
        s.push_str(&format!("uf1 {:.6}\n", self.uf1));
        s.push_str(&format!("uar {:.6}\n", self.uar));
        s.push_str(&format!("config_hash {}\n", self.config_hash));
        s.push_str("class support precision recall f1\n");
        for c in &self.per_class {
            s.push_str(&format!(
                "{} {} {:.6} {:.6} {:.6}\n",
                c.class, c.support, c.precision, c.recall, c.f1
            ));
        }
        s.push_str("confusion\n");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mubert_tensor::Tensor;

    #[test]
    fn losses() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap());
        let l = agreement_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 2.0);
        let same = agreement_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);

        let zeros = g.constant(Tensor::zeros(vec![4, 4]));
        let ones = g.constant(Tensor::full(vec![4, 4], 1.0));
        let r = reconstruction_loss(&mut g, zeros, ones).unwrap();
        assert_eq!(g.value(r).item().unwrap(), 1.0);

        let lr = g.constant(Tensor::scalar(0.5));
        let la = g.constant(Tensor::scalar(0.25));
        let t = total_loss(&mut g, lr, la, &LossWeights::default()).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 0.75);
        let t = total_loss(&mut g, lr, la, &LossWeights { gamma: 2.0, beta: 0.0 }).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 1.0);
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights { gamma: 0.0, beta: 0.0 }.validate().is_err());
        assert!(LossWeights { gamma: -1.0, beta: 1.0 }.validate().is_err());
        assert!(LossWeights { gamma: 0.0, beta: 1.0 }.validate().is_ok());
    }

    #[test]
    fn classification_loss_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(vec![3]));
        let l = classification_loss(&mut g, logits, 1).unwrap();
        assert!((g.value(l).item().unwrap() - 3f64.ln()).abs() < 1e-12);
        let sharp = g.constant(Tensor::new(vec![3], vec![0.0, 50.0, 0.0]).unwrap());
        let l = classification_loss(&mut g, sharp, 1).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-20);
        assert!(classification_loss(&mut g, logits, 3).is_err());
    }

    #[test]
    fn worked_uf1_example() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 0], vec![1, 1]]).unwrap();
        assert!((uf1(&cm).unwrap() - 11.0 / 15.0).abs() < 1e-12);
        assert!((uar(&cm).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_class_predictions() {
        let n = 7;
        let cm = ConfusionMatrix::from_rows(&[vec![n, 0, 0], vec![n, 0, 0], vec![n, 0, 0]]).unwrap();
        assert!((uf1(&cm).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        assert!((uar(&cm).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 5, 0], vec![0, 0, 6]]).unwrap();
        assert_eq!(uf1(&cm).unwrap(), 1.0);
        assert_eq!(uar(&cm).unwrap(), 1.0);
        assert!(matches!(uf1(&ConfusionMatrix::new(3)), Err(Error::Metric(_))));
        let missing = ConfusionMatrix::from_rows(&[vec![1, 0], vec![0, 0]]).unwrap();
        assert!(matches!(uar(&missing), Err(Error::Metric(_))));
        assert_eq!(uf1(&missing).unwrap(), 0.5);
    }

    #[test]
    fn report_rows_sum_to_samples() {
        let mut cm = ConfusionMatrix::new(3);
        for (t, p) in [(0, 0), (0, 1), (1, 1), (2, 2), (2, 0), (1, 1)] {
            cm.record(t, p).unwrap();
        }
        let rep = MetricsReport::from_confusion(&cm, "abc").unwrap();
        assert_eq!(rep.per_class.iter().map(|c| c.support).sum::<u64>(), rep.samples);
        assert!(rep.to_text().contains("uf1 "));
        let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(json["samples"], 6);
        assert!(cm.record(3, 0).is_err());
    }
}
