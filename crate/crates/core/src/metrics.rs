//! Confusion matrices and the accuracy statistics derived from them.

use std::ops::Add;

use crate::error::{Error, Result};

/// `counts[t][p]` is the number of samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AaVariant {
    /// Mean one-vs-rest binary accuracy, `(TP_i + TN_i) / total`.
    OneVsRest,
    /// Mean per-class recall, `TP_i / row_i`.
    MacroRecall,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c < 2 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::Metric(format!(
                "confusion matrix must be square with at least 2 classes, got {c} rows"
            )));
        }
        Ok(ConfusionMatrix {
            counts,
            class_names: None,
        })
    }

    pub fn from_labels(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::Metric(format!(
                "{} true labels but {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        let mut cm = Self::from_counts(vec![vec![0; classes]; classes])?;
        for (&t, &p) in y_true.iter().zip(y_pred) {
            for label in [t, p] {
                if label >= classes {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.classes() {
            return Err(Error::Metric(format!(
                "{} class names for {} classes",
                names.len(),
                self.classes()
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    fn nonempty_total(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Metric("confusion matrix has no samples".into())),
            n => Ok(n as f64),
        }
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        Ok(self.trace() as f64 / self.nonempty_total()?)
    }

    pub fn average_accuracy(&self, variant: AaVariant) -> Result<f64> {
        let total = self.nonempty_total()?;
        let c = self.classes();
        let mut sum = 0.0;
        for i in 0..c {
            let tp = self.counts[i][i];
            match variant {
                AaVariant::OneVsRest => {
                    let fp_fn = self.row_sum(i) + self.col_sum(i) - 2 * tp;
                    let tn = self.total() - tp - fp_fn;
                    sum += (tp + tn) as f64 / total;
                }
                AaVariant::MacroRecall => {
                    let row = self.row_sum(i);
                    if row == 0 {
                        return Err(Error::Metric(format!(
                            "class {i} has no samples, recall is undefined"
                        )));
                    }
                    sum += tp as f64 / row as f64;
                }
            }
        }
        Ok(sum / c as f64)
    }

    /// Chance agreement `sum_c row_c * col_c / total^2`.
    pub fn expected_agreement(&self) -> Result<f64> {
        let total = self.nonempty_total()?;
        let s: u128 = (0..self.classes())
            .map(|i| self.row_sum(i) as u128 * self.col_sum(i) as u128)
            .sum();
        Ok(s as f64 / (total * total))
    }

    /// Cohen's kappa `(P_o - P_e) / (1 - P_e)`.
    pub fn kappa(&self) -> Result<f64> {
        let po = self.overall_accuracy()?;
        let pe = self.expected_agreement()?;
        if pe >= 1.0 {
            return Err(Error::Metric(
                "kappa is undefined: chance agreement is 1".into(),
            ));
        }
        Ok((po - pe) / (1.0 - pe))
    }

    pub fn summary(&self) -> Result<MetricSummary> {
        Ok(MetricSummary {
            oa: self.overall_accuracy()?,
            aa: self.average_accuracy(AaVariant::MacroRecall)?,
            aa_one_vs_rest: self.average_accuracy(AaVariant::OneVsRest)?,
            kappa: self.kappa()?,
        })
    }

    fn names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.classes()).map(|i| i.to_string()).collect())
    }

    /// Header of predicted class names, then one row per true class led by
    /// its name.
    pub fn to_csv(&self) -> String {
        let names = self.names();
        let mut s = String::from("true\\pred");
        for n in &names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (name, row) in names.iter().zip(&self.counts) {
            s.push_str(name);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

impl Add for &ConfusionMatrix {
    type Output = Result<ConfusionMatrix>;

    fn add(self, rhs: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.classes() != rhs.classes() {
            return Err(Error::Metric(format!(
                "cannot add {}-class and {}-class matrices",
                self.classes(),
                rhs.classes()
            )));
        }
        let counts = self
            .counts
            .iter()
            .zip(&rhs.counts)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(ConfusionMatrix {
            counts,
            class_names: self.class_names.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub oa: f64,
    /// Macro recall.
    pub aa: f64,
    pub aa_one_vs_rest: f64,
    pub kappa: f64,
}

impl MetricSummary {
    /// `metric,value` rows; accuracies in percent, kappa times 100.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\nOA,{:.2}\nAA,{:.2}\nAA_eq2,{:.2}\nkappa_x100,{:.2}\n",
            self.oa * 100.0,
            self.aa * 100.0,
            self.aa_one_vs_rest * 100.0,
            self.kappa * 100.0
        )
    }
}
