use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `T x T` accuracy matrix: entry `(i, j)` is the test accuracy on task `j`
/// after training on task `i`. Only `j <= i` is ever filled.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultMatrix {
    entries: Vec<Vec<Option<f64>>>,
}

impl ResultMatrix {
    pub fn new(tasks: usize) -> Self {
        ResultMatrix {
            entries: vec![vec![None; tasks]; tasks],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let t = rows.len();
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::InvalidInput("result matrix must be square".into()));
        }
        for x in rows.iter().flatten().flatten() {
            if !(0.0..=1.0).contains(x) {
                return Err(Error::InvalidInput(format!("accuracy {x} outside [0, 1]")));
            }
        }
        Ok(ResultMatrix { entries: rows })
    }

    /// Lower-triangular matrix from row-wise values: row `i` holds `i + 1`
    /// accuracies.
    pub fn lower(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let mut m = ResultMatrix::new(t);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} entries, expected {}",
                    row.len(),
                    i + 1
                )));
            }
            for (j, &x) in row.iter().enumerate() {
                m.set(i, j, x)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.entries.len()
    }

    pub fn set(&mut self, i: usize, j: usize, acc: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::InvalidInput(format!("accuracy {acc} outside [0, 1]")));
        }
        self.entries[i][j] = Some(acc);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        &self.entries[i]
    }

    /// Mean of the filled entries of the last row: the headline accuracy.
    pub fn final_mean(&self) -> Option<f64> {
        let last = self.entries.last()?;
        let vals: Vec<f64> = last.iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Whitespace-separated rows, `-` for unfilled entries, values printed
    /// with enough digits to round-trip.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.entries {
            let cells: Vec<String> = row
                .iter()
                .map(|x| x.map_or("-".to_string(), |v| format!("{v:?}")))
                .collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|c| {
                        if c == "-" {
                            Ok(None)
                        } else {
                            c.parse::<f64>().map(Some).map_err(|e| {
                                Error::InvalidInput(format!("bad matrix cell {c:?}: {e}"))
                            })
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        ResultMatrix::from_rows(rows)
    }
}

fn check_pair(preds: &[u32], labels: &[u32]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("no predictions".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[u32], labels: &[u32]) -> Result<f64> {
    check_pair(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over classes that occur in the labels or
/// the predictions. A class with zero precision+recall denominator scores 0.
pub fn macro_f1(preds: &[u32], labels: &[u32]) -> Result<f64> {
    check_pair(preds, labels)?;
    // class -> (tp, fp, fn)
    let mut counts: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            counts.entry(p).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(l).or_default().2 += 1;
        }
    }
    let total: f64 = counts
        .values()
        .map(|&(tp, fp, fn_)| {
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / counts.len() as f64)
}

/// Backward transfer: mean over the first `T-1` tasks of the final-row
/// accuracy minus the accuracy right after learning the task.
pub fn bwt(r: &ResultMatrix) -> Result<f64> {
    let t = r.tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric(format!(
            "BWT needs at least 2 tasks, got {t}"
        )));
    }
    let mut sum = 0.0;
    for i in 0..t - 1 {
        let last = r.get(t - 1, i).ok_or_else(|| {
            Error::UndefinedMetric(format!("R[{}][{i}] missing", t - 1))
        })?;
        let diag = r
            .get(i, i)
            .ok_or_else(|| Error::UndefinedMetric(format!("R[{i}][{i}] missing")))?;
        sum += last - diag;
    }
    Ok(sum / (t - 1) as f64)
}

/// Mean and sample standard deviation (n-1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_and_f1_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(macro_f1(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);

        // class 0: tp 1, fp 0, fn 1 -> 2/3; class 1: tp 2, fp 1, fn 0 -> 0.8
        let (p, l) = ([0, 1, 1, 1], [0, 0, 1, 1]);
        assert_eq!(accuracy(&p, &l).unwrap(), 0.75);
        assert!((macro_f1(&p, &l).unwrap() - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((macro_f1(&p, &l).unwrap() - 0.7333).abs() < 1e-4);

        assert_eq!(macro_f1(&[4, 4], &[4, 4]).unwrap(), 1.0);
    }

    #[test]
    fn class_only_in_predictions_counts_as_zero() {
        // class 0: tp 1 fn 1 -> 2/3; class 9: fp 1 -> 0
        assert!((macro_f1(&[0, 9], &[0, 0]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(accuracy(&[], &[]), Err(Error::InvalidInput(_))));
        assert!(matches!(macro_f1(&[], &[]), Err(Error::InvalidInput(_))));
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn bwt_examples() {
        let r = ResultMatrix::lower(&[vec![1.0], vec![0.6, 0.9]]).unwrap();
        assert!((bwt(&r).unwrap() + 0.4).abs() < 1e-12);

        // ((0.9 - 0.9) + (0.9 - 0.8)) / 2
        let r = ResultMatrix::lower(&[vec![0.9], vec![0.5, 0.8], vec![0.9, 0.9, 0.7]]).unwrap();
        assert!((bwt(&r).unwrap() - 0.05).abs() < 1e-12);

        let r = ResultMatrix::lower(&[vec![0.7], vec![0.7, 0.4]]).unwrap();
        assert_eq!(bwt(&r).unwrap(), 0.0);

        assert!(matches!(
            bwt(&ResultMatrix::lower(&[vec![1.0]]).unwrap()),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(bwt(&ResultMatrix::new(3)).is_err());
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let r = ResultMatrix::lower(&[vec![0.1], vec![1.0 / 3.0, 0.2]]).unwrap();
        let text = r.to_text();
        assert_eq!(text.lines().next().unwrap(), "0.1 -");
        assert_eq!(ResultMatrix::from_text(&text).unwrap(), r);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }
}
