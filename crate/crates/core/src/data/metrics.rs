use std::fmt;

use crate::branch::Labels;
use crate::error::{Error, Result};
use crate::tensor::{argsort_desc, Scalar, Tensor};

fn rows<'a, T: Scalar>(scores: &'a Tensor<T>, labels: &[usize]) -> Result<(usize, impl Iterator<Item = &'a [T]>)> {
    if scores.rank() != 2 {
        return Err(Error::shape("metrics", format!("expected [B, K], got {:?}", scores.shape())));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one sample".into()));
    }
    if scores.dim(0) != labels.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} rows, {} labels", scores.dim(0), labels.len()),
        ));
    }
    let k = scores.dim(1);
    Ok((k, scores.data().chunks_exact(k)))
}

/// Whether `label` is among the `k` highest scores; ties go to the lower class index.
fn hit<T: Scalar>(row: &[T], label: usize, k: usize) -> bool {
    argsort_desc(row).iter().take(k).any(|&c| c == label)
}

pub fn top_k_accuracy<T: Scalar>(scores: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let (_, it) = rows(scores, labels)?;
    let hits = it.zip(labels).filter(|(row, &y)| hit(row, y, k)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean over ground-truth classes of the per-class top-`k` recall.
pub fn class_mean_recall<T: Scalar>(scores: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let (classes, it) = rows(scores, labels)?;
    let mut total = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (row, &y) in it.zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                head: "metrics",
                label: y,
                classes,
            });
        }
        total[y] += 1;
        hits[y] += hit(row, y, k) as usize;
    }
    let present: Vec<f64> = total
        .iter()
        .zip(&hits)
        .filter(|(&t, _)| t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn class_mean_top5_recall<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    class_mean_recall(scores, labels, 5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadMetrics {
    pub top1: f64,
    pub top5: f64,
    pub mean_top5_recall: f64,
}

impl HeadMetrics {
    pub fn compute<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> Result<Self> {
        Ok(Self {
            top1: top_k_accuracy(scores, labels, 1)?,
            top5: top_k_accuracy(scores, labels, 5)?,
            mean_top5_recall: class_mean_top5_recall(scores, labels)?,
        })
    }
}

/// Accuracy and recall for the action, verb and noun predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub action: HeadMetrics,
    pub verb: HeadMetrics,
    pub noun: HeadMetrics,
}

impl MetricsReport {
    pub fn compute<T: Scalar>(scores: [&Tensor<T>; 3], labels: &Labels) -> Result<Self> {
        Ok(Self {
            action: HeadMetrics::compute(scores[0], &labels.action)?,
            verb: HeadMetrics::compute(scores[1], &labels.verb)?,
            noun: HeadMetrics::compute(scores[2], &labels.noun)?,
        })
    }

    pub fn heads(&self) -> [(&'static str, HeadMetrics); 3] {
        [("action", self.action), ("verb", self.verb), ("noun", self.noun)]
    }

    pub const CSV_HEADER: &'static str = "head,top1,top5,mean_top5_recall";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (name, m) in self.heads() {
            out.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", m.top1, m.top5, m.mean_top5_recall));
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>8} {:>8} {:>12}", "head", "top-1", "top-5", "mean rec@5")?;
        for (name, m) in self.heads() {
            writeln!(
                f,
                "{:<8} {:>7.2}% {:>7.2}% {:>11.2}%",
                name,
                100.0 * m.top1,
                100.0 * m.top5,
                100.0 * m.mean_top5_recall
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(rows: &[&[f64]]) -> Tensor<f64> {
        let k = rows[0].len();
        Tensor::new(vec![rows.len(), k], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn perfect_classifier() {
        let s = scores(&[&[5.0, 0.0, 0.0], &[0.0, 5.0, 0.0], &[0.0, 0.0, 5.0]]);
        let y = [0, 1, 2];
        assert_eq!(top_k_accuracy(&s, &y, 1).unwrap(), 1.0);
        assert_eq!(class_mean_top5_recall(&s, &y).unwrap(), 1.0);
    }

    #[test]
    fn k_at_least_classes_is_certain() {
        let s = scores(&[&[0.3, 0.1], &[0.9, 0.95]]);
        assert_eq!(top_k_accuracy(&s, &[1, 0], 2).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&s, &[1, 0], 9).unwrap(), 1.0);
    }

    #[test]
    fn ties_favour_lower_index() {
        let s = scores(&[&[1.0, 1.0, 1.0]]);
        assert_eq!(top_k_accuracy(&s, &[0], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&s, &[1], 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&s, &[2], 2).unwrap(), 0.0);
    }

    #[test]
    fn absent_classes_excluded() {
        let s = scores(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(class_mean_recall(&s, &[0, 0], 1).unwrap(), 0.5);
    }

    #[test]
    fn empty_input_and_bad_k() {
        let s = Tensor::<f64>::zeros([1, 3]);
        assert!(top_k_accuracy(&s, &[], 1).is_err());
        assert!(top_k_accuracy(&s, &[0], 0).is_err());
    }

    #[test]
    fn csv_has_three_rows() {
        let s = scores(&[&[1.0, 0.0]]);
        let l = Labels {
            action: vec![0],
            verb: vec![1],
            noun: vec![0],
        };
        let r = MetricsReport::compute([&s, &s, &s], &l).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("verb,0.000000,1.000000,1.000000"));
    }
}
