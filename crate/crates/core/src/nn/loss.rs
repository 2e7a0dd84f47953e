use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Scalar, Tensor};

/// Batch-mean softmax cross-entropy over `[B, K]` logits.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxCrossEntropy<T: Scalar = f32> {
    cache: Option<(Tensor<T>, Vec<usize>)>,
}

fn check_labels<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    head: &'static str,
) -> Result<(usize, usize)> {
    let (b, k) = match logits.shape() {
        &[b, k] => (b, k),
        s => return Err(Error::shape("softmax_ce", format!("expected [B, K], got {s:?}"))),
    };
    if labels.len() != b {
        return Err(Error::shape(
            "softmax_ce",
            format!("{b} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            head,
            label,
            classes: k,
        });
    }
    Ok((b, k))
}

/// Mean cross-entropy and its gradient w.r.t. the logits in one pass.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    head: &'static str,
) -> Result<(T, Tensor<T>)> {
    let (b, k) = check_labels(logits, labels, head)?;
    let probs = softmax_rows(logits.data(), k);
    let inv_b = T::one() / T::from_usize(b);
    let mut loss = T::zero();
    let mut grad = probs;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(row[0], T::max);
        let lse = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln() + m;
        loss += lse - row[y];
        grad[i * k + y] -= T::one();
    }
    for g in &mut grad {
        *g *= inv_b;
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_ce"));
    }
    Ok((loss, Tensor::new(vec![b, k], grad)?))
}

impl<T: Scalar> SoftmaxCrossEntropy<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
        check_labels(logits, labels, "logits")?;
        self.cache = Some((logits.clone(), labels.to_vec()));
        Ok(cross_entropy(logits, labels, "logits")?.0)
    }

    pub fn backward(&self) -> Result<Tensor<T>> {
        let (logits, labels) = self.cache.as_ref().ok_or(Error::MissingCache("softmax_ce"))?;
        Ok(cross_entropy(logits, labels, "logits")?.1)
    }
}
