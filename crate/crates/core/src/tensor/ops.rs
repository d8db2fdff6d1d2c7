use super::{Real, Tensor};
use crate::error::{Error, Result};

const LOG_CLAMP: f64 = 1e-12;

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Row-wise softmax of a `[N, K]` tensor.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = logits.shape() else {
        return Err(Error::shape("softmax_rows", "[N, K]", logits.shape()));
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(*k) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// `-ln p[label]` (argument clamped at 1e-12) and its gradient with respect
/// to the logits that produced `probabilities`, which is `p - onehot(label)`.
pub fn cross_entropy<T: Real>(probabilities: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= probabilities.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        )));
    }
    let p = probabilities[label].max(T::from_f64_lossy(LOG_CLAMP));
    let mut grad = probabilities.to_vec();
    grad[label] = grad[label] - T::one();
    Ok((-p.ln(), grad))
}

/// Mean softmax cross-entropy over a batch of logits `[N, K]`. Returns the
/// loss, the softmax probabilities and the gradient of the mean loss with
/// respect to the logits.
pub fn softmax_cross_entropy_batch<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let probs = softmax_rows(logits)?;
    let n = logits.batch();
    if labels.len() != n {
        return Err(Error::shape("cross entropy labels", n, labels.len()));
    }
    let k = logits.shape()[1];
    let nf = T::from_usize(n.max(1)).unwrap();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in probs.data().chunks(k).zip(labels) {
        let (l, g) = cross_entropy(row, label)?;
        loss = loss + l;
        grad.extend(g.into_iter().map(|v| v / nf));
    }
    Ok((loss / nf, probs, Tensor::new(vec![n, k], grad)?))
}
