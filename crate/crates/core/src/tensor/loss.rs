use super::ops::{softmax_in_place, Op};
use super::{Result, Tensor, TensorError};

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`[N, V]`), skipping positions whose target is `ignore_id`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], ignore_id: usize) -> Result<Tensor> {
    let v = logits.cols();
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(TensorError::ShapeMismatch { op: "cross_entropy", left: logits.shape().to_vec(), right: vec![targets.len()] });
    }
    let mut probs = logits.to_vec();
    let mut total = 0.0;
    let mut kept = Vec::with_capacity(targets.len());
    for (row, &t) in probs.chunks_mut(v).zip(targets) {
        if t == ignore_id {
            kept.push(None);
            continue;
        }
        if t >= v {
            return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: t, bound: v });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        softmax_in_place(row);
        kept.push(Some(t));
    }
    let count = kept.iter().flatten().count();
    if count == 0 {
        return Err(TensorError::AllIgnored);
    }
    Ok(Tensor::from_loss(total / count as f64, Op::CrossEntropy { logits: logits.clone(), probs, targets: kept }))
}

/// Binary cross-entropy of `label` against `σ(score)`, averaged over the
/// elements of `score`. Computed as `softplus(s) - label·s`, which never
/// evaluates `log` of a saturated sigmoid.
pub fn bce_logits(score: &Tensor, label: f64) -> Tensor {
    let n = score.numel().max(1) as f64;
    let total: f64 = score.data().iter().map(|&s| softplus(s) - label * s).sum();
    Tensor::from_loss(total / n, Op::BceLogits { score: score.clone(), label })
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}
