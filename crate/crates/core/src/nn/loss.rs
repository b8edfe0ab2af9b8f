/// Max-subtracted softmax of one row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a `batch x classes` matrix.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    logits.chunks_exact(classes).flat_map(softmax).collect()
}

/// Mean cross-entropy of probability rows against class labels. The log is
/// taken of the probability clamped to `1e-12`.
pub fn cross_entropy(probs: &[f64], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let classes = probs.len() / labels.len();
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -probs[b * classes + y].max(crate::distill::PROB_FLOOR).ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
