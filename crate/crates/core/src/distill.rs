//! Cyclic distillation between the private and shared subnets, and the
//! combined training objective.

use crate::nn::softmax_rows;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// `KL(p || q) = sum p (ln p - ln q)` with clamped logarithms.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else {
                pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln())
            }
        })
        .sum()
}

/// Batch-mean cyclic distillation loss and the gradient it sends into each
/// subnet's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclicDistillation {
    pub loss: f64,
    /// Gradient w.r.t. the private subnet logits, from `KL(y_G || y_L)`.
    pub d_private: Vec<f64>,
    /// Gradient w.r.t. the shared subnet logits, from `KL(y_L || y_G)`.
    pub d_shared: Vec<f64>,
}

/// `0.5 * (KL(y_L || y_G) + KL(y_G || y_L))` averaged over the batch.
///
/// The first argument of each KL term is a fixed target: `KL(y_L || y_G)`
/// only moves the shared logits and `KL(y_G || y_L)` only the private ones.
/// Because both arguments are softmax outputs, the gradient of `KL(a || b)`
/// w.r.t. the logits of `b` is `b - a`.
pub fn cyclic_distillation_loss(y_private: &[f64], y_shared: &[f64], classes: usize) -> CyclicDistillation {
    assert_eq!(y_private.len(), y_shared.len());
    let batch = y_private.len() / classes;
    if batch == 0 {
        return CyclicDistillation {
            loss: 0.0,
            d_private: Vec::new(),
            d_shared: Vec::new(),
        };
    }
    let mut loss = 0.0;
    for (l, g) in y_private.chunks_exact(classes).zip(y_shared.chunks_exact(classes)) {
        loss += 0.5 * (kl(l, g) + kl(g, l));
    }
    let scale = 0.5 / batch as f64;
    let d_shared = y_shared
        .iter()
        .zip(y_private)
        .map(|(g, l)| scale * (g - l))
        .collect();
    let d_private = y_private
        .iter()
        .zip(y_shared)
        .map(|(l, g)| scale * (l - g))
        .collect();
    CyclicDistillation {
        loss: loss / batch as f64,
        d_private,
        d_shared,
    }
}

/// Loss value and logit gradients for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub loss: f64,
    pub ce: f64,
    /// Unweighted distillation term; zero when distillation is inactive.
    pub cd: f64,
    pub d_full: Vec<f64>,
    /// Present only when distillation contributed.
    pub d_private: Option<Vec<f64>>,
    pub d_shared: Option<Vec<f64>>,
}

/// `CE(y_full, labels) + lambda * L_CD(y_L, y_G)`. Cross-entropy applies to
/// the full network only. Distillation is skipped when either subnet's
/// logits are absent or `lambda == 0`.
pub fn total_loss(
    full_logits: &[f64],
    labels: &[usize],
    subnet_logits: Option<(&[f64], &[f64])>,
    lambda: f64,
    classes: usize,
) -> TotalLoss {
    let batch = labels.len();
    let probs = softmax_rows(full_logits, classes);
    let ce = crate::nn::cross_entropy(&probs, labels);
    let mut d_full = probs;
    for (b, &y) in labels.iter().enumerate() {
        d_full[b * classes + y] -= 1.0;
    }
    let inv = 1.0 / batch as f64;
    d_full.iter_mut().for_each(|v| *v *= inv);

    match subnet_logits {
        Some((private, shared)) if lambda > 0.0 => {
            let y_private = softmax_rows(private, classes);
            let y_shared = softmax_rows(shared, classes);
            let cd = cyclic_distillation_loss(&y_private, &y_shared, classes);
            let scale = |v: Vec<f64>| v.into_iter().map(|x| lambda * x).collect::<Vec<_>>();
            TotalLoss {
                loss: ce + lambda * cd.loss,
                ce,
                cd: cd.loss,
                d_full,
                d_private: Some(scale(cd.d_private)),
                d_shared: Some(scale(cd.d_shared)),
            }
        }
        _ => TotalLoss {
            loss: ce,
            ce,
            cd: 0.0,
            d_full,
            d_private: None,
            d_shared: None,
        },
    }
}
