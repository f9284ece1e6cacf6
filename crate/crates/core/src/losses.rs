//! Token-level losses over logit rows, with their logit gradients.

use ndarray::{Array1, Array2, ArrayView1};

use crate::data::Sequence;
use crate::model::forward::log_softmax;

/// Summed next-token cross-entropy over the masked positions of `seq`, and
/// `scale * dL/dlogits`.
pub fn masked_cross_entropy(logits: &Array2<f64>, seq: &Sequence, scale: f64) -> (f64, Array2<f64>) {
    let logp = log_softmax(logits);
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, &train) in seq.targets.iter().enumerate() {
        if !train {
            continue;
        }
        let target = seq.tokens[i + 1];
        loss -= logp[[i, target]];
        let mut row = grad.row_mut(i);
        for (g, &lp) in row.iter_mut().zip(logp.row(i).iter()) {
            *g = lp.exp() * scale;
        }
        row[target] -= scale;
    }
    (loss, grad)
}

/// `KL(P || Q) = sum_v P(v) (log P(v) - log Q(v))` from log-probabilities.
pub fn kl_from_log_probs(log_p: ArrayView1<f64>, log_q: ArrayView1<f64>) -> f64 {
    log_p
        .iter()
        .zip(log_q.iter())
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

/// KL(P || softmax(z)) and its gradient `softmax(z) - P` with respect to z.
pub fn kl_to_logits(log_p: ArrayView1<f64>, logits: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let log_q = logits.mapv(|z| z - lse);
    let kl = kl_from_log_probs(log_p, log_q.view());
    let grad = ndarray::Zip::from(&log_q)
        .and(log_p)
        .map_collect(|&lq, &lp| lq.exp() - lp.exp());
    (kl, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_token_kl_matches_direct_sum() {
        let lp = array![0.9f64.ln(), 0.1f64.ln()];
        let lq = array![0.5f64.ln(), 0.5f64.ln()];
        let direct = 0.9 * (1.8f64).ln() + 0.1 * (0.2f64).ln();
        let kl = kl_from_log_probs(lp.view(), lq.view());
        assert!((kl - direct).abs() < 1e-15);
        assert!((kl - 0.368064).abs() < 1e-5);
    }

    #[test]
    fn kl_gradient_matches_fd() {
        let lp = array![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()];
        let z = array![0.3, -1.0, 2.0];
        let (_, g) = kl_to_logits(lp.view(), z.view());
        for i in 0..3 {
            let mut a = z.clone();
            a[i] += 1e-6;
            let mut b = z.clone();
            b[i] -= 1e-6;
            let fd = (kl_to_logits(lp.view(), a.view()).0 - kl_to_logits(lp.view(), b.view()).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let seq = Sequence {
            tokens: vec![0, 2, 1],
            targets: vec![true, false, false],
        };
        let logits = array![[0.1, 0.4, -0.3], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]];
        let (loss, g) = masked_cross_entropy(&logits, &seq, 1.0);
        let p2 = (-0.3f64).exp() / [0.1f64, 0.4, -0.3].iter().map(|v| v.exp()).sum::<f64>();
        assert!((loss + p2.ln()).abs() < 1e-12);
        let mut a = logits.clone();
        a[[0, 1]] += 1e-6;
        let mut b = logits.clone();
        b[[0, 1]] -= 1e-6;
        let fd = (masked_cross_entropy(&a, &seq, 1.0).0 - masked_cross_entropy(&b, &seq, 1.0).0) / 2e-6;
        assert!((fd - g[[0, 1]]).abs() < 1e-8);
        assert!(g.row(1).iter().all(|&v| v == 0.0));
    }
}
