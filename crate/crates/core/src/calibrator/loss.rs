use serde::{Deserialize, Serialize};

use crate::scalar::{tempered_softmax, top_two, Scalar};

/// Focal exponent and calibration-loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub lambda_cal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            lambda_cal: 0.1,
        }
    }
}

/// `−(1 − p_y)^γ · ln p_y`.
pub fn focal_loss<S: Scalar>(probs: &[S], label: usize, gamma: S) -> S {
    let p = probs[label].floored();
    -(S::one() - p).max(S::zero()).powf(gamma) * p.ln()
}

/// `1 − p* + p**` when the top class is the label, `p* − p**` otherwise.
pub fn calibration_loss<S: Scalar>(probs: &[S], label: usize) -> S {
    let (first, second) = top_two(probs);
    if first == label {
        S::one() - probs[first] + probs[second]
    } else {
        probs[first] - probs[second]
    }
}

/// Combined loss of `softmax(logits / T)` and its derivative with respect to `T`.
pub fn tempered_loss_and_grad<S: Scalar>(
    logits: &[S],
    temperature: S,
    label: usize,
    weights: LossWeights,
) -> (S, S) {
    let gamma = S::lit(weights.gamma);
    let lambda = S::lit(weights.lambda_cal);
    let p = tempered_softmax(logits, temperature);
    let loss = focal_loss(&p, label, gamma) + lambda * calibration_loss(&p, label);

    // dL/dp
    let mut dp = vec![S::zero(); p.len()];
    let py = p[label].floored();
    let one_minus = (S::one() - py).max(S::zero());
    let focal_slope = if weights.gamma == 0.0 {
        S::zero()
    } else if one_minus > S::zero() {
        gamma * one_minus.powf(gamma - S::one()) * py.ln()
    } else {
        S::zero()
    };
    dp[label] += focal_slope - one_minus.powf(gamma) / py;
    let (first, second) = top_two(&p);
    let sign = if first == label { -S::one() } else { S::one() };
    dp[first] += lambda * sign;
    dp[second] -= lambda * sign;

    // softmax Jacobian: dL/du_k = p_k (dp_k − Σ_j p_j dp_j), u = z / T
    let mean: S = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
    let t2 = temperature * temperature;
    let dt = p
        .iter()
        .zip(&dp)
        .zip(logits)
        .map(|((&pk, &gk), &zk)| pk * (gk - mean) * (-zk / t2))
        .sum();
    (loss, dt)
}
