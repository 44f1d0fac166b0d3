//! Sigmoid confidence and the class-balanced focal loss.
//!
//! With `p_t = p` for crack points and `1 - p` otherwise, and
//! `α_t = α` / `1 - α` likewise, each point contributes
//! `-α_t (1 - p_t)^γ ln p_t`; the loss is the mean over points.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

/// `1 / (1 + e^-z)`, evaluated without overflow for any finite `z`.
#[inline]
pub fn sigmoid_confidence(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss of one point and its derivative with respect to the logit that
/// produced `p`.
#[inline]
pub(crate) fn focal_term(p: f64, label: u8, gamma: f64, alpha: f64) -> (f64, f64) {
    let clamped = !(PROB_EPS..=1.0 - PROB_EPS).contains(&p);
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        let q = 1.0 - p;
        let w = q.powf(gamma);
        let loss = -alpha * w * p.ln();
        let grad = if clamped {
            0.0
        } else {
            alpha * w * (gamma * p * p.ln() - q)
        };
        (loss, grad)
    } else {
        let q = 1.0 - p;
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * q.ln();
        let grad = if clamped {
            0.0
        } else {
            (1.0 - alpha) * w * (p - gamma * q * q.ln())
        };
        (loss, grad)
    }
}

fn check(confidences: &[f64], labels: &[u8]) -> Result<()> {
    if confidences.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} confidences for {} labels",
            confidences.len(),
            labels.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::Contract("focal loss of an empty batch".into()));
    }
    Ok(())
}

/// Mean focal loss.
pub fn focal_loss(confidences: &[f64], labels: &[u8], gamma: f64, alpha: f64) -> Result<f64> {
    check(confidences, labels)?;
    let sum: f64 = confidences
        .iter()
        .zip(labels)
        .map(|(&p, &y)| focal_term(p, y, gamma, alpha).0)
        .sum();
    Ok(sum / confidences.len() as f64)
}

/// Gradient of the mean focal loss with respect to each pre-sigmoid logit.
pub fn focal_loss_gradient(confidences: &[f64], labels: &[u8], gamma: f64, alpha: f64) -> Result<Vec<f64>> {
    check(confidences, labels)?;
    let inv = 1.0 / confidences.len() as f64;
    Ok(confidences
        .iter()
        .zip(labels)
        .map(|(&p, &y)| focal_term(p, y, gamma, alpha).1 * inv)
        .collect())
}

/// Unweighted mean binary cross-entropy with the same clamping.
pub fn binary_cross_entropy(confidences: &[f64], labels: &[u8]) -> Result<f64> {
    check(confidences, labels)?;
    let sum: f64 = confidences
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / confidences.len() as f64)
}
