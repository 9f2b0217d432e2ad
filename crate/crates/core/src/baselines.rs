//! Logit-based OOD scores. Every function returns OOD-ness: higher means
//! more likely out-of-distribution, so confidence-style scores are negated.

use crate::detector::Detection;

/// Fixed ODIN temperature; input perturbation is not used.
pub const ODIN_TEMPERATURE: f64 = 1000.0;

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

fn max_softmax(logits: &[f64], temperature: f64) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| ((l - m) / temperature).exp()).sum();
    1.0 / z
}

/// Negative maximum softmax probability.
pub fn msp(logits: &[f64]) -> f64 {
    -max_softmax(logits, 1.0)
}

pub fn odin(logits: &[f64]) -> f64 {
    -max_softmax(logits, ODIN_TEMPERATURE)
}

pub fn max_logit(logits: &[f64]) -> f64 {
    -logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Free energy `-T log sum exp(l / T)` at `T = 1`.
pub fn energy(logits: &[f64]) -> f64 {
    -log_sum_exp(logits)
}

pub fn default_score(detection: &Detection) -> f64 {
    -detection.score
}
