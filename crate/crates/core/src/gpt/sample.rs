use rand::Rng as _;

use super::model::{argmax, Gpt};
use super::real::Real;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Softmax of `logits / temperature` in f64.
pub fn probabilities(logits: &[f64], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| ((l - max) / t).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Temperature 0 picks the argmax (lowest index on ties) without touching
/// `rng`; a positive temperature samples from the tempered softmax.
pub fn sample_from_logits(logits: &[f64], temperature: f64, rng: &mut Rng) -> Result<u32> {
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::config(format!(
            "temperature must be non-negative, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::config("cannot sample from empty logits"));
    }
    if temperature == 0.0 {
        return Ok(argmax(logits) as u32);
    }
    let p = probabilities(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Ok(i as u32);
        }
    }
    // rounding left u above the final cumulative sum
    Ok(p.iter().rposition(|v| *v > 0.0).unwrap_or(0) as u32)
}

/// Next-token prediction for a context of at most `context_len` tokens.
pub fn predict_next<R: Real>(
    model: &Gpt<R>,
    context: &[u32],
    temperature: f64,
    rng: &mut Rng,
) -> Result<u32> {
    if temperature.is_nan() || temperature < 0.0 {
        return Err(Error::config(format!(
            "temperature must be non-negative, got {temperature}"
        )));
    }
    let logits: Vec<f64> = model.next_logits(context)?.iter().map(|v| v.f64()).collect();
    sample_from_logits(&logits, temperature, rng)
}
