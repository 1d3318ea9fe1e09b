//! Combo loss: a smoothed negated Dice term plus pixel-mean binary
//! cross-entropy, with analytic gradients.
//!
//! For probabilities `p`, binary targets `y` over `q` pixels and smoothing `S`:
//!
//! ```text
//! dice(p, y) = (S − 2 pᵀy) / ((p + y)ᵀ1 + S)
//! bce(p, y)  = −(1/q) [yᵀ ln p + (1 − y)ᵀ ln(1 − p)]
//! combo      = dice + bce
//! ```

use crate::scalar::Scalar;

use super::LearnerError;

fn check(p_len: usize, y_len: usize) -> Result<(), LearnerError> {
    if p_len != y_len || p_len == 0 {
        return Err(LearnerError::ShapeMismatch { expected: y_len, found: p_len });
    }
    Ok(())
}

fn dice_parts<T: Scalar>(p: &[T], y: &[u8], smoothing: T) -> (T, T) {
    let mut overlap = T::zero();
    let mut total = T::zero();
    for (&pk, &yk) in p.iter().zip(y) {
        if yk != 0 {
            overlap = overlap + pk;
            total = total + pk + T::one();
        } else {
            total = total + pk;
        }
    }
    (smoothing - T::lit(2.0) * overlap, total + smoothing)
}

/// Negated, smoothed Dice coefficient; lies in `(−1, 1]`.
pub fn dice_term<T: Scalar>(p: &[T], y: &[u8], smoothing: T) -> Result<T, LearnerError> {
    check(p.len(), y.len())?;
    let (num, den) = dice_parts(p, y, smoothing);
    Ok(num / den)
}

pub fn binary_cross_entropy<T: Scalar>(p: &[T], y: &[u8]) -> Result<T, LearnerError> {
    check(p.len(), y.len())?;
    let sum: T = p
        .iter()
        .zip(y)
        .map(|(&pk, &yk)| if yk != 0 { pk.ln() } else { (T::one() - pk).ln() })
        .sum();
    Ok(-sum / T::from_count(p.len()))
}

/// Combo loss for one patch. `p` must already be clamped away from 0 and 1.
pub fn combo_loss<T: Scalar>(p: &[T], y: &[u8], smoothing: T) -> Result<T, LearnerError> {
    Ok(dice_term(p, y, smoothing)? + binary_cross_entropy(p, y)?)
}

/// Loss and its gradient with respect to each probability.
pub fn combo_loss_grad<T: Scalar>(p: &[T], y: &[u8], smoothing: T) -> Result<(T, Vec<T>), LearnerError> {
    check(p.len(), y.len())?;
    let (num, den) = dice_parts(p, y, smoothing);
    let q = T::from_count(p.len());
    let two = T::lit(2.0);
    let dice_base = -num / (den * den);
    let mut bce = T::zero();
    let grad = p
        .iter()
        .zip(y)
        .map(|(&pk, &yk)| {
            if yk != 0 {
                bce = bce - pk.ln();
                (dice_base - two / den) - T::one() / (q * pk)
            } else {
                bce = bce - (T::one() - pk).ln();
                dice_base + T::one() / (q * (T::one() - pk))
            }
        })
        .collect();
    Ok((num / den + bce / q, grad))
}

/// Loss and gradient with respect to pre-logistic activations, given the
/// logistic outputs `p`.
pub fn combo_loss_logit_grad<T: Scalar>(p: &[T], y: &[u8], smoothing: T) -> Result<(T, Vec<T>), LearnerError> {
    let (loss, mut grad) = combo_loss_grad(p, y, smoothing)?;
    for (g, &pk) in grad.iter_mut().zip(p) {
        *g = *g * pk * (T::one() - pk);
    }
    Ok((loss, grad))
}
