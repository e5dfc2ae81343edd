use crate::error::{EosError, Result};

/// Weighted binary cross entropy normalized by the weight sum:
/// `Σ w·(−y·ln p − (1−y)·ln(1−p)) / Σ w`.
pub fn loss_weighted_bce(probs: &[f64], labels: &[f64], weights: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.len() != weights.len() {
        return Err(EosError::Invalid(format!(
            "length mismatch: {} probs, {} labels, {} weights",
            probs.len(),
            labels.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&p, &y), &w)| w * (-y * p.ln() - (1.0 - y) * (-p).ln_1p()))
        .sum();
    Ok(sum / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_half() {
        let l = loss_weighted_bce(&[0.5], &[1.0], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn invariant_to_weight_scale() {
        let p = [0.2, 0.7, 0.9];
        let y = [0.0, 1.0, 0.0];
        let a = loss_weighted_bce(&p, &y, &[1.0, 3.0, 0.5]).unwrap();
        let b = loss_weighted_bce(&p, &y, &[2.0, 6.0, 1.0]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn two_step_weighted_by_hand() {
        // EoS step weighted 25, p = 0.8; normal step weight 1, p = 0.1.
        let expected = (25.0 * -(0.8f64).ln() + -(0.9f64).ln()) / 26.0;
        let l = loss_weighted_bce(&[0.8, 0.1], &[1.0, 0.0], &[25.0, 1.0]).unwrap();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.218_613_434_558_195).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(loss_weighted_bce(&[0.5, 0.5], &[1.0], &[1.0, 1.0]).is_err());
    }
}
