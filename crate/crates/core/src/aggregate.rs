//! Weighted parameter averaging shared by the α and anchor aggregators.

use crate::error::{FlicError, Result};

/// Effective per-client weights `(b / |A|) * ω_i`.
pub fn participation_weights(weights: &[f64], total_clients: usize) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(FlicError::Empty("aggregation: no active clients"));
    }
    if total_clients < weights.len() {
        return Err(FlicError::InvalidArgument(format!(
            "{} active clients out of only {total_clients}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(FlicError::InvalidArgument("aggregation weights must be finite and non-negative".into()));
    }
    let scale = total_clients as f64 / weights.len() as f64;
    Ok(weights.iter().map(|w| scale * w).collect())
}

/// `Σ_i w_i x_i` over equally long slices.
///
/// When the weights sum to one up to round-off the sum is evaluated as
/// `x_0 + Σ_i w_i (x_i - x_0)`, so identical inputs reproduce themselves bit for bit.
pub fn weighted_sum(inputs: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    let first = inputs.first().ok_or(FlicError::Empty("weighted_sum: no inputs"))?;
    if inputs.len() != weights.len() {
        return Err(FlicError::dims("weighted_sum weights", inputs.len(), weights.len()));
    }
    let len = first.len();
    if let Some(bad) = inputs.iter().find(|x| x.len() != len) {
        return Err(FlicError::dims("weighted_sum input length", len, bad.len()));
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; len];
    if (total - 1.0).abs() <= 1e-12 {
        for (x, &w) in inputs.iter().zip(weights) {
            for ((o, xi), x0) in out.iter_mut().zip(x.iter()).zip(first.iter()) {
                *o += w * (xi - x0);
            }
        }
        for (o, x0) in out.iter_mut().zip(first.iter()) {
            *o += x0;
        }
    } else {
        for (x, &w) in inputs.iter().zip(weights) {
            for (o, xi) in out.iter_mut().zip(x.iter()) {
                *o += w * xi;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_are_a_fixed_point() {
        let x = [0.1, -3.7, 1e-9, 12345.678];
        let w = participation_weights(&[1.0 / 49.0; 7], 49).unwrap();
        let out = weighted_sum(&[&x[..]; 7], &w).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn unnormalized_weights_use_plain_sum() {
        let out = weighted_sum(&[&[1.0, 2.0], &[3.0, 4.0]], &[2.0, 0.5]).unwrap();
        assert_eq!(out, vec![3.5, 6.0]);
    }

    #[test]
    fn errors() {
        assert!(participation_weights(&[], 3).is_err());
        assert!(participation_weights(&[0.5, 0.5], 1).is_err());
        assert!(weighted_sum(&[&[1.0], &[1.0, 2.0]], &[0.5, 0.5]).is_err());
    }
}
