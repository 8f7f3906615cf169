use crate::error::{Error, Result};
use crate::HORIZONS;

/// Stable `-[y log s(z) + (1 - y) log(1 - s(z))]`.
pub fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid cross-entropy summed over the six horizons.
pub fn multilabel_loss(logits: &[f64; HORIZONS], y: &[f64; HORIZONS]) -> Result<f64> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite { op: "multilabel_loss" });
    }
    Ok(logits.iter().zip(y).map(|(&z, &t)| bce_term(z, t)).sum())
}

/// Closed-form gradient `s(z) - y`.
pub fn multilabel_loss_grad(logits: &[f64; HORIZONS], y: &[f64; HORIZONS]) -> [f64; HORIZONS] {
    std::array::from_fn(|i| sigmoid(logits[i]) - y[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits() {
        let l = multilabel_loss(&[0.0; 6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((l - 6.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 4.158883).abs() < 1e-6);
    }

    #[test]
    fn saturation_and_known_value() {
        assert!((bce_term(20.0, 1.0) - 2.061e-9).abs() < 1e-12);
        assert!((bce_term(2.0, 1.0) - 0.126_928_011_042_972_6).abs() < 1e-15);
        assert!(bce_term(-800.0, 0.0) >= 0.0);
        assert!(bce_term(800.0, 1.0).is_finite());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(multilabel_loss(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 6]).is_err());
    }
}
