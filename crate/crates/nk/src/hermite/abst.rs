//! The absT family.

use crate::error::{NkError, Result};
use crate::numerics::bisect_increasing;

/// Fixed radius of convergence rocT², strictly below 1.
pub const ROC_T_SQ: f64 = 0.99;

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(NkError::Domain(format!("eta {eta} not in (0, 1)")))
    }
}

/// absT_η(ζ) = (ζ/(1−ζ)) (η²/(1−η²) − ζη²/(1−ζη²)) for |ζ| < rocT².
pub fn abs_t(eta: f64, z: f64) -> Result<f64> {
    check_eta(eta)?;
    if !(z.abs() < ROC_T_SQ) {
        return Err(NkError::Domain(format!(
            "absT argument {z} outside |z| < rocT^2 = {ROC_T_SQ}"
        )));
    }
    Ok(abs_t_raw(eta, z))
}

fn abs_t_raw(eta: f64, z: f64) -> f64 {
    let e2 = eta * eta;
    (z / (1.0 - z)) * (e2 / (1.0 - e2) - z * e2 / (1.0 - z * e2))
}

pub fn roc_t(eta: f64) -> f64 {
    let _ = eta;
    ROC_T_SQ.sqrt()
}

pub fn roc_t_sq(eta: f64) -> f64 {
    let _ = eta;
    ROC_T_SQ
}

/// absTmax_η² = absT_η(rocT²).
pub fn abs_t_max_sq(eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(abs_t_raw(eta, ROC_T_SQ))
}

pub fn abs_t_max(eta: f64) -> Result<f64> {
    Ok(abs_t_max_sq(eta)?.sqrt())
}

/// Inverse of absT on [0, rocT²), by bisection.
pub fn abs_t_inverse(eta: f64, y: f64) -> Result<f64> {
    let ymax = abs_t_max_sq(eta)?;
    if !(y >= 0.0 && y <= ymax) {
        return Err(NkError::Domain(format!(
            "absT inverse argument {y} outside [0, absTmax^2 = {ymax}]"
        )));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    Ok(bisect_increasing(&|z| abs_t_raw(eta, z), y, 0.0, ROC_T_SQ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_example() {
        assert_eq!(abs_t(0.5, 0.0).unwrap(), 0.0);
        let v = abs_t(0.5, 0.5).unwrap();
        assert!((v - 4.0 / 21.0).abs() < 1e-15);
        // double series Σ_k η^{2k} Σ_{l=1}^k ζ^l
        let mut s = 0.0;
        for k in 1..=200 {
            let inner: f64 = (1..=k).map(|l| 0.5f64.powi(l)).sum();
            s += 0.25f64.powi(k) * inner;
        }
        assert!((s - v).abs() < 1e-14);
        assert!((abs_t_inverse(0.5, 4.0 / 21.0).unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn domains() {
        assert!(abs_t(0.5, 0.99).is_err());
        assert!(abs_t(1.0, 0.1).is_err());
        let m = abs_t_max_sq(0.75).unwrap();
        assert!(abs_t_inverse(0.75, m * 1.01).is_err());
        assert!((abs_t_inverse(0.75, m).unwrap() - ROC_T_SQ).abs() < 1e-9);
        assert!((roc_t(0.3).powi(2) - ROC_T_SQ).abs() < 1e-15);
    }
}
