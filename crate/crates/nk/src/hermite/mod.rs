//! Probabilists' Hermite polynomials and numbers, Hermite transforms of
//! activations, magnitude and rectified-activation functions, and absT.

mod abst;
mod activation;
mod expansion;
pub mod quadrature;
mod rectified;
pub mod special;

pub use abst::{abs_t, abs_t_inverse, abs_t_max, abs_t_max_sq, roc_t, roc_t_sq, ROC_T_SQ};
pub use activation::{Activation, SmoothFn, SMOOTH_N_MAX};
pub use expansion::{
    hermite_transform, magnitude_fn, magnitude_fn_inverse, reconstruct, relu_energy,
    relu_low_order_gamma, relu_magnitude_closed, HermiteExpansion, MAX_TRANSFORM_ORDER,
    QUAD_NODES,
};
pub use rectified::{
    estimate_profile, radius_sq, rectified_activation, rectified_envelope, rectified_series,
    Centers, ProfileOptions, RectifiedProfile,
};

#[allow(unused_imports)]
pub(crate) use activation::{derivative_coeffs, horner};

use crate::error::{NkError, Result};

/// Default cap on the order accepted by [`hermite_poly`] and [`hermite_number`].
pub const DEFAULT_MAX_ORDER: usize = 128;

/// He_k(ζ) by the three-term recurrence.
pub fn hermite_poly(k: usize, z: f64) -> Result<f64> {
    hermite_poly_limited(k, z, DEFAULT_MAX_ORDER)
}

pub fn hermite_poly_limited(k: usize, z: f64, limit: usize) -> Result<f64> {
    if k > limit {
        return Err(NkError::OrderOverflow { order: k, limit });
    }
    Ok(*he_values(k, z).last().unwrap())
}

/// Hen_k = He_k(0).
pub fn hermite_number(k: usize) -> Result<f64> {
    if k > DEFAULT_MAX_ORDER {
        return Err(NkError::OrderOverflow {
            order: k,
            limit: DEFAULT_MAX_ORDER,
        });
    }
    if k % 2 == 1 {
        return Ok(0.0);
    }
    let p = k / 2;
    let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
    Ok(sign * special::ln_abs_hen(k).exp())
}

/// He_0(ζ), ..., He_kmax(ζ).
pub fn he_values(kmax: usize, z: f64) -> Vec<f64> {
    let mut h = Vec::with_capacity(kmax + 1);
    h.push(1.0);
    if kmax >= 1 {
        h.push(z);
    }
    for k in 1..kmax {
        let next = z * h[k] - k as f64 * h[k - 1];
        h.push(next);
    }
    h
}

/// Normalized values h_k = He_k/√(k!), by h_{k+1} = (ζ h_k − √k h_{k−1})/√(k+1).
pub fn he_normalized_values(kmax: usize, z: f64) -> Vec<f64> {
    let mut h = Vec::with_capacity(kmax + 1);
    h.push(1.0);
    if kmax >= 1 {
        h.push(z);
    }
    for k in 1..kmax {
        let next = (z * h[k] - (k as f64).sqrt() * h[k - 1]) / ((k + 1) as f64).sqrt();
        h.push(next);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: usize, k: usize) -> f64 {
        special::ln_choose(n, k).exp()
    }

    #[test]
    fn low_order_values() {
        assert_eq!(hermite_poly(0, 1.7).unwrap(), 1.0);
        for (z, want) in [(0.0, -1.0), (1.0, 0.0), (2.0, 3.0)] {
            assert_eq!(hermite_poly(2, z).unwrap(), want);
        }
        assert_eq!(hermite_poly(6, 0.0).unwrap(), -15.0);
        assert!(matches!(
            hermite_poly(129, 0.0),
            Err(NkError::OrderOverflow { .. })
        ));
    }

    #[test]
    fn hermite_numbers() {
        assert_eq!(hermite_number(1).unwrap(), 0.0);
        assert!((hermite_number(2).unwrap() + 1.0).abs() < 1e-15);
        assert!((hermite_number(4).unwrap() - 3.0).abs() < 1e-13);
        assert!((hermite_number(6).unwrap() + 15.0).abs() < 1e-12);
        for k in 0..30 {
            let a = hermite_number(k).unwrap();
            let b = hermite_poly(k, 0.0).unwrap();
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "k={k}");
        }
    }

    #[test]
    fn explicit_sum_agrees_with_recurrence() {
        for k in 0..15usize {
            for &z in &[-1.3f64, 0.2, 2.5] {
                let mut s = 0.0;
                let mut p = 0;
                while 2 * p <= k {
                    let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
                    s += sign * z.powi((k - 2 * p) as i32)
                        * (special::ln_fact(k)
                            - special::ln_fact(p)
                            - special::ln_fact(k - 2 * p)
                            - p as f64 * std::f64::consts::LN_2)
                            .exp();
                    p += 1;
                }
                let r = hermite_poly(k, z).unwrap();
                assert!((s - r).abs() <= 1e-9 * r.abs().max(1.0), "k={k} z={z}");
            }
        }
    }

    #[test]
    fn orthogonality_by_quadrature() {
        let q = quadrature::gauss_hermite(60);
        for j in 0..=12 {
            for k in 0..=12 {
                // (1/√(2π)) ∫ He_j He_k e^{−ζ²/2} / √(j! k!) = δ_jk
                let v = q.expect(|z| {
                    let h = he_values(12, z);
                    h[j] * h[k]
                }) / (0.5 * (special::ln_fact(j) + special::ln_fact(k))).exp();
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-8, "j={j} k={k}: {v}");
            }
        }
    }

    #[test]
    fn additivity() {
        for k in 0..=10usize {
            for &z in &[-1.0, 0.3, 1.7] {
                for &xi in &[-0.8f64, 0.5] {
                    let h = he_values(k, z);
                    let s: f64 = (0..=k)
                        .map(|l| binom(k, l) * h[k - l] * xi.powi(l as i32))
                        .sum();
                    let want = hermite_poly(k, z + xi).unwrap();
                    assert!((s - want).abs() < 1e-9 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn normalized_recurrence_matches() {
        let h = he_values(20, 1.3);
        let n = he_normalized_values(20, 1.3);
        for k in 0..=20 {
            let want = h[k] / special::ln_fact(k).exp().sqrt();
            assert!((n[k] - want).abs() < 1e-12 * want.abs().max(1.0));
        }
    }
}
