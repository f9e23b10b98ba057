//! Hermite transforms of centered activations and the magnitude function.

use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::quadrature::gauss_hermite;
use super::special::{
    gauss_moment_tail, ln_choose, ln_fact, normal_cdf, normal_pdf, INV_SQRT_2PI,
};
use super::he_normalized_values;
use crate::error::{NkError, Result};

/// Largest truncation order accepted by [`hermite_transform`].
pub const MAX_TRANSFORM_ORDER: usize = 2048;
/// Gauss–Hermite node count for activations without closed forms; checked against twice as many.
pub const QUAD_NODES: usize = 200;

const QUAD_TOL: f64 = 1e-9;

/// Truncated Hermite expansion τ̄(ζ; ξ) ≈ Σ_{k≤K} a_k He_k(ζ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HermiteExpansion {
    pub center: f64,
    /// a_k for k = 0..=K. May underflow to 0 for large k.
    pub coeffs: Vec<f64>,
    /// c_k = a_k √(k!), the coefficients against the orthonormal basis.
    pub normalized: Vec<f64>,
    pub order: usize,
    /// L² weight-norm of the dropped tail, (Σ_{k>K} a_k² k!)^{1/2}.
    pub tail_l2: f64,
    /// The expansion is the complete (finite) series.
    pub exact: bool,
}

impl HermiteExpansion {
    pub(crate) fn from_normalized(center: f64, normalized: Vec<f64>, tail_l2: f64, exact: bool) -> Self {
        let coeffs = normalized
            .iter()
            .enumerate()
            .map(|(k, &c)| c * (-0.5 * ln_fact(k)).exp())
            .collect();
        let order = normalized.len() - 1;
        HermiteExpansion {
            center,
            coeffs,
            normalized,
            order,
            tail_l2,
            exact,
        }
    }

    /// ln |a_k|, finite even where a_k underflows.
    pub fn ln_abs_coeff(&self, k: usize) -> f64 {
        self.normalized[k].abs().ln() - 0.5 * ln_fact(k)
    }

    /// All coefficients with k ≥ 1 vanish.
    pub fn is_trivial(&self) -> bool {
        self.normalized.iter().skip(1).all(|&c| c == 0.0)
    }
}

/// Hermite coefficients of τ̄(ζ; ξ) = τ(ξ + ζ) − τ(ξ) up to order K.
pub fn hermite_transform(act: &Activation, xi: f64, k: usize) -> Result<HermiteExpansion> {
    if k < 1 {
        return Err(NkError::Domain("truncation order K must be >= 1".into()));
    }
    if k > MAX_TRANSFORM_ORDER {
        return Err(NkError::OrderOverflow {
            order: k,
            limit: MAX_TRANSFORM_ORDER,
        });
    }
    if !xi.is_finite() {
        return Err(NkError::NonFinite(format!("center {xi}")));
    }
    let exp = match act {
        Activation::Relu => relu_transform(xi, k),
        Activation::Linear | Activation::Polynomial(_) => {
            polynomial_transform(&act.power_coeffs().unwrap(), xi, k)
        }
        Activation::Smooth(_) => quadrature_transform(act, xi, k)?,
    };
    if let Some(bad) = exp.normalized.iter().position(|c| !c.is_finite()) {
        return Err(NkError::NonFinite(format!("coefficient a_{bad} at center {xi}")));
    }
    Ok(exp)
}

fn polynomial_transform(c: &[f64], xi: f64, k: usize) -> HermiteExpansion {
    let d = c.len() - 1;
    // Taylor shift: τ(ξ + ζ) = Σ_n t_n ζ^n.
    let t: Vec<f64> = (0..=d)
        .map(|n| {
            (n..=d)
                .map(|i| c[i] * ln_choose(i, n).exp() * xi.powi((i - n) as i32))
                .sum()
        })
        .collect();
    // ζ^n = Σ_m n!/(2^m m! (n−2m)!) He_{n−2m}, and τ̄ drops t_0.
    let full: Vec<f64> = (0..=d)
        .map(|kk| {
            let mut a = 0.0;
            let mut m = 0;
            while kk + 2 * m <= d {
                let n = kk + 2 * m;
                if n >= 1 {
                    let w = (ln_fact(n)
                        - m as f64 * std::f64::consts::LN_2
                        - ln_fact(m)
                        - 0.5 * ln_fact(kk))
                    .exp();
                    a += t[n] * w;
                }
                m += 1;
            }
            a
        })
        .collect();
    let mut normalized = vec![0.0; k + 1];
    for (i, v) in full.iter().enumerate().take(k + 1) {
        normalized[i] = *v;
    }
    let tail: f64 = full.iter().skip(k + 1).map(|v| v * v).sum::<f64>().sqrt();
    HermiteExpansion::from_normalized(xi, normalized, tail, k >= d)
}

/// Low-order ReLU coefficients (a_0, a_1) from the incomplete-gamma forms.
///
/// The moments ∫_{−ξ/√2}^∞ t^m e^{−t²} dt use Γ((m+1)/2) − ½Γ((m+1)/2, ξ²/2)
/// when the lower limit is negative and m is even.
pub fn relu_low_order_gamma(xi: f64) -> (f64, f64) {
    let b = -xi / std::f64::consts::SQRT_2;
    let pi_sqrt = std::f64::consts::PI.sqrt();
    // ∫_{−ξ}^∞ z^m φ(z) dz = 2^{m/2}/√π · ∫_b^∞ t^m e^{−t²} dt
    let m0 = gauss_moment_tail(0, b) / pi_sqrt;
    let m1 = std::f64::consts::SQRT_2 * gauss_moment_tail(1, b) / pi_sqrt;
    let m2 = 2.0 * gauss_moment_tail(2, b) / pi_sqrt;
    let a0 = xi * m0 + m1 - xi.max(0.0);
    let a1 = xi * m1 + m2;
    (a0, a1)
}

fn relu_transform(xi: f64, k: usize) -> HermiteExpansion {
    let (a0, a1) = relu_low_order_gamma(xi);
    let mut normalized = vec![0.0; k + 1];
    normalized[0] = a0;
    normalized[1] = a1;
    if k >= 2 {
        // a_k = φ(ξ) He_{k−2}(−ξ)/k!  ⇒  c_k = φ(ξ) h_{k−2}(−ξ)/√(k(k−1)).
        let h = he_normalized_values(k - 2, -xi);
        let p = normal_pdf(xi);
        for kk in 2..=k {
            normalized[kk] = p * h[kk - 2] / ((kk * (kk - 1)) as f64).sqrt();
        }
    }
    let kept: f64 = normalized.iter().map(|c| c * c).sum();
    let tail = (relu_energy(xi) - kept).max(0.0).sqrt();
    HermiteExpansion::from_normalized(xi, normalized, tail, false)
}

/// E[τ̄(Z; ξ)²] for the ReLU.
pub fn relu_energy(xi: f64) -> f64 {
    let cdf = normal_cdf(xi);
    let pdf = normal_pdf(xi);
    let r = xi.max(0.0);
    (xi * xi + 1.0) * cdf + xi * pdf - 2.0 * r * (xi * cdf + pdf) + r * r
}

fn quadrature_coeffs(act: &Activation, xi: f64, k: usize, nodes: usize) -> (Vec<f64>, f64) {
    let q = gauss_hermite(nodes);
    let base = act.eval(xi);
    let mut c = vec![0.0; k + 1];
    let mut energy = 0.0;
    for (&z, &w) in q.nodes.iter().zip(&q.weights) {
        let v = act.eval(xi + z) - base;
        energy += w * v * v;
        let h = he_normalized_values(k, z);
        for (ck, hk) in c.iter_mut().zip(&h) {
            *ck += w * v * hk;
        }
    }
    (c, energy)
}

fn quadrature_transform(act: &Activation, xi: f64, k: usize) -> Result<HermiteExpansion> {
    let (coarse, _) = quadrature_coeffs(act, xi, k, QUAD_NODES);
    let (fine, energy) = quadrature_coeffs(act, xi, k, 2 * QUAD_NODES);
    for kk in 0..=k {
        if (coarse[kk] - fine[kk]).abs() > QUAD_TOL {
            return Err(NkError::Quadrature {
                k: kk,
                coarse: coarse[kk],
                fine: fine[kk],
            });
        }
    }
    let kept: f64 = fine.iter().map(|c| c * c).sum();
    let tail = (energy - kept).max(0.0).sqrt();
    Ok(HermiteExpansion::from_normalized(xi, fine, tail, false))
}

/// Truncated series Σ_{k≤K} a_k He_k(ζ).
pub fn reconstruct(exp: &HermiteExpansion, z: f64) -> f64 {
    let h = he_normalized_values(exp.order, z);
    exp.normalized.iter().zip(&h).map(|(c, h)| c * h).sum()
}

/// s̄(ζ) = Σ_k |a_k| ((1+ζ)^k − 1) for an expansion centered at 0.
pub fn magnitude_fn(exp: &HermiteExpansion, z: f64) -> Result<f64> {
    if exp.center != 0.0 {
        return Err(NkError::Domain(format!(
            "magnitude function needs an expansion at 0, got center {}",
            exp.center
        )));
    }
    if !(z >= 0.0) {
        return Err(NkError::Domain(format!("magnitude function argument {z} < 0")));
    }
    Ok(magnitude_unchecked(exp, z))
}

fn magnitude_unchecked(exp: &HermiteExpansion, z: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let l = z.ln_1p();
    let mut s = 0.0;
    for k in 1..=exp.order {
        if exp.normalized[k] == 0.0 {
            continue;
        }
        let kl = k as f64 * l;
        // ln((1+ζ)^k − 1) = kL + ln(1 − e^{−kL})
        let ln_growth = kl + (-(-kl).exp_m1()).ln();
        s += (exp.ln_abs_coeff(k) + ln_growth).exp();
    }
    s
}

/// The unique ζ ≥ 0 with s̄(ζ) = y, by bracketed bisection.
pub fn magnitude_fn_inverse(exp: &HermiteExpansion, y: f64) -> Result<f64> {
    if !(y >= 0.0) {
        return Err(NkError::Domain(format!("magnitude inverse argument {y} < 0")));
    }
    magnitude_fn(exp, 0.0)?;
    if y == 0.0 {
        return Ok(0.0);
    }
    if exp.is_trivial() {
        return Err(NkError::Domain(format!(
            "magnitude function is identically zero; {y} is unreachable"
        )));
    }
    let mut hi = 1.0;
    while magnitude_unchecked(exp, hi) < y {
        hi *= 2.0;
        if !hi.is_finite() || hi > 1e300 || !magnitude_unchecked(exp, hi).is_finite() {
            return Err(NkError::Domain(format!(
                "magnitude inverse: {y} unreachable under truncation"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if magnitude_unchecked(exp, mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Closed form of the ReLU magnitude function, with erfi.
pub fn relu_magnitude_closed(z: f64) -> f64 {
    use super::special::erfi;
    let r2 = std::f64::consts::SQRT_2;
    let e = erfi((1.0 + z) / r2);
    0.5 * z * (e + 1.0)
        + INV_SQRT_2PI * ((0.5f64).exp() - ((1.0 + z).powi(2) / 2.0).exp())
        + 0.5 * (e - erfi(1.0 / r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::Activation;

    const S2PI: f64 = 2.506_628_274_631_000_5;

    #[test]
    fn relu_at_zero_matches_closed_values() {
        let e = hermite_transform(&Activation::Relu, 0.0, 8).unwrap();
        let a = &e.coeffs;
        assert!((a[0] - 1.0 / S2PI).abs() < 1e-15);
        assert!((a[1] - 0.5).abs() < 1e-15);
        assert!((a[2] - 1.0 / (2.0 * S2PI)).abs() < 1e-15);
        assert!(a[3].abs() < 1e-18);
        assert!((a[4] + 1.0 / (24.0 * S2PI)).abs() < 1e-15);
    }

    #[test]
    fn relu_low_order_matches_normal_forms() {
        for &xi in &[-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0] {
            let (a0, a1) = relu_low_order_gamma(xi);
            let want0 = xi * normal_cdf(xi) + normal_pdf(xi) - xi.max(0.0);
            assert!((a0 - want0).abs() < 1e-10, "xi={xi}");
            assert!((a1 - normal_cdf(xi)).abs() < 1e-10, "xi={xi}");
        }
    }

    #[test]
    fn polynomial_is_exact() {
        let p = Activation::polynomial(vec![0.0, 0.0, 1.0]);
        let e = hermite_transform(&p, 0.0, 4).unwrap();
        assert_eq!(e.coeffs, vec![1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(e.exact);
        assert!((reconstruct(&e, 2.0) - 4.0).abs() < 1e-14);
        let lin = hermite_transform(&Activation::Linear, 0.7, 3).unwrap();
        assert_eq!(lin.coeffs, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(reconstruct(&lin, 3.5), 3.5);
        for &xi in &[-0.9, 0.3] {
            let c = Activation::polynomial(vec![0.5, -1.0, 0.25, 0.75]);
            let e = hermite_transform(&c, xi, 5).unwrap();
            for &z in &[-1.1, 0.0, 0.6] {
                let want = c.eval(xi + z) - c.eval(xi);
                assert!((reconstruct(&e, z) - want).abs() < 1e-13);
            }
            let short = hermite_transform(&c, xi, 2).unwrap();
            assert!(!short.exact && short.tail_l2 > 0.0);
            assert!((short.tail_l2 - e.normalized[3].abs()).abs() < 1e-14);
        }
    }

    #[test]
    fn relu_reconstruction_within_tail() {
        let e = hermite_transform(&Activation::Relu, 0.0, 50).unwrap();
        let err = (reconstruct(&e, 1.0) - 1.0).abs();
        assert!(e.tail_l2 > 0.0 && e.tail_l2 < 0.05);
        assert!(err < 2.0 * e.tail_l2, "err {err} tail {}", e.tail_l2);
    }

    #[test]
    fn tanh_by_quadrature() {
        let t = Activation::Smooth(crate::hermite::SmoothFn::Tanh);
        let e = hermite_transform(&t, 0.3, 30).unwrap();
        for &z in &[-0.5, 0.0, 0.8] {
            let want = (0.3f64 + z).tanh() - 0.3f64.tanh();
            assert!((reconstruct(&e, z) - want).abs() < 1e-3);
        }
        assert!(e.tail_l2 < 1e-3);
    }

    #[test]
    fn magnitude_basics() {
        let lin = hermite_transform(&Activation::Linear, 0.0, 3).unwrap();
        assert_eq!(magnitude_fn(&lin, 0.0).unwrap(), 0.0);
        assert!((magnitude_fn(&lin, 1.7).unwrap() - 1.7).abs() < 1e-14);
        assert!((magnitude_fn_inverse(&lin, 2.5).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(magnitude_fn_inverse(&lin, 0.0).unwrap(), 0.0);
        assert!(magnitude_fn(&lin, -1.0).is_err());
        let relu = hermite_transform(&Activation::Relu, 0.0, 80).unwrap();
        let y = magnitude_fn(&relu, 1.0).unwrap();
        assert!((y - relu_magnitude_closed(1.0)).abs() < 1e-10 * y);
        assert!((magnitude_fn_inverse(&relu, y).unwrap() - 1.0).abs() < 1e-10);
        let off = hermite_transform(&Activation::Relu, 0.5, 10).unwrap();
        assert!(magnitude_fn(&off, 1.0).is_err());
    }
}

