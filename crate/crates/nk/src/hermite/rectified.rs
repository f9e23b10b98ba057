//! Rectified activation τ̂_η, its envelope, and radius/bound profiles.

use serde::{Deserialize, Serialize};

use super::activation::Activation;
use super::expansion::{hermite_transform, HermiteExpansion};
use super::special::{ln_abs_hen, ln_choose, ln_fact};
use crate::error::{NkError, Result};
use crate::numerics::grid_refine_max;

/// Options for profile estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Truncation order used for the coefficient sequence.
    pub k: usize,
    /// Grid size for envelope sups.
    pub grid: usize,
    /// Golden-section iterations after the grid pass.
    pub refine_iters: usize,
    /// Radius assigned to finite (polynomial) expansions, whose series converge everywhere.
    pub finite_radius_sq: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            k: 40,
            grid: 101,
            refine_iters: 40,
            finite_radius_sq: 1.0,
        }
    }
}

/// Centers of a profile: an explicit pair or an envelope half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Centers {
    Pair { xi: f64, xi2: f64 },
    Envelope { omega: f64 },
}

/// Estimated radius ρ² and bound T² of τ̂_η.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifiedProfile {
    pub eta: f64,
    pub centers: Centers,
    /// +∞ when every coefficient vanishes.
    pub radius_sq: f64,
    pub bound_sq: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(NkError::Domain(format!("eta {eta} not in (0, 1)")))
    }
}

/// Conservative radius ρ² from min_{k∈[K/2,K]} −(2k+1)^{−1/2} ln|a_k/η^k|.
pub fn radius_sq(exp: &HermiteExpansion, eta: f64, finite_radius_sq: f64) -> Result<f64> {
    check_eta(eta)?;
    if exp.is_trivial() {
        return Ok(f64::INFINITY);
    }
    if exp.exact {
        return Ok(finite_radius_sq);
    }
    let kk = exp.order;
    let lo = (kk / 2).max(1);
    let mut best = f64::INFINITY;
    for k in lo..=kk {
        if exp.normalized[k] == 0.0 {
            continue;
        }
        let v = -(exp.ln_abs_coeff(k) - k as f64 * eta.ln()) / ((2 * k + 1) as f64).sqrt();
        best = best.min(v);
    }
    if best == f64::INFINITY {
        // Only low-order terms survive: the truncated series is a polynomial.
        return Ok(finite_radius_sq);
    }
    if best <= 0.0 {
        return Err(NkError::Divergence(format!(
            "radius estimate {best} <= 0 at center {} (eta {eta})",
            exp.center
        )));
    }
    Ok(best * best)
}

fn pair_radius_sq(a: &HermiteExpansion, b: &HermiteExpansion, eta: f64, finite: f64) -> Result<f64> {
    Ok(radius_sq(a, eta, finite)?.min(radius_sq(b, eta, finite)?))
}

fn series(a: &HermiteExpansion, b: &HermiteExpansion, eta: f64, z: f64, absolute: bool) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let kmax = a.order.min(b.order);
    let lz = z.abs().ln();
    let neg = z < 0.0 && !absolute;
    let ln_eta = eta.ln();
    let mut total = 0.0;
    for k in 1..=kmax {
        let prod = a.normalized[k] * b.normalized[k];
        if prod == 0.0 {
            continue;
        }
        let sign = if absolute || prod > 0.0 { 1.0 } else { -1.0 };
        let base = prod.abs().ln() - ln_fact(k) - 2.0 * k as f64 * ln_eta;
        let mut inner = 0.0;
        let mut l = k;
        loop {
            // Hen_{k−l} vanishes for odd k − l.
            let m = k - l;
            let t = (base + 2.0 * ln_choose(k, l) + 2.0 * ln_abs_hen(m) + l as f64 * lz).exp();
            inner += if neg && l % 2 == 1 { -t } else { t };
            if l < 3 {
                break;
            }
            l -= 2;
        }
        total += sign * inner;
    }
    total
}

/// τ̂_η(ζ; ξ, ξ') truncated at the shorter expansion, without domain checks.
pub fn rectified_series(a: &HermiteExpansion, b: &HermiteExpansion, eta: f64, z: f64) -> f64 {
    series(a, b, eta, z, false)
}

/// τ̂_η(ζ; ξ, ξ') with the radius check |ζ| ≤ ρ².
pub fn rectified_activation(a: &HermiteExpansion, b: &HermiteExpansion, eta: f64, z: f64) -> Result<f64> {
    check_eta(eta)?;
    let r = pair_radius_sq(a, b, eta, ProfileOptions::default().finite_radius_sq)?;
    if z.abs() > r {
        return Err(NkError::Domain(format!(
            "rectified activation argument {z} outside estimated radius {r}"
        )));
    }
    Ok(rectified_series(a, b, eta, z))
}

fn order_for(act: &Activation, opts: &ProfileOptions) -> usize {
    match act.degree() {
        Some(d) => opts.k.max(d).max(1),
        None => opts.k.max(1),
    }
}

/// sup_{|ξ|≤ω} τ̂_η(ζ; ξ, ξ).
pub fn rectified_envelope(act: &Activation, eta: f64, omega: f64, z: f64, opts: &ProfileOptions) -> Result<f64> {
    check_eta(eta)?;
    if !(omega >= 0.0) {
        return Err(NkError::Domain(format!("envelope half-width {omega} < 0")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    envelope_sup(act, eta, omega, z, opts)
}

fn envelope_sup(act: &Activation, eta: f64, omega: f64, z: f64, opts: &ProfileOptions) -> Result<f64> {
    let k = order_for(act, opts);
    // Transform once up front so errors surface here rather than inside the search.
    hermite_transform(act, 0.0, k)?;
    let f = |xi: f64| match hermite_transform(act, xi, k) {
        Ok(e) => series(&e, &e, eta, z, false),
        Err(_) => f64::NEG_INFINITY,
    };
    let (_, v) = grid_refine_max(&f, -omega, omega, opts.grid, opts.refine_iters);
    if !v.is_finite() {
        return Err(NkError::NonFinite("envelope value".into()));
    }
    Ok(v)
}

/// Estimates (ρ², T²) for a pair of centers or an envelope.
pub fn estimate_profile(act: &Activation, eta: f64, centers: Centers, opts: &ProfileOptions) -> Result<RectifiedProfile> {
    check_eta(eta)?;
    let k = order_for(act, opts);
    let (radius, bound) = match centers {
        Centers::Pair { xi, xi2 } => {
            let a = hermite_transform(act, xi, k)?;
            let b = hermite_transform(act, xi2, k)?;
            let r = pair_radius_sq(&a, &b, eta, opts.finite_radius_sq)?;
            if r.is_infinite() {
                (r, 0.0)
            } else {
                (r, series(&a, &b, eta, r, true))
            }
        }
        Centers::Envelope { omega } => {
            if !(omega >= 0.0) {
                return Err(NkError::Domain(format!("envelope half-width {omega} < 0")));
            }
            let n = if omega == 0.0 { 1 } else { opts.grid.max(2) };
            let mut r = f64::INFINITY;
            for i in 0..n {
                let xi = if n == 1 {
                    0.0
                } else {
                    -omega + 2.0 * omega * i as f64 / (n - 1) as f64
                };
                let e = hermite_transform(act, xi, k)?;
                r = r.min(radius_sq(&e, eta, opts.finite_radius_sq)?);
            }
            if r.is_infinite() {
                (r, 0.0)
            } else if omega == 0.0 {
                let e = hermite_transform(act, 0.0, k)?;
                (r, series(&e, &e, eta, r, true))
            } else {
                (r, envelope_sup(act, eta, omega, r, opts)?)
            }
        }
    };
    Ok(RectifiedProfile {
        eta,
        centers,
        radius_sq: radius,
        bound_sq: bound,
    })
}
