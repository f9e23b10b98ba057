//! Special functions and log-space combinatorics used by the Hermite code.

use once_cell::sync::Lazy;
use statrs::function::erf::erfc;
use statrs::function::factorial::{ln_binomial, ln_factorial};
use statrs::function::gamma::{gamma, gamma_ui};

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Imaginary error function by its Maclaurin series. All terms are positive,
/// so there is no cancellation.
pub fn erfi(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let x2 = x * x;
    let mut pow = x; // x^{2n+1} / n!
    let mut sum = 0.0;
    for n in 0..2000u32 {
        let term = pow / (2 * n + 1) as f64;
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() && n as f64 > x2 {
            break;
        }
        pow *= x2 / (n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

/// Upper incomplete gamma Γ(s, x).
pub fn upper_gamma(s: f64, x: f64) -> f64 {
    if x == 0.0 {
        gamma(s)
    } else {
        gamma_ui(s, x)
    }
}

/// ∫_b^∞ t^m e^{−t²} dt for integer m ≥ 0 and any real b.
pub fn gauss_moment_tail(m: u32, b: f64) -> f64 {
    let s = (m as f64 + 1.0) / 2.0;
    let half = 0.5 * upper_gamma(s, b * b);
    if b >= 0.0 || m % 2 == 1 {
        half
    } else {
        gamma(s) - half
    }
}

const TABLE: usize = 4096;

static LN_FACT: Lazy<Vec<f64>> = Lazy::new(|| (0..TABLE as u64).map(ln_factorial).collect());

/// ln k!.
pub fn ln_fact(k: usize) -> f64 {
    if k < TABLE {
        LN_FACT[k]
    } else {
        ln_factorial(k as u64)
    }
}

/// ln C(n, k).
pub fn ln_choose(n: usize, k: usize) -> f64 {
    if n < TABLE {
        LN_FACT[n] - LN_FACT[k] - LN_FACT[n - k]
    } else {
        ln_binomial(n as u64, k as u64)
    }
}

/// ln |Hen_m| for even m (odd Hermite numbers vanish).
pub fn ln_abs_hen(m: usize) -> f64 {
    debug_assert!(m % 2 == 0);
    ln_fact(m) - ln_fact(m / 2) - (m / 2) as f64 * std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erfi_known_values() {
        // erfi(1) = 1.6504257587975428
        assert!((erfi(1.0) - 1.650_425_758_797_542_8).abs() < 1e-14);
        assert!((erfi(-0.5) + 0.614_952_094_696_511).abs() < 1e-13);
    }

    #[test]
    fn gauss_tail_matches_cdf() {
        // ∫_b^∞ e^{−t²} = (√π/2) erfc(b)
        for &b in &[-1.3, -0.2, 0.0, 0.4, 2.0] {
            let want = 0.5 * std::f64::consts::PI.sqrt() * erfc(b);
            // statrs incomplete gamma is accurate to ~1e-11
            assert!((gauss_moment_tail(0, b) - want).abs() < 1e-10, "b={b}");
        }
        // ∫_b^∞ t e^{−t²} = e^{−b²}/2
        assert!((gauss_moment_tail(1, -0.7) - 0.5 * (-0.49f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn hermite_number_logs() {
        assert!((ln_abs_hen(6) - 15f64.ln()).abs() < 1e-12);
        assert!((ln_choose(10, 3) - 120f64.ln()).abs() < 1e-12);
    }
}
