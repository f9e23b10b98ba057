//! Activation catalog.
//!
//! String ids: `relu`, `linear`, `tanh`, `poly:[c0,c1,...]`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{NkError, Result};

/// Smooth activations with derivative evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothFn {
    Tanh,
}

/// An edge activation τ.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Relu,
    Linear,
    /// Power-basis coefficients c0 + c1 ζ + c2 ζ² + ...
    Polynomial(Vec<f64>),
    Smooth(SmoothFn),
}

/// Highest derivative order exposed for smooth activations.
pub const SMOOTH_N_MAX: usize = 12;

impl Activation {
    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        let mut c = coeffs;
        while c.len() > 1 && *c.last().unwrap() == 0.0 {
            c.pop();
        }
        if c.is_empty() {
            c.push(0.0);
        }
        Activation::Polynomial(c)
    }

    /// Parses a catalog id.
    pub fn parse(id: &str) -> Result<Self> {
        let s = id.trim();
        match s {
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            "tanh" => Ok(Activation::Smooth(SmoothFn::Tanh)),
            _ => {
                if let Some(rest) = s.strip_prefix("poly:") {
                    let c: Vec<f64> = serde_json::from_str(rest)
                        .map_err(|e| NkError::Parse(format!("activation {s}: {e}")))?;
                    if c.is_empty() || c.iter().any(|v| !v.is_finite()) {
                        return Err(NkError::Parse(format!("activation {s}: bad coefficients")));
                    }
                    Ok(Activation::polynomial(c))
                } else {
                    Err(NkError::Parse(format!("unknown activation id {s:?}")))
                }
            }
        }
    }

    pub fn id(&self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::Linear => "linear".into(),
            Activation::Smooth(SmoothFn::Tanh) => "tanh".into(),
            Activation::Polynomial(c) => format!("poly:{}", serde_json::to_string(c).unwrap()),
        }
    }

    /// Polynomial degree, if τ is a polynomial.
    pub fn degree(&self) -> Option<usize> {
        match self {
            Activation::Linear => Some(1),
            Activation::Polynomial(c) => Some(c.len() - 1),
            _ => None,
        }
    }

    /// Highest derivative order available, `None` when unbounded.
    pub fn n_max(&self) -> Option<usize> {
        match self {
            Activation::Smooth(_) => Some(SMOOTH_N_MAX),
            _ => None,
        }
    }

    /// Power-basis coefficients for polynomial kinds.
    pub fn power_coeffs(&self) -> Option<Vec<f64>> {
        match self {
            Activation::Linear => Some(vec![0.0, 1.0]),
            Activation::Polynomial(c) => Some(c.clone()),
            _ => None,
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
            Activation::Polynomial(c) => horner(c, z),
            Activation::Smooth(SmoothFn::Tanh) => z.tanh(),
        }
    }

    /// n-th derivative τ^(n)(z). ReLU uses τ'(0) = 0 and τ^(n) = 0 for n ≥ 2.
    pub fn deriv(&self, n: usize, z: f64) -> Result<f64> {
        if n == 0 {
            return Ok(self.eval(z));
        }
        match self {
            Activation::Relu => Ok(if n == 1 && z > 0.0 { 1.0 } else { 0.0 }),
            Activation::Linear => Ok(if n == 1 { 1.0 } else { 0.0 }),
            Activation::Polynomial(c) => {
                if n >= c.len() {
                    return Ok(0.0);
                }
                let d = derivative_coeffs(c, n);
                Ok(horner(&d, z))
            }
            Activation::Smooth(SmoothFn::Tanh) => {
                if n > SMOOTH_N_MAX {
                    return Err(NkError::Unsupported(format!(
                        "derivative order {n} exceeds n_max {SMOOTH_N_MAX} for tanh"
                    )));
                }
                Ok(horner(&tanh_deriv_poly(n), z.tanh()))
            }
        }
    }

    /// τ^(n) vanishes identically.
    pub fn deriv_vanishes(&self, n: usize) -> bool {
        match self {
            Activation::Relu => n >= 2,
            _ => self.degree().is_some_and(|d| n > d),
        }
    }

    /// Numerical finite-energy check: E[τ(Z)²] under the Gaussian weight is finite.
    pub fn is_finite_energy(&self) -> bool {
        let q = super::quadrature::gauss_hermite(200);
        let e: f64 = q
            .nodes
            .iter()
            .zip(&q.weights)
            .map(|(&z, &w)| w * self.eval(z).powi(2))
            .sum();
        e.is_finite()
    }
}

impl Serialize for Activation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.id())
    }
}

impl<'de> Deserialize<'de> for Activation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Activation::parse(&s).map_err(serde::de::Error::custom)
    }
}

pub(crate) fn horner(c: &[f64], z: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * z + a)
}

/// Coefficients of the n-th derivative of a power-basis polynomial.
pub(crate) fn derivative_coeffs(c: &[f64], n: usize) -> Vec<f64> {
    if n >= c.len() {
        return vec![0.0];
    }
    (n..c.len())
        .map(|i| {
            let falling: f64 = ((i - n + 1)..=i).map(|t| t as f64).product();
            c[i] * falling
        })
        .collect()
}

/// Polynomial P_n with tanh^(n)(z) = P_n(tanh z), from P_{n+1} = P_n'(t)(1 − t²).
fn tanh_deriv_poly(n: usize) -> Vec<f64> {
    let mut p = vec![0.0, 1.0];
    for _ in 0..n {
        let dp = derivative_coeffs(&p, 1);
        let mut next = vec![0.0; dp.len() + 2];
        for (i, &a) in dp.iter().enumerate() {
            next[i] += a;
            next[i + 2] -= a;
        }
        p = next;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for id in ["relu", "linear", "tanh", "poly:[0.0,0.0,1.0]"] {
            let a = Activation::parse(id).unwrap();
            assert_eq!(Activation::parse(&a.id()).unwrap(), a);
        }
        assert!(Activation::parse("sigmoidish").is_err());
        assert_eq!(Activation::parse("poly:[1,2,0,0]").unwrap().degree(), Some(1));
    }

    #[test]
    fn relu_derivative_convention() {
        let r = Activation::Relu;
        assert_eq!(r.deriv(1, 0.0).unwrap(), 0.0);
        assert_eq!(r.deriv(1, 1e-300).unwrap(), 1.0);
        assert_eq!(r.deriv(2, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn polynomial_derivatives_vanish_past_degree() {
        let p = Activation::polynomial(vec![1.0, -2.0, 0.5, 3.0]);
        assert_eq!(p.deriv(4, 0.7).unwrap(), 0.0);
        assert!((p.deriv(3, 0.7).unwrap() - 18.0).abs() < 1e-14);
        assert!((p.deriv(1, 2.0).unwrap() - (-2.0 + 2.0 + 36.0)).abs() < 1e-12);
    }

    #[test]
    fn tanh_derivatives_match_finite_differences() {
        let t = Activation::Smooth(SmoothFn::Tanh);
        let z = 0.37;
        let h = 1e-5;
        for n in 1..4 {
            let fd = (t.deriv(n - 1, z + h).unwrap() - t.deriv(n - 1, z - h).unwrap()) / (2.0 * h);
            assert!((fd - t.deriv(n, z).unwrap()).abs() < 1e-7, "n={n}");
        }
        assert!(t.deriv(SMOOTH_N_MAX + 1, 0.0).is_err());
    }

    #[test]
    fn catalog_is_finite_energy() {
        for a in [Activation::Relu, Activation::Linear, Activation::Smooth(SmoothFn::Tanh)] {
            assert!(a.is_finite_energy());
        }
    }
}
