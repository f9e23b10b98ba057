//! Gaussian initialization, weight-norm bounds and spectral norms.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::skeleton::Skeleton;
use crate::error::{NkError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Lecun,
    He,
    Glorot,
    Measured,
}

impl std::str::FromStr for Scheme {
    type Err = NkError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lecun" => Ok(Scheme::Lecun),
            "he" => Ok(Scheme::He),
            "glorot" => Ok(Scheme::Glorot),
            "measured" => Ok(Scheme::Measured),
            _ => Err(NkError::Parse(format!("unknown scheme {s:?}"))),
        }
    }
}

/// Per-node bounds ‖W^[j]‖₂ ≤ μ^[j], ‖b^[j]‖₂ ≤ β^[j].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBoundSpec {
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
    pub scheme: Scheme,
    /// Width-independent Glorot cap on μ², when the scheme is glorot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glorot_cap_sq: Option<f64>,
}

impl WeightBoundSpec {
    /// Same μ and β on every node.
    pub fn uniform(d: usize, mu: f64, beta: f64) -> Self {
        WeightBoundSpec {
            mu: vec![mu; d],
            beta: vec![beta; d],
            epsilon: 0.05,
            scheme: Scheme::Measured,
            glorot_cap_sq: None,
        }
    }
}

/// σ^[j]² of the scheme.
pub fn init_variance(sk: &Skeleton, scheme: Scheme, j: usize) -> Result<f64> {
    let h = sk.width(j as isize) as f64;
    let hc = sk.fan_in(j) as f64;
    match scheme {
        Scheme::Lecun => Ok(1.0 / h),
        Scheme::He => Ok(1.0 / hc),
        Scheme::Glorot => Ok(1.0 / (h + hc)),
        Scheme::Measured => Err(NkError::Domain("measured is not an initialization scheme".into())),
    }
}

/// Gaussian initialization; identity skip blocks are set to I, biases to 0.
pub fn initialize(sk: &Skeleton, scheme: Scheme, seed: u64) -> Result<Parameters> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::zeros(sk);
    for j in 0..sk.d() {
        let sigma = init_variance(sk, scheme, j)?.sqrt();
        let (r, c) = p.w[j].shape();
        p.w[j] = DMatrix::from_fn(r, c, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
    }
    p.set_identities(sk);
    Ok(p)
}

/// Width-independent Glorot cap 1 + ((5/3)(ε/D)^{1/2} + (D/ε)^{1/2} ln 2) √2 e^{−2ε/3D}.
pub fn glorot_cap_sq(d: usize, eps: f64) -> f64 {
    let d = d as f64;
    1.0 + ((5.0 / 3.0) * (eps / d).sqrt() + (d / eps).sqrt() * std::f64::consts::LN_2)
        * std::f64::consts::SQRT_2
        * (-2.0 * eps / (3.0 * d)).exp()
}

/// μ^[j]² of the displayed χ² tail formulas.
pub fn scheme_mu_sq(sk: &Skeleton, scheme: Scheme, eps: f64, j: usize) -> Result<f64> {
    let d = sk.d() as f64;
    let h = sk.width(j as isize) as f64;
    let hc = sk.fan_in(j) as f64;
    let logs = (d * h / (2.0 * eps)).ln() + (d * h / eps).ln();
    match scheme {
        Scheme::Lecun => Ok(hc / h + 2.0 * hc.sqrt() / h * logs),
        Scheme::He => Ok(1.0 + 2.0 / hc.sqrt() * logs),
        Scheme::Glorot => Ok(hc / (h + hc) + 2.0 * hc.sqrt() / (h + hc) * logs),
        Scheme::Measured => Err(NkError::Domain("measured bounds need parameters".into())),
    }
}

/// Weight bounds for a scheme, or measured from `theta` when scheme = measured.
///
/// For identity-skip nodes under a random scheme the formula bounds the
/// trainable part only, so 1 is added for the identity block.
pub fn norm_bounds(sk: &Skeleton, scheme: Scheme, eps: f64, theta: Option<&Parameters>) -> Result<WeightBoundSpec> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(NkError::Domain(format!("confidence {eps} not in (0, 1)")));
    }
    let d = sk.d();
    let (mu, beta) = if scheme == Scheme::Measured {
        let th = theta.ok_or_else(|| NkError::Domain("measured bounds need parameters".into()))?;
        th.check(sk)?;
        let mu = th.w.iter().map(spectral_norm).collect::<Result<Vec<_>>>()?;
        let beta = th.b.iter().map(|b| b.norm()).collect();
        (mu, beta)
    } else {
        let mut mu = Vec::with_capacity(d);
        for j in 0..d {
            let mut m2 = scheme_mu_sq(sk, scheme, eps, j)?;
            if sk.nodes[j].identity_skip.is_some() {
                m2 += 1.0;
            }
            mu.push(m2.sqrt());
        }
        (mu, vec![0.0; d])
    };
    Ok(WeightBoundSpec {
        mu,
        beta,
        epsilon: eps,
        scheme,
        glorot_cap_sq: (scheme == Scheme::Glorot).then(|| glorot_cap_sq(d, eps)),
    })
}

/// Largest singular value, power iteration on MᵀM (relative tolerance 1e−10, cap 10⁴).
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    spectral_norm_with(m, 1e-10, 10_000)
}

pub fn spectral_norm_with(m: &DMatrix<f64>, tol: f64, cap: usize) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(NkError::NonFinite("matrix entries".into()));
    }
    let c = m.ncols();
    if c == 0 || m.nrows() == 0 {
        return Ok(0.0);
    }
    // Fixed pseudo-random start so the iterate is reproducible.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = DVector::from_fn(c, |_, _| rng.random::<f64>() + 0.5);
    v /= v.norm();
    let mut lambda = 0.0;
    for it in 0..cap {
        let mv = m * &v;
        let w = m.transpose() * &mv;
        let rq = mv.norm_squared();
        let nw = w.norm();
        if nw == 0.0 {
            return Ok(0.0);
        }
        v = w / nw;
        if it > 0 && (rq - lambda).abs() <= tol * rq {
            // Both are lower bounds on σ²; take the larger.
            return Ok(rq.max(nw).sqrt());
        }
        lambda = rq;
    }
    Err(NkError::PowerIteration {
        iterations: cap,
        estimate: lambda.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_feedforward_relu, build_resnet};
    use nalgebra::dmatrix;

    #[test]
    fn spectral_examples() {
        assert!((spectral_norm(&DMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-12);
        assert!((spectral_norm(&dmatrix![0.0, 2.0; 0.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!((spectral_norm(&dmatrix![3.0, 0.0; 0.0, 1.0]).unwrap() - 3.0).abs() < 1e-9);
        assert_eq!(spectral_norm(&DMatrix::zeros(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn he_bound_tends_to_one() {
        let mut prev = f64::INFINITY;
        for w in [10usize, 100, 1000, 100_000] {
            let sk = build_feedforward_relu(w, &[w, 1]).unwrap();
            let m2 = scheme_mu_sq(&sk, Scheme::He, 0.05, 0).unwrap();
            assert!(m2 < prev && m2 > 1.0);
            prev = m2;
        }
        assert!(prev < 1.2);
    }

    #[test]
    fn measured_bounds_hold() {
        let sk = build_feedforward_relu(3, &[4, 2]).unwrap();
        let mut th = initialize(&sk, Scheme::Glorot, 7).unwrap();
        th.b[0][1] = 0.3;
        let s = norm_bounds(&sk, Scheme::Measured, 0.05, Some(&th)).unwrap();
        for j in 0..2 {
            assert!(spectral_norm(&th.w[j]).unwrap() <= s.mu[j]);
            assert!(th.b[j].norm() <= s.beta[j]);
        }
        let g = norm_bounds(&sk, Scheme::Glorot, 0.05, None).unwrap();
        assert!(g.glorot_cap_sq.unwrap().is_finite());
    }

    #[test]
    fn glorot_cap_dominates_sampled_norms() {
        // Reduced from width 512 / 10^4 draws to keep the unit suite fast.
        let sk = build_feedforward_relu(128, &[128, 128, 128, 1]).unwrap();
        let cap = glorot_cap_sq(sk.d(), 0.05);
        let mut sq: Vec<f64> = (0..200)
            .map(|s| {
                let th = initialize(&sk, Scheme::Glorot, s).unwrap();
                spectral_norm(&th.w[1]).unwrap().powi(2)
            })
            .collect();
        sq.sort_by(|a, b| a.total_cmp(b));
        let p95 = sq[(0.95 * sq.len() as f64) as usize];
        assert!(cap.is_finite() && cap >= p95, "cap {cap} vs p95 {p95}");
    }

    #[test]
    fn identity_blocks_survive_initialize() {
        let sk = build_resnet(3, &[3, 3]).unwrap();
        let th = initialize(&sk, Scheme::He, 3).unwrap();
        let blk = th.block(&sk, 1, 1);
        assert_eq!(blk, DMatrix::identity(3, 3));
    }
}
