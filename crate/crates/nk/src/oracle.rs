//! Brute-force reference computations: forward differences of the network,
//! central finite differences, a trapezoid Hermite-coefficient rule, Jacobi
//! eigenvalues and Monte-Carlo Rademacher estimates.
//!
//! Nothing here goes through the Hermite expansions, the dual recursions or
//! the kernel code it is used to check.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NkError, Result};
use crate::hermite::Activation;
use crate::netgraph::{forward, Parameters, Skeleton, WeightBoundSpec};
use crate::par::{self, Exec};

/// One oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub quantity: String,
    pub oracle: f64,
    pub artifact: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    /// Whether `tolerance` applies to the relative error.
    pub relative: bool,
    pub pass: bool,
    pub runtime_s: f64,
}

impl OracleReport {
    pub fn new(quantity: impl Into<String>, oracle: f64, artifact: f64, tolerance: f64, relative: bool, runtime_s: f64) -> Self {
        let abs_error = (oracle - artifact).abs();
        let rel_error = if oracle == 0.0 { abs_error } else { abs_error / oracle.abs() };
        let err = if relative { rel_error } else { abs_error };
        OracleReport {
            quantity: quantity.into(),
            oracle,
            artifact,
            abs_error,
            rel_error,
            tolerance,
            relative,
            pass: err <= tolerance,
            runtime_s,
        }
    }

    /// Times `f`, which returns (oracle, artifact).
    pub fn timed(quantity: impl Into<String>, tolerance: f64, relative: bool, f: impl FnOnce() -> Result<(f64, f64)>) -> Result<Self> {
        let t = Instant::now();
        let (o, a) = f()?;
        Ok(Self::new(quantity, o, a, tolerance, relative, t.elapsed().as_secs_f64()))
    }
}

pub fn reports_to_json(reports: &[OracleReport]) -> Result<String> {
    serde_json::to_string_pretty(reports).map_err(|e| NkError::Parse(e.to_string()))
}

pub fn reports_to_csv(reports: &[OracleReport]) -> String {
    let mut s = String::from("quantity,oracle,artifact,abs_error,rel_error,tolerance,relative,pass,runtime_s\n");
    for r in reports {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{},{},{:.6}\n",
            r.quantity.replace(',', ";"),
            r.oracle,
            r.artifact,
            r.abs_error,
            r.rel_error,
            r.tolerance,
            r.relative,
            r.pass,
            r.runtime_s
        ));
    }
    s
}

/// f(x; Θ+ΔΘ) − f(x; Θ).
pub fn brute_delta_f(sk: &Skeleton, theta: &Parameters, delta: &Parameters, x: &DVector<f64>) -> Result<DVector<f64>> {
    let a = forward(sk, &theta.add(delta), x)?;
    let b = forward(sk, theta, x)?;
    Ok(a.output() - b.output())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NkError::NonFinite(what.to_string()))
    }
}

/// Central differences (f(p + h e_i) − f(p − h e_i)) / 2h.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut p = point.to_vec();
    let mut g = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let x0 = p[i];
        p[i] = x0 + step;
        let hi = finite(f(&p), "finite difference evaluation")?;
        p[i] = x0 - step;
        let lo = finite(f(&p), "finite difference evaluation")?;
        p[i] = x0;
        g.push((hi - lo) / (2.0 * step));
    }
    Ok(g)
}

pub const FD_STEP: f64 = 1e-5;

/// Trainable coordinates of Θ: every weight entry outside identity blocks,
/// then every bias entry, in node order.
fn trainable(sk: &Skeleton) -> Vec<(usize, Option<(usize, usize)>, usize)> {
    let mut out = Vec::new();
    for j in 0..sk.d() {
        let h = sk.width(j as isize);
        let skip = sk.nodes[j].identity_skip.map(|s| (sk.block_offset(j, s), h));
        for r in 0..sk.fan_in(j) {
            if skip.is_some_and(|(off, len)| r >= off && r < off + len) {
                continue;
            }
            for c in 0..h {
                out.push((j, Some((r, c)), 0));
            }
        }
        for c in 0..h {
            out.push((j, None, c));
        }
    }
    out
}

fn perturbed(theta: &Parameters, at: &(usize, Option<(usize, usize)>, usize), v: f64) -> Parameters {
    let mut t = theta.clone();
    match at {
        (j, Some(rc), _) => t.w[*j][*rc] += v,
        (j, None, c) => t.b[*j][*c] += v,
    }
    t
}

/// ∂f_out(x)/∂θ over trainable coordinates; biases included only when γ ≠ 0.
pub fn param_gradient(sk: &Skeleton, theta: &Parameters, x: &DVector<f64>, out: usize) -> Result<Vec<f64>> {
    let coords: Vec<_> = trainable(sk)
        .into_iter()
        .filter(|c| c.1.is_some() || sk.gamma != 0.0)
        .collect();
    let mut g = Vec::with_capacity(coords.len());
    for c in &coords {
        let hi = forward(sk, &perturbed(theta, c, FD_STEP), x)?.output()[out];
        let lo = forward(sk, &perturbed(theta, c, -FD_STEP), x)?.output()[out];
        g.push(finite((hi - lo) / (2.0 * FD_STEP), "network gradient")?);
    }
    Ok(g)
}

/// Σ_θ ∂f_a(x)/∂θ ∂f_b(x')/∂θ by finite differences.
pub fn ntk_fd(sk: &Skeleton, theta: &Parameters, x: &DVector<f64>, xp: &DVector<f64>, a: usize, b: usize) -> Result<f64> {
    let g = param_gradient(sk, theta, x, a)?;
    let gp = param_gradient(sk, theta, xp, b)?;
    Ok(g.iter().zip(&gp).map(|(u, v)| u * v).sum())
}

fn squared_loss(sk: &Skeleton, theta: &Parameters, inputs: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<f64> {
    let mut s = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        s += 0.5 * (forward(sk, theta, x)?.output() - y).norm_squared();
    }
    Ok(s)
}

/// ∇_Θ ½ Σ_l ‖f(x_l) − y_l‖² by central differences, shaped as Parameters.
/// Identity blocks get 0.
pub fn loss_gradient_fd(sk: &Skeleton, theta: &Parameters, inputs: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<Parameters> {
    let mut g = Parameters::zeros(sk);
    for c in trainable(sk) {
        let hi = squared_loss(sk, &perturbed(theta, &c, FD_STEP), inputs, targets)?;
        let lo = squared_loss(sk, &perturbed(theta, &c, -FD_STEP), inputs, targets)?;
        let d = finite((hi - lo) / (2.0 * FD_STEP), "loss gradient")?;
        match c {
            (j, Some(rc), _) => g.w[j][rc] = d,
            (j, None, col) => g.b[j][col] = d,
        }
    }
    Ok(g)
}

/// He_k(z) by the explicit sum k! Σ_p (−1)^p z^{k−2p} / (p! (k−2p)! 2^p).
fn he_explicit(k: usize, z: f64) -> f64 {
    let mut s = 0.0;
    let mut p = 0;
    while 2 * p <= k {
        let mut c = 1.0;
        // k! / (p! (k−2p)! 2^p) as a running product.
        for i in (k - 2 * p + 1)..=k {
            c *= i as f64;
        }
        for i in 1..=p {
            c /= 2.0 * i as f64;
        }
        let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
        s += sign * c * z.powi((k - 2 * p) as i32);
        p += 1;
    }
    s
}

/// Romberg-extrapolated trapezoid rule on [a, b]. Convergence is judged
/// against the trapezoid estimate of ∫|f| so that cancelling integrands
/// with a zero result still terminate.
fn romberg(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    const LEVELS: usize = 18;
    let mut r = vec![vec![0.0; LEVELS]; LEVELS];
    let mut h = b - a;
    let (fa, fb) = (f(a), f(b));
    r[0][0] = 0.5 * h * (fa + fb);
    let mut mag = 0.5 * h * (fa.abs() + fb.abs());
    for i in 1..LEVELS {
        h *= 0.5;
        let n = 1usize << (i - 1);
        let (mut mid, mut amid) = (0.0, 0.0);
        for m in 0..n {
            let v = f(a + (2 * m + 1) as f64 * h);
            mid += v;
            amid += v.abs();
        }
        r[i][0] = 0.5 * r[i - 1][0] + h * mid;
        mag = 0.5 * mag + h * amid;
        let mut p4 = 1.0;
        for j in 1..=i {
            p4 *= 4.0;
            r[i][j] = r[i][j - 1] + (r[i][j - 1] - r[i - 1][j - 1]) / (p4 - 1.0);
        }
        if i >= 5 && (r[i][i] - r[i - 1][i - 1]).abs() <= tol * (1.0 + mag) {
            return Ok(r[i][i]);
        }
    }
    Err(NkError::Quadrature {
        k: 0,
        coarse: r[LEVELS - 2][LEVELS - 2],
        fine: r[LEVELS - 1][LEVELS - 1],
    })
}

/// a_k = E[τ(ζ + ξ) He_k(ζ)] / k! by the trapezoid rule on a truncated domain,
/// split at the ReLU kink.
pub fn quadrature_coeff(act: &Activation, xi: f64, k: usize) -> Result<f64> {
    let lim = 14.0 + xi.abs();
    let kf: f64 = (1..=k).map(|i| i as f64).product();
    let g = |z: f64| act.eval(z + xi) * he_explicit(k, z) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut breaks = vec![-lim];
    if matches!(act, Activation::Relu) && -xi > -lim && -xi < lim {
        breaks.push(-xi);
    }
    breaks.push(lim);
    let mut s = 0.0;
    for w in breaks.windows(2) {
        s += romberg(&g, w[0], w[1], 1e-14).map_err(|e| match e {
            NkError::Quadrature { coarse, fine, .. } => NkError::Quadrature { k, coarse, fine },
            e => e,
        })?;
    }
    finite(s / kf, "quadrature coefficient")
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn dense_eig(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(NkError::Shape(format!("{}x{} matrix is not square", n, m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(NkError::NonFinite("matrix entries".into()));
    }
    let mut a = (m + m.transpose()) * 0.5;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off <= 1e-30 * (1.0 + a.norm_squared()) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    Ok(ev)
}

/// Monte-Carlo settings. Each trial draws its own signs from a stream seeded
/// by (seed, trial).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RademacherOptions {
    pub trials: usize,
    pub draws: usize,
    pub seed: u64,
}

impl Default for RademacherOptions {
    fn default() -> Self {
        RademacherOptions { trials: 1000, draws: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
    pub draws: usize,
    pub seed: u64,
}

/// E_ε max_s (1/N) Σ_i ε_i f_s(x_i) over sampled functions f_s.
/// `values[s][i]` = f_s(x_i). The sampled max lower-bounds the class sup.
pub fn empirical_rademacher(values: &[Vec<f64>], opts: RademacherOptions, exec: Exec) -> Result<RademacherEstimate> {
    if opts.trials < 100 {
        return Err(NkError::Domain(format!("need at least 100 trials, got {}", opts.trials)));
    }
    let n = values.first().map_or(0, |v| v.len());
    if n == 0 || values.iter().any(|v| v.len() != n) {
        return Err(NkError::Shape("function values need a common, nonzero length".into()));
    }
    let sup = par::map_range(exec, opts.trials, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let eps: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        values
            .iter()
            .map(|f| f.iter().zip(&eps).map(|(a, b)| a * b).sum::<f64>() / n as f64)
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let t = sup.len() as f64;
    let mean = sup.iter().sum::<f64>() / t;
    let var = sup.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (t - 1.0);
    Ok(RademacherEstimate {
        mean,
        stderr: (var / t).sqrt(),
        trials: opts.trials,
        draws: values.len(),
        seed: opts.seed,
    })
}

fn sigma_max(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn unit_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let nv = v.norm();
    if nv == 0.0 {
        v
    } else {
        v / nv
    }
}

/// Random Θ on the boundary of the weight bounds: ‖W^[j]‖₂ = μ^[j] (identity blocks
/// kept at I), ‖b^[j]‖₂ = β^[j].
pub fn sample_within(sk: &Skeleton, spec: &WeightBoundSpec, rng: &mut ChaCha8Rng) -> Result<Parameters> {
    let mut p = Parameters::with_identities(sk);
    for j in 0..sk.d() {
        let (r, c) = p.w[j].shape();
        let g = gaussian(r, c, rng);
        let mu = spec.mu[j];
        match sk.nodes[j].identity_skip {
            None => {
                let s = sigma_max(&g);
                p.w[j] = if s > 0.0 { g * (mu / s) } else { g };
            }
            Some(slot) => {
                if mu < 1.0 {
                    return Err(NkError::Domain(format!("node {j}: μ = {mu} is below the identity block norm")));
                }
                let off = sk.block_offset(j, slot);
                let h = sk.width(j as isize);
                let mut g = g;
                g.view_mut((off, 0), (h, h)).fill(0.0);
                let with = |s: f64| {
                    let mut w = &g * s;
                    w.view_mut((off, 0), (h, h)).fill_diagonal(1.0);
                    w
                };
                let (mut lo, mut hi) = (0.0, 1.0);
                while sigma_max(&with(hi)) < mu && hi < 1e12 {
                    hi *= 2.0;
                }
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if sigma_max(&with(mid)) < mu {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                p.w[j] = with(lo);
            }
        }
        p.b[j] = unit_vector(c, rng) * spec.beta[j];
    }
    Ok(p)
}

/// Samples `draws` networks with [`sample_within`] and returns output 0 at each input.
pub fn sample_network_values(sk: &Skeleton, spec: &WeightBoundSpec, inputs: &[DVector<f64>], draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(draws);
    for _ in 0..draws {
        let th = sample_within(sk, spec, &mut rng)?;
        out.push(
            inputs
                .iter()
                .map(|x| forward(sk, &th, x).map(|t| t.output()[0]))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(out)
}

/// Samples steps with ‖ΔW^[j]‖₂ = μ_Δ^[j] and ‖Δb^[j]‖₂ = β_Δ^[j] (identity
/// blocks untouched) and returns output 0 of Δf at each input.
pub fn sample_step_values(
    sk: &Skeleton,
    theta: &Parameters,
    mu_delta: &[f64],
    beta_delta: &[f64],
    inputs: &[DVector<f64>],
    draws: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = inputs
        .iter()
        .map(|x| forward(sk, theta, x).map(|t| t.output()[0]))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut delta = Parameters::zeros(sk);
        for j in 0..sk.d() {
            let (r, c) = delta.w[j].shape();
            let mut g = gaussian(r, c, &mut rng);
            if let Some(slot) = sk.nodes[j].identity_skip {
                let off = sk.block_offset(j, slot);
                let h = sk.width(j as isize);
                g.view_mut((off, 0), (h, h)).fill(0.0);
            }
            let s = sigma_max(&g);
            delta.w[j] = if s > 0.0 { g * (mu_delta[j] / s) } else { g };
            delta.b[j] = unit_vector(c, &mut rng) * beta_delta[j];
        }
        let stepped = theta.add(&delta);
        let mut row = Vec::with_capacity(inputs.len());
        for (x, b) in inputs.iter().zip(&base) {
            row.push(forward(sk, &stepped, x)?.output()[0] - b);
        }
        out.push(row);
    }
    Ok(out)
}
