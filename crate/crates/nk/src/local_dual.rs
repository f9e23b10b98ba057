//! Local dual of a weight step: feature-map bounds, step admissibility, exact
//! evaluation of Δf, and the local Rademacher bound.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{NkError, Result};
use crate::global_dual::{collapse_edge, GlobalBoundLedger};
use crate::hermite::{
    abs_t, abs_t_inverse, abs_t_max_sq, estimate_profile, hermite_transform, roc_t_sq, Centers,
    ProfileOptions, RectifiedProfile,
};
use crate::netgraph::{forward, spectral_norm, EdgeRef, Parameters, Skeleton, INPUT};
use crate::par::{self, Exec};

/// Inflation applied to empirically measured ω̃.
pub const OMEGA_INFLATION: f64 = 1.05;

/// Bounds on a weight step ΔΘ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    /// μ_Δ^[j] ≥ ‖ΔW^[j]‖₂.
    pub mu_delta: Vec<f64>,
    /// β_Δ^[j] ≥ ‖Δb^[j]‖₂.
    pub beta_delta: Vec<f64>,
    /// ω̃ per edge, in [`Skeleton::edges`] order.
    pub omega: Vec<f64>,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmegaMode {
    Empirical,
    Ledger,
}

impl std::str::FromStr for OmegaMode {
    type Err = NkError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(OmegaMode::Empirical),
            "ledger" => Ok(OmegaMode::Ledger),
            _ => Err(NkError::Parse(format!("unknown omega mode {s:?}"))),
        }
    }
}

/// ω̃ per edge from inputs: the larger of max ‖x̌‖₂ and max |x̂_i^[ǰ]| (the
/// expansion centers), inflated by [`OMEGA_INFLATION`].
pub fn omega_empirical(sk: &Skeleton, theta: &Parameters, inputs: &[DVector<f64>]) -> Result<Vec<f64>> {
    let edges = sk.edges();
    let mut om = vec![0.0f64; edges.len()];
    for x in inputs {
        let tr = forward(sk, theta, x)?;
        for (w, e) in om.iter_mut().zip(&edges) {
            let c = tr.check_of(*e).norm();
            let h = tr.hat_of(e.from).amax();
            *w = w.max(c).max(h);
        }
    }
    Ok(om.into_iter().map(|w| w * OMEGA_INFLATION).collect())
}

/// ω̃ = φ̌ ψ̃̌ per edge from a global ledger.
pub fn omega_from_ledger(sk: &Skeleton, ledger: &GlobalBoundLedger) -> Vec<f64> {
    sk.edges()
        .into_iter()
        .map(|e| {
            let b = ledger.edge(e);
            (b.phi_check_sq * b.psi_tilde_check_sq).sqrt()
        })
        .collect()
}

impl StepSpec {
    /// Bounds measured from an actual step: spectral norms, bias norms and empirical ω̃.
    pub fn measured(sk: &Skeleton, theta: &Parameters, delta: &Parameters, inputs: &[DVector<f64>], eta: f64) -> Result<Self> {
        delta.check(sk)?;
        Ok(StepSpec {
            mu_delta: delta.w.iter().map(spectral_norm).collect::<Result<_>>()?,
            beta_delta: delta.b.iter().map(|b| b.norm()).collect(),
            omega: omega_empirical(sk, theta, inputs)?,
            eta,
        })
    }

    /// The same bounds scaled by t ≥ 0 (ω̃ and η unchanged).
    pub fn scaled(&self, t: f64) -> Self {
        StepSpec {
            mu_delta: self.mu_delta.iter().map(|m| m * t).collect(),
            beta_delta: self.beta_delta.iter().map(|b| b * t).collect(),
            ..self.clone()
        }
    }

    pub fn zero(sk: &Skeleton, omega: Vec<f64>, eta: f64) -> Self {
        StepSpec {
            mu_delta: vec![0.0; sk.d()],
            beta_delta: vec![0.0; sk.d()],
            omega,
            eta,
        }
    }

    pub fn validate(&self, sk: &Skeleton) -> Result<()> {
        if self.mu_delta.len() != sk.d() || self.beta_delta.len() != sk.d() {
            return Err(NkError::Shape("step spec length differs from node count".into()));
        }
        let ne = sk.edges().len();
        if self.omega.len() != ne {
            return Err(NkError::Shape(format!("{} omega values for {ne} edges", self.omega.len())));
        }
        let all = self.mu_delta.iter().chain(&self.beta_delta).chain(&self.omega);
        if all.clone().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(NkError::Domain("step bounds must be finite and nonnegative".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(NkError::Domain(format!("eta {} not in (0, 1)", self.eta)));
        }
        Ok(())
    }

    /// Edges violating ω̃ ≤ φ̌ ψ̃̌ against a global ledger.
    pub fn omega_violations(&self, sk: &Skeleton, ledger: &GlobalBoundLedger) -> Vec<EdgeRef> {
        let cap = omega_from_ledger(sk, ledger);
        sk.edges()
            .into_iter()
            .zip(self.omega.iter().zip(cap))
            .filter(|(_, (w, c))| **w > c * (1.0 + 1e-12))
            .map(|(e, _)| e)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEdgeBounds {
    pub edge: EdgeRef,
    pub omega: f64,
    /// ρ²_(ω̃)η.
    pub radius_sq: f64,
    /// φ̌_Δ² = T²_(ω̃)η.
    pub phi_check_delta_sq: f64,
    /// (γ²+1)/ρ² · ψ̂_Δ^[ǰ]², the absT argument.
    pub abst_arg: f64,
    pub psi_check_delta_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalNodeBounds {
    pub node: isize,
    pub phi_hat_delta_sq: f64,
    pub psi_hat_delta_sq: f64,
    /// u^[j]² of the admissibility recursion (+∞ at the input).
    pub u_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalBoundLedger {
    pub eta: f64,
    pub edges: Vec<LocalEdgeBounds>,
    /// Nodes −1..D−1; entry 0 is the zero base case.
    pub nodes: Vec<LocalNodeBounds>,
    pub phi_hat_delta: f64,
    pub psi_hat_delta: f64,
}

impl LocalBoundLedger {
    pub fn node(&self, id: isize) -> &LocalNodeBounds {
        &self.nodes[(id + 1) as usize]
    }
}

fn profiles(sk: &Skeleton, step: &StepSpec, opts: &ProfileOptions) -> Result<Vec<RectifiedProfile>> {
    sk.edges()
        .iter()
        .zip(&step.omega)
        .map(|(e, &w)| {
            estimate_profile(sk.activation(*e), step.eta, Centers::Envelope { omega: w }, opts)
                .map_err(|x| NkError::Edge { edge: e.to_string(), msg: x.to_string() })
        })
        .collect()
}

fn check_mu(sk: &Skeleton, mu: &[f64]) -> Result<()> {
    if mu.len() != sk.d() {
        return Err(NkError::Shape("weight bound spec length differs from node count".into()));
    }
    Ok(())
}

/// Local ledger with default profile options.
pub fn compute_local_ledger(sk: &Skeleton, mu: &[f64], step: &StepSpec) -> Result<LocalBoundLedger> {
    compute_local_ledger_with(sk, mu, step, &ProfileOptions::default())
}

pub fn compute_local_ledger_with(sk: &Skeleton, mu: &[f64], step: &StepSpec, opts: &ProfileOptions) -> Result<LocalBoundLedger> {
    check_mu(sk, mu)?;
    step.validate(sk)?;
    let prof = profiles(sk, step, opts)?;
    let u = u_recursion(sk, mu, &prof, step.eta)?;
    build_ledger(sk, mu, step, &prof, &u)
}

fn build_ledger(sk: &Skeleton, mu: &[f64], step: &StepSpec, prof: &[RectifiedProfile], u: &[f64]) -> Result<LocalBoundLedger> {
    let g2 = sk.gamma * sk.gamma;
    let mut nodes = vec![LocalNodeBounds {
        node: INPUT,
        phi_hat_delta_sq: 0.0,
        psi_hat_delta_sq: 0.0,
        u_sq: f64::INFINITY,
    }];
    let mut edges = Vec::new();
    let mut idx = 0;
    for j in 0..sk.d() {
        let mut om = 0.0f64;
        let mut psi_c = 0.0f64;
        for e in sk.in_edges(j) {
            let p = &prof[idx];
            let w = step.omega[idx];
            idx += 1;
            let src = nodes[(e.from + 1) as usize].psi_hat_delta_sq;
            let arg = if src == 0.0 || p.radius_sq.is_infinite() {
                0.0
            } else {
                (g2 + 1.0) / p.radius_sq * src
            };
            let psi = abs_t(step.eta, arg).map_err(|_| NkError::Edge {
                edge: e.to_string(),
                msg: format!("absT argument {arg} >= rocT^2 = {}", roc_t_sq(step.eta)),
            })?;
            om = om.max(w);
            psi_c = psi_c.max(psi);
            edges.push(LocalEdgeBounds {
                edge: e,
                omega: w,
                radius_sq: p.radius_sq,
                phi_check_delta_sq: p.bound_sq,
                abst_arg: arg,
                psi_check_delta_sq: psi,
            });
        }
        let pc = sk.in_degree(j) as f64;
        let psi_hat = step.beta_delta[j].powi(2)
            + 3.0 * pc * (step.mu_delta[j].powi(2) * om * om + 2.0 * mu[j] * mu[j] * psi_c);
        nodes.push(LocalNodeBounds {
            node: j as isize,
            phi_hat_delta_sq: g2 + 1.0,
            psi_hat_delta_sq: psi_hat,
            u_sq: u[j],
        });
    }
    let last = nodes.last().unwrap().clone();
    Ok(LocalBoundLedger {
        eta: step.eta,
        edges,
        nodes,
        phi_hat_delta: last.phi_hat_delta_sq.sqrt(),
        psi_hat_delta: last.psi_hat_delta_sq.sqrt(),
    })
}

/// u^[j]² by reverse-topological recursion from u^[D−1]² = absTmax².
fn u_recursion(sk: &Skeleton, mu: &[f64], prof: &[RectifiedProfile], eta: f64) -> Result<Vec<f64>> {
    let d = sk.d();
    let g2 = sk.gamma * sk.gamma;
    let tmax = abs_t_max_sq(eta)?;
    let edges = sk.edges();
    let mut u = vec![f64::INFINITY; d];
    u[d - 1] = tmax;
    for j in (0..d - 1).rev() {
        let mut best = f64::INFINITY;
        for (i, e) in edges.iter().enumerate() {
            if e.from != j as isize {
                continue;
            }
            let k = e.to;
            let y = u[k] / (12.0 * sk.in_degree(k) as f64 * mu[k] * mu[k]);
            let inner = if y.is_nan() || y >= tmax {
                roc_t_sq(eta)
            } else {
                abs_t_inverse(eta, y)?.min(roc_t_sq(eta))
            };
            best = best.min(prof[i].radius_sq / (g2 + 1.0) * inner);
        }
        u[j] = best;
    }
    Ok(u)
}

/// Per-node result of the admissibility check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub admissible: bool,
    pub u: Vec<f64>,
    /// β_Δ² + 3p̌ ω̃² μ_Δ².
    pub lhs: Vec<f64>,
    /// u²/2.
    pub rhs: Vec<f64>,
    /// rhs − lhs; negative where the step bound fails.
    pub margin: Vec<f64>,
}

pub fn check_step_bound(sk: &Skeleton, mu: &[f64], step: &StepSpec) -> Result<StepCheck> {
    check_step_bound_with(sk, mu, step, &ProfileOptions::default())
}

/// The step bound μ_Δ² + β_Δ²/(3p̌ω̃²) ≤ u²/(6p̌ω̃²), evaluated in the
/// multiplied-out form β_Δ² + 3p̌ω̃²μ_Δ² ≤ u²/2 so that ω̃ = 0 is allowed.
pub fn check_step_bound_with(sk: &Skeleton, mu: &[f64], step: &StepSpec, opts: &ProfileOptions) -> Result<StepCheck> {
    check_mu(sk, mu)?;
    step.validate(sk)?;
    let prof = profiles(sk, step, opts)?;
    let u_sq = u_recursion(sk, mu, &prof, step.eta)?;
    Ok(step_check_from(sk, step, &u_sq))
}

fn node_omega(sk: &Skeleton, step: &StepSpec) -> Vec<f64> {
    let mut om = vec![0.0f64; sk.d()];
    for (e, w) in sk.edges().iter().zip(&step.omega) {
        om[e.to] = om[e.to].max(*w);
    }
    om
}

fn step_check_from(sk: &Skeleton, step: &StepSpec, u_sq: &[f64]) -> StepCheck {
    let om = node_omega(sk, step);
    let mut lhs = Vec::new();
    let mut rhs = Vec::new();
    for j in 0..sk.d() {
        let pc = sk.in_degree(j) as f64;
        lhs.push(step.beta_delta[j].powi(2) + 3.0 * pc * om[j] * om[j] * step.mu_delta[j].powi(2));
        rhs.push(u_sq[j] / 2.0);
    }
    let margin: Vec<f64> = rhs.iter().zip(&lhs).map(|(r, l)| r - l).collect();
    StepCheck {
        admissible: margin.iter().all(|m| *m >= 0.0),
        u: u_sq.iter().map(|v| v.sqrt()).collect(),
        lhs,
        rhs,
        margin,
    }
}

/// Δx̂^[j] for every node, by the node and edge cases of the local collapse:
/// Δx̂ = γΔb + Σ(ΔWᵀx̌ + WᵀΔx̌ + ΔWᵀΔx̌), and per coordinate
/// Δx̌_i = Σ_k a_{(x̂_i)k} (He_k(Δx̂_i) − Hen_k).
pub fn local_dual_trace(sk: &Skeleton, theta: &Parameters, delta: &Parameters, x: &DVector<f64>, k: usize) -> Result<Vec<DVector<f64>>> {
    delta.check(sk)?;
    let tr = forward(sk, theta, x)?;
    let zero_in = DVector::zeros(sk.n);
    let mut dh: Vec<DVector<f64>> = Vec::with_capacity(sk.d());
    for j in 0..sk.d() {
        let mut out = &delta.b[j] * sk.gamma;
        for e in sk.in_edges(j) {
            let act = sk.activation(e);
            let center = tr.hat_of(e.from);
            let dsrc = if e.from == INPUT { &zero_in } else { &dh[e.from as usize] };
            let order = match act.degree() {
                Some(dg) => k.min(dg).max(1),
                None => k,
            };
            let mut dcheck = DVector::zeros(center.len());
            for i in 0..center.len() {
                if dsrc[i] == 0.0 {
                    continue;
                }
                let exp = hermite_transform(act, center[i], order)?;
                dcheck[i] = collapse_edge(&exp, dsrc[i]).map_err(|m| NkError::Edge {
                    edge: e.to_string(),
                    msg: m.to_string(),
                })?;
            }
            let off = sk.block_offset(j, e.slot);
            let h = center.len();
            let xc = tr.check_of(e);
            let w = theta.w[j].rows(off, h);
            let dw = delta.w[j].rows(off, h);
            out += dw.transpose() * xc + w.transpose() * &dcheck + dw.transpose() * &dcheck;
        }
        dh.push(out);
    }
    Ok(dh)
}

/// Δf(x; ΔΘ) = f(x; Θ+ΔΘ) − f(x; Θ) through the local dual.
pub fn local_dual_eval(sk: &Skeleton, theta: &Parameters, delta: &Parameters, x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    Ok(local_dual_trace(sk, theta, delta, x, k)?.pop().unwrap())
}

pub fn local_dual_eval_batch(
    exec: Exec,
    sk: &Skeleton,
    theta: &Parameters,
    delta: &Parameters,
    xs: &[DVector<f64>],
    k: usize,
) -> Result<Vec<DVector<f64>>> {
    par::map(exec, xs, |x| local_dual_eval(sk, theta, delta, x, k)).into_iter().collect()
}

/// φ̂_Δ ψ̂_Δ / √N.
pub fn rademacher_local(ledger: &LocalBoundLedger, n: usize) -> f64 {
    ledger.phi_hat_delta * ledger.psi_hat_delta / (n.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::Activation;
    use crate::netgraph::{build_feedforward_relu, NodeSpec};
    use nalgebra::{dmatrix, dvector};

    fn chain(acts: Vec<Activation>, widths: &[usize], gamma: f64) -> Skeleton {
        let nodes = acts
            .into_iter()
            .zip(widths)
            .enumerate()
            .map(|(j, (a, &h))| NodeSpec {
                fanout: h,
                antecedents: vec![j as isize - 1],
                activations: vec![a],
                identity_skip: None,
            })
            .collect();
        Skeleton::new(1, gamma, nodes).unwrap()
    }

    #[test]
    fn zero_step_zero_ledger() {
        let sk = build_feedforward_relu(2, &[3, 1]).unwrap();
        let st = StepSpec::zero(&sk, vec![0.5, 0.5], 0.5);
        let l = compute_local_ledger(&sk, &[1.0, 1.0], &st).unwrap();
        for n in &l.nodes {
            assert_eq!(n.psi_hat_delta_sq, 0.0);
        }
        assert_eq!(rademacher_local(&l, 10), 0.0);
        let c = check_step_bound(&sk, &[1.0, 1.0], &st).unwrap();
        assert!(c.admissible);
        assert!(c.margin.iter().all(|m| *m > 0.0));
    }

    #[test]
    fn linear_chain_hand_recursion() {
        let sk = chain(vec![Activation::Linear, Activation::Linear], &[1, 1], 0.0);
        let eta: f64 = 0.5;
        let st = StepSpec {
            mu_delta: vec![0.01, 0.02],
            beta_delta: vec![0.0, 0.0],
            omega: vec![0.6, 0.4],
            eta,
        };
        let l = compute_local_ledger(&sk, &[0.8, 0.9], &st).unwrap();
        // Linear edges: ρ² is the finite-series default 1, T² = ρ²/η².
        let p0 = 3.0 * 0.01f64.powi(2) * 0.36;
        let e2 = eta * eta;
        let abst = |z: f64| z / (1.0 - z) * (e2 / (1.0 - e2) - z * e2 / (1.0 - z * e2));
        let p1 = 3.0 * (0.02f64.powi(2) * 0.16 + 2.0 * 0.81 * abst(p0));
        assert!((l.node(0).psi_hat_delta_sq - p0).abs() < 1e-15);
        assert!((l.node(1).psi_hat_delta_sq - p1).abs() < 1e-14);
        assert!((l.edges[0].phi_check_delta_sq - 4.0).abs() < 1e-12);
        assert!((rademacher_local(&l, 4) - p1.sqrt() / 2.0).abs() < 1e-14);
    }

    #[test]
    fn linear_delta_is_exact() {
        let sk = chain(vec![Activation::Linear, Activation::Linear], &[2, 1], 0.5);
        let th = Parameters {
            w: vec![dmatrix![0.3, -0.4], dmatrix![1.1; 0.7]],
            b: vec![dvector![0.1, 0.0], dvector![-0.2]],
        };
        let dl = Parameters {
            w: vec![dmatrix![0.01, 0.02], dmatrix![-0.03; 0.01]],
            b: vec![dvector![0.0, 0.01], dvector![0.02]],
        };
        let x = dvector![0.7];
        let want = forward(&sk, &th.add(&dl), &x).unwrap().output() - forward(&sk, &th, &x).unwrap().output();
        let got = local_dual_eval(&sk, &th, &dl, &x, 1).unwrap();
        assert!((want - got).norm() < 1e-14);
        let z = local_dual_eval(&sk, &th, &dl.scale(0.0), &x, 1).unwrap();
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn u_recursion_monotone_in_mu() {
        let sk = chain(vec![Activation::Relu, Activation::Relu, Activation::Linear], &[2, 2, 1], 0.0);
        let st = StepSpec::zero(&sk, vec![0.3, 0.5, 0.5], 0.5);
        let a = check_step_bound(&sk, &[1.0, 1.0, 1.0], &st).unwrap();
        let b = check_step_bound(&sk, &[1.0, 2.0, 1.0], &st).unwrap();
        assert!(b.u[0] <= a.u[0] && b.u[1] == a.u[1]);
    }
}
