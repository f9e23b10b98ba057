//! Global dual: norm-bound recursion, dual evaluation by scalar collapse, and
//! the global Rademacher bounds.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{NkError, Result};
use crate::hermite::{
    he_normalized_values, hermite_transform, magnitude_fn, magnitude_fn_inverse, Activation,
    HermiteExpansion,
};
use crate::netgraph::{EdgeRef, Parameters, Skeleton, WeightBoundSpec, INPUT};
use crate::numerics::golden_max;
use crate::par::{self, Exec};

/// Options for [`compute_global_ledger_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalOptions {
    /// Truncation order of the magnitude-function expansions.
    pub k: usize,
    /// Grid size per axis for the ψ̃̌ sup.
    pub grid: usize,
    pub refine_iters: usize,
}

impl Default for GlobalOptions {
    fn default() -> Self {
        GlobalOptions {
            k: 80,
            grid: 41,
            refine_iters: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEdgeBounds {
    pub edge: EdgeRef,
    pub phi_check_sq: f64,
    pub phi_check_down_sq: f64,
    pub psi_check_sq: f64,
    pub psi_tilde_check_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalNodeBounds {
    pub node: isize,
    pub phi_hat_down_sq: f64,
    pub phi_hat_sq: f64,
    pub psi_hat_sq: f64,
    pub psi_tilde_hat_sq: f64,
    /// Bound on ‖υ_τ^[j]‖₂, the bias offset from τ(0).
    pub upsilon_norm: f64,
}

/// Per-edge and per-node scalars of the global recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBoundLedger {
    pub edges: Vec<GlobalEdgeBounds>,
    /// Nodes −1..D−1; entry 0 is the input base case.
    pub nodes: Vec<GlobalNodeBounds>,
    pub phi_hat_down: f64,
    pub phi_hat: f64,
    pub psi_hat: f64,
    pub psi_tilde_hat: f64,
}

impl GlobalBoundLedger {
    pub fn node(&self, id: isize) -> &GlobalNodeBounds {
        &self.nodes[(id + 1) as usize]
    }

    pub fn edge(&self, e: EdgeRef) -> &GlobalEdgeBounds {
        self.edges.iter().find(|b| b.edge == e).expect("edge in ledger")
    }
}

fn base_node() -> GlobalNodeBounds {
    GlobalNodeBounds {
        node: INPUT,
        phi_hat_down_sq: 0.0,
        phi_hat_sq: 1.0,
        psi_hat_sq: 1.0,
        psi_tilde_hat_sq: 1.0,
        upsilon_norm: 0.0,
    }
}

fn expansion_order(act: &Activation, k: usize) -> usize {
    act.degree().map_or(k, |d| d.max(1))
}

/// Global ledger with default options; `phi_choices` are φ̌² per edge in
/// [`Skeleton::edges`] order (default 1).
pub fn compute_global_ledger(sk: &Skeleton, spec: &WeightBoundSpec, phi_choices: Option<&[f64]>) -> Result<GlobalBoundLedger> {
    compute_global_ledger_with(sk, spec, phi_choices, &GlobalOptions::default())
}

pub fn compute_global_ledger_with(
    sk: &Skeleton,
    spec: &WeightBoundSpec,
    phi_choices: Option<&[f64]>,
    opts: &GlobalOptions,
) -> Result<GlobalBoundLedger> {
    let d = sk.d();
    if spec.mu.len() != d || spec.beta.len() != d {
        return Err(NkError::Shape("weight bound spec length differs from node count".into()));
    }
    let all_edges = sk.edges();
    if let Some(c) = phi_choices {
        if c.len() != all_edges.len() {
            return Err(NkError::Shape(format!(
                "{} phi choices for {} edges",
                c.len(),
                all_edges.len()
            )));
        }
    }
    let g2 = sk.gamma * sk.gamma;
    let mut nodes = vec![base_node()];
    let mut edges = Vec::with_capacity(all_edges.len());
    let mut idx = 0;
    for j in 0..d {
        let mut max_phi = 0.0f64;
        let mut max_psi = 0.0f64;
        let mut max_psi_t = 0.0f64;
        let mut down_sum = 0.0;
        let mut tau0_sq = 0.0;
        for e in sk.in_edges(j) {
            let phi_sq = phi_choices.map_or(1.0, |c| c[idx]);
            idx += 1;
            let ename = e.to_string();
            let err = |m: String| NkError::Edge { edge: ename.clone(), msg: m };
            if !(phi_sq > 0.0) {
                return Err(err(format!("phi choice {phi_sq} must be positive")));
            }
            let act = sk.activation(e);
            let t0 = act.eval(0.0);
            tau0_sq += sk.width(e.from) as f64 * t0 * t0;
            let exp = hermite_transform(act, 0.0, expansion_order(act, opts.k))?;
            let sbar = |z: f64| magnitude_fn(&exp, z).map_err(|x| err(x.to_string()));
            let a = magnitude_fn_inverse(&exp, phi_sq).map_err(|x| err(x.to_string()))?;
            let src = &nodes[(e.from + 1) as usize];
            let phi_down_sq = sbar(a / (g2 + 1.0) * src.phi_hat_down_sq)?;
            let psi_sq = sbar((g2 + 1.0) / a * src.psi_hat_sq)?;
            let denom = sbar(a * src.phi_hat_sq / (g2 + 1.0))?;
            let psi_t_sq = tilde_sup(
                act,
                src.phi_hat_down_sq.sqrt(),
                src.phi_hat_sq.sqrt(),
                src.psi_tilde_hat_sq.sqrt(),
                opts,
            ) / denom;
            if !psi_t_sq.is_finite() {
                return Err(err("operator-norm bound is not finite".into()));
            }
            max_phi = max_phi.max(phi_sq);
            max_psi = max_psi.max(psi_sq);
            max_psi_t = max_psi_t.max(psi_t_sq);
            down_sum += phi_down_sq / phi_sq;
            edges.push(GlobalEdgeBounds {
                edge: e,
                phi_check_sq: phi_sq,
                phi_check_down_sq: phi_down_sq,
                psi_check_sq: psi_sq,
                psi_tilde_check_sq: psi_t_sq,
            });
        }
        let p = sk.in_degree(j) as f64;
        let mu = spec.mu[j];
        let upsilon = if tau0_sq == 0.0 {
            0.0
        } else if sk.gamma == 0.0 {
            return Err(NkError::Domain(format!(
                "node {j}: tau(0) != 0 with gamma = 0 leaves the bias offset undefined"
            )));
        } else {
            mu * tau0_sq.sqrt() / sk.gamma
        };
        let offset = (spec.beta[j] + upsilon).powi(2);
        nodes.push(GlobalNodeBounds {
            node: j as isize,
            phi_hat_down_sq: g2 + down_sum / p,
            phi_hat_sq: g2 + 1.0,
            psi_hat_sq: offset + p * mu * mu * max_phi * max_psi,
            psi_tilde_hat_sq: offset + p * mu * mu * max_phi * max_psi_t,
            upsilon_norm: upsilon,
        });
    }
    let last = nodes.last().unwrap().clone();
    Ok(GlobalBoundLedger {
        edges,
        nodes,
        phi_hat_down: last.phi_hat_down_sq.sqrt(),
        phi_hat: last.phi_hat_sq.sqrt(),
        psi_hat: last.psi_hat_sq.sqrt(),
        psi_tilde_hat: last.psi_tilde_hat_sq.sqrt(),
    })
}

/// sup τ(φψ)² over φ ∈ [lo, hi], ψ ∈ [−r, r]: grid then one golden pass per axis.
fn tilde_sup(act: &Activation, lo: f64, hi: f64, r: f64, opts: &GlobalOptions) -> f64 {
    let f = |p: f64, s: f64| act.eval(p * s).powi(2);
    let n = opts.grid.max(2);
    let at = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / (n - 1) as f64;
    let mut best = (lo, -r, f(lo, -r));
    for i in 0..n {
        for k in 0..n {
            let (p, s) = (at(lo, hi, i), at(-r, r, k));
            let v = f(p, s);
            if v > best.2 {
                best = (p, s, v);
            }
        }
    }
    let dp = (hi - lo) / (n - 1) as f64;
    let ds = 2.0 * r / (n - 1) as f64;
    let (p0, s0) = (best.0, best.1);
    if dp > 0.0 {
        let (p, v) = golden_max(&|p| f(p, s0), (p0 - dp).max(lo), (p0 + dp).min(hi), opts.refine_iters);
        if v > best.2 {
            best = (p, s0, v);
        }
    }
    if ds > 0.0 {
        let p1 = best.0;
        let (s, v) = golden_max(&|s| f(p1, s), (s0 - ds).max(-r), (s0 + ds).min(r), opts.refine_iters);
        if v > best.2 {
            best = (p1, s, v);
        }
    }
    best.2
}

/// Evaluates f(x; Θ) through the dual: each edge contributes
/// τ(0) + Σ_{k≤K} a_k Σ_{l=1}^k C(k,l) Hen_{k−l} v^l = τ(0) + Σ_k a_k (He_k(v) − Hen_k)
/// where v is the node's bilinear value, and nodes contribute γb + Σ Wᵀ(·).
pub fn dual_eval(sk: &Skeleton, theta: &Parameters, x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    if x.len() != sk.n {
        return Err(NkError::Shape(format!("input has length {}, expected {}", x.len(), sk.n)));
    }
    theta.check(sk)?;
    let expansions: Vec<Vec<HermiteExpansion>> = (0..sk.d())
        .map(|j| {
            sk.nodes[j]
                .activations
                .iter()
                .map(|a| hermite_transform(a, 0.0, match a.degree() { Some(d) => k.min(d).max(1), None => k }))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut vals: Vec<DVector<f64>> = Vec::with_capacity(sk.d());
    for j in 0..sk.d() {
        let mut out = &theta.b[j] * sk.gamma;
        for e in sk.in_edges(j) {
            let src = if e.from == INPUT { x } else { &vals[e.from as usize] };
            let act = sk.activation(e);
            let exp = &expansions[j][e.slot];
            let t0 = act.eval(0.0);
            let mut ev = DVector::zeros(src.len());
            for (i, &v) in src.iter().enumerate() {
                ev[i] = t0 + collapse_edge(exp, v).map_err(|m| NkError::Edge {
                    edge: e.to_string(),
                    msg: m.to_string(),
                })?;
            }
            let off = sk.block_offset(j, e.slot);
            out += theta.w[j].rows(off, src.len()).transpose() * ev;
        }
        vals.push(out);
    }
    Ok(vals.pop().unwrap())
}

/// [`dual_eval`] over a batch of inputs.
pub fn dual_eval_batch(exec: Exec, sk: &Skeleton, theta: &Parameters, xs: &[DVector<f64>], k: usize) -> Result<Vec<DVector<f64>>> {
    par::map(exec, xs, |x| dual_eval(sk, theta, x, k)).into_iter().collect()
}

/// Σ_{k≥1} a_k (He_k(v) − Hen_k), with a growth check on the tail of the partial sums.
pub(crate) fn collapse_edge(exp: &HermiteExpansion, v: f64) -> Result<f64> {
    let kk = exp.order;
    let hv = he_normalized_values(kk, v);
    let h0 = he_normalized_values(kk, 0.0);
    let terms: Vec<f64> = (1..=kk).map(|k| exp.normalized[k] * (hv[k] - h0[k])).collect();
    let sum: f64 = terms.iter().sum();
    if !sum.is_finite() {
        return Err(NkError::Divergence(format!("non-finite partial sum at v = {v}")));
    }
    if !exp.exact && terms.len() >= 8 {
        let q = terms.len() / 4;
        let last = terms[terms.len() - q..].iter().fold(0.0f64, |m, t| m.max(t.abs()));
        let prev = terms[terms.len() - 2 * q..terms.len() - q]
            .iter()
            .fold(0.0f64, |m, t| m.max(t.abs()));
        if last > prev && last > 1e-3 * (1.0 + sum.abs()) {
            return Err(NkError::Divergence(format!(
                "partial sums not Cauchy at v = {v}: tail term {last:e} grows past {prev:e}"
            )));
        }
    }
    Ok(sum)
}

/// φ̂ ψ̃̂ / √N.
pub fn rademacher_global(ledger: &GlobalBoundLedger, n: usize) -> f64 {
    ledger.phi_hat * ledger.psi_tilde_hat / (n.max(1) as f64).sqrt()
}

/// max over input→output paths S of Π_{j∈S} L² p̌^[j] μ^[j], by dynamic programming.
pub fn rademacher_lipschitz(sk: &Skeleton, l: f64, spec: &WeightBoundSpec) -> Result<f64> {
    if spec.beta.iter().any(|&b| b != 0.0) {
        return Err(NkError::Domain("Lipschitz bound requires an unbiased network".into()));
    }
    if spec.mu.len() != sk.d() {
        return Err(NkError::Shape("weight bound spec length differs from node count".into()));
    }
    let mut best = vec![0.0f64; sk.d() + 1];
    best[0] = 1.0;
    for j in 0..sk.d() {
        let factor = l * l * sk.in_degree(j) as f64 * spec.mu[j];
        let m = sk.nodes[j]
            .antecedents
            .iter()
            .map(|&a| best[(a + 1) as usize])
            .fold(0.0f64, f64::max);
        best[j + 1] = factor * m;
    }
    Ok(best[sk.d()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_feedforward_relu, build_resnet, forward, NodeSpec};
    use nalgebra::{dmatrix, dvector};

    fn single_linear() -> Skeleton {
        Skeleton::new(
            1,
            0.0,
            vec![NodeSpec {
                fanout: 1,
                antecedents: vec![-1],
                activations: vec![Activation::Linear],
                identity_skip: None,
            }],
        )
        .unwrap()
    }

    #[test]
    fn single_linear_edge_ledger() {
        let sk = single_linear();
        let l = compute_global_ledger(&sk, &WeightBoundSpec::uniform(1, 1.0, 0.0), None).unwrap();
        assert_eq!(l.node(-1).phi_hat_sq, 1.0);
        assert_eq!(l.node(-1).psi_tilde_hat_sq, 1.0);
        assert!((l.node(0).psi_hat_sq - 1.0).abs() < 1e-12);
        assert_eq!(l.node(0).phi_hat_sq, 1.0);
        assert!((rademacher_global(&l, 1) - l.phi_hat * l.psi_tilde_hat).abs() < 1e-15);
        assert!((rademacher_global(&l, 100) - 0.1).abs() < 1e-10);
    }

    #[test]
    fn lipschitz_paths() {
        let sk = build_feedforward_relu(2, &[2, 2, 1]).unwrap();
        assert!((rademacher_lipschitz(&sk, 1.0, &WeightBoundSpec::uniform(3, 1.0, 0.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!((rademacher_lipschitz(&sk, 1.0, &WeightBoundSpec::uniform(3, 2.0, 0.0)).unwrap() - 8.0).abs() < 1e-15);
        assert!(rademacher_lipschitz(&sk, 1.0, &WeightBoundSpec::uniform(3, 2.0, 0.1)).is_err());
        let rn = build_resnet(2, &[2, 2, 2, 2]).unwrap();
        let spec = WeightBoundSpec {
            mu: vec![1.5, 0.7, 2.0, 0.9],
            ..WeightBoundSpec::uniform(4, 1.0, 0.0)
        };
        let brute = rn
            .paths()
            .iter()
            .map(|p| p.iter().map(|&j| 4.0 * rn.in_degree(j) as f64 * spec.mu[j]).product::<f64>())
            .fold(0.0f64, f64::max);
        let dp = rademacher_lipschitz(&rn, 2.0, &spec).unwrap();
        assert!((dp - brute).abs() < 1e-12 * brute);
    }

    #[test]
    fn dual_matches_forward_on_linear_and_square() {
        let sk = build_feedforward_relu(2, &[3, 1]).unwrap();
        let th = Parameters {
            w: vec![dmatrix![0.3, -0.5, 1.1; 0.2, 0.4, -0.7], dmatrix![0.5; -1.2; 0.8]],
            b: vec![DVector::zeros(3), DVector::zeros(1)],
        };
        let x = dvector![0.6, -0.3];
        let f = forward(&sk, &th, &x).unwrap();
        let g = dual_eval(&sk, &th, &x, 1).unwrap();
        assert!((f.output() - &g).norm() < 1e-12);

        let sq = Activation::polynomial(vec![0.0, 0.0, 1.0]);
        let mut sk2 = sk.clone();
        sk2.nodes[1].activations[0] = sq;
        let f = forward(&sk2, &th, &x).unwrap();
        let g = dual_eval(&sk2, &th, &x, 2).unwrap();
        assert!((f.output() - &g).norm() < 1e-10);
    }

    #[test]
    fn dual_relu_within_tail() {
        let node = |h, a: isize, act| NodeSpec {
            fanout: h,
            antecedents: vec![a],
            activations: vec![act],
            identity_skip: None,
        };
        let sk = Skeleton::new(1, 0.0, vec![node(2, -1, Activation::Linear), node(1, 0, Activation::Relu)]).unwrap();
        let th = Parameters {
            w: vec![dmatrix![0.3, -0.2], dmatrix![1.0; 1.0]],
            b: vec![DVector::zeros(2), DVector::zeros(1)],
        };
        let x = dvector![0.5];
        let f = forward(&sk, &th, &x).unwrap().output()[0];
        let g = dual_eval(&sk, &th, &x, 60).unwrap()[0];
        // Pointwise error per edge ≤ 1.0865 (e^{v²/4} + 1) Σ_{k>K} |c_k| (Cramér's
        // inequality for both He_k(v) and Hen_k), with the ReLU coefficients
        // c_k = φ(0) |h_{k−2}(0)| / √(k(k−1)) for even k.
        let mut l1 = 0.0;
        let mut h = 1.0f64; // |h_{k−2}(0)| for even k
        let big = 2_000_000usize;
        for k in (2..=big).step_by(2) {
            if k > 2 {
                h *= (((k - 3) as f64) / ((k - 2) as f64)).sqrt();
            }
            if k > 60 {
                l1 += crate::hermite::special::INV_SQRT_2PI * h / ((k * (k - 1)) as f64).sqrt();
            }
        }
        // c_k ~ C k^{−5/4}: the remaining even-k tail is about 2 k c_k.
        l1 += 2.0 * big as f64 * crate::hermite::special::INV_SQRT_2PI * h / big as f64;
        let pre = [0.15f64, -0.1];
        let tol: f64 = pre.iter().map(|v| 1.0865 * ((v * v / 4.0).exp() + 1.0) * l1).sum();
        assert!((f - g).abs() <= tol, "{f} vs {g}, tol {tol}");
    }
}
