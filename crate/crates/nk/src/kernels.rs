//! Finite-width NNGP, NTK and LiNK kernels from actual forward traces.
//!
//! Expectations E_i, E_ǰ are plain averages over the units of an edge and the
//! antecedents of a node.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{NkError, Result};
use crate::hermite::{hermite_transform, rectified_activation, Activation, ProfileOptions, RectifiedProfile};
use crate::local_dual::{compute_local_ledger_with, LocalBoundLedger, StepSpec};
use crate::netgraph::{forward, EdgeRef, ForwardTrace, Parameters, Skeleton, INPUT};
use crate::par::{self, Exec};

/// Everything the LiNK needs besides the inputs.
#[derive(Debug, Clone)]
pub struct KernelContext {
    pub sk: Skeleton,
    pub theta: Parameters,
    pub eta: f64,
    pub step: StepSpec,
    /// Hermite truncation order for τ̂.
    pub k: usize,
    /// Derivative-series order for [`link_deriv`].
    pub q: usize,
    /// Envelope profiles per edge, in [`Skeleton::edges`] order.
    pub profiles: Vec<RectifiedProfile>,
    /// ψ̌_Δ per edge (not squared).
    pub psi_check_delta: Vec<f64>,
    pub ledger: LocalBoundLedger,
}

impl KernelContext {
    pub fn new(sk: &Skeleton, theta: &Parameters, mu: &[f64], step: &StepSpec, k: usize, q: usize) -> Result<Self> {
        theta.check(sk)?;
        let opts = ProfileOptions {
            k: k.max(1),
            ..ProfileOptions::default()
        };
        let ledger = compute_local_ledger_with(sk, mu, step, &opts)?;
        let profiles = ledger
            .edges
            .iter()
            .map(|e| RectifiedProfile {
                eta: step.eta,
                centers: crate::hermite::Centers::Envelope { omega: e.omega },
                radius_sq: e.radius_sq,
                bound_sq: e.phi_check_delta_sq,
            })
            .collect();
        let psi_check_delta = ledger.edges.iter().map(|e| e.psi_check_delta_sq.sqrt()).collect();
        Ok(KernelContext {
            sk: sk.clone(),
            theta: theta.clone(),
            eta: step.eta,
            step: step.clone(),
            k: k.max(1),
            q,
            profiles,
            psi_check_delta,
            ledger,
        })
    }

    /// Context for the kernels that need only (skeleton, Θ): NNGP and NTK.
    pub fn plain(sk: &Skeleton, theta: &Parameters) -> Result<Self> {
        theta.check(sk)?;
        let ne = sk.edges().len();
        Ok(KernelContext {
            sk: sk.clone(),
            theta: theta.clone(),
            eta: 0.5,
            step: StepSpec::zero(sk, vec![0.0; ne], 0.5),
            k: 40,
            q: 1,
            profiles: Vec::new(),
            psi_check_delta: Vec::new(),
            ledger: LocalBoundLedger {
                eta: 0.5,
                edges: Vec::new(),
                nodes: Vec::new(),
                phi_hat_delta: 0.0,
                psi_hat_delta: 0.0,
            },
        })
    }

    fn traces(&self, x: &DVector<f64>, xp: &DVector<f64>) -> Result<(ForwardTrace, ForwardTrace)> {
        Ok((forward(&self.sk, &self.theta, x)?, forward(&self.sk, &self.theta, xp)?))
    }

    fn edge_index(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.sk.d()];
        for (i, e) in self.sk.edges().iter().enumerate() {
            idx[e.to].push(i);
        }
        idx
    }
}

/// Per-edge and per-node NNGP values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NngpValues {
    /// Σ^[ǰ,j] in [`Skeleton::edges`] order.
    pub edges: Vec<f64>,
    /// Σ^[j] for j = 0..D−1.
    pub nodes: Vec<f64>,
}

impl NngpValues {
    pub fn value(&self) -> f64 {
        *self.nodes.last().unwrap()
    }
}

fn mean_dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    if a.is_empty() {
        0.0
    } else {
        a.dot(b) / a.len() as f64
    }
}

fn nngp_from(sk: &Skeleton, tr: &ForwardTrace, trp: &ForwardTrace) -> NngpValues {
    let g2 = sk.gamma * sk.gamma;
    let mut edges = Vec::new();
    let mut nodes = Vec::new();
    for j in 0..sk.d() {
        let mut s = 0.0;
        let ins = sk.in_edges(j);
        for e in &ins {
            let v = g2 + mean_dot(tr.check_of(*e), trp.check_of(*e));
            edges.push(v);
            s += v;
        }
        nodes.push(s / ins.len() as f64);
    }
    NngpValues { edges, nodes }
}

/// Σ^[ǰ,j] = γ² + E_i[x̌_i x̌'_i], Σ^[j] = E_ǰ[Σ^[ǰ,j]].
pub fn nngp(ctx: &KernelContext, x: &DVector<f64>, xp: &DVector<f64>) -> Result<NngpValues> {
    let (tr, trp) = ctx.traces(x, xp)?;
    Ok(nngp_from(&ctx.sk, &tr, &trp))
}

fn theta_q(act: &Activation, q: usize, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    let f = crate::hermite::special::ln_fact(q).exp();
    let mut s = 0.0;
    for i in 0..a.len() {
        s += act.deriv(q, a[i])? / f * (act.deriv(q, b[i])? / f);
    }
    Ok(s / a.len() as f64)
}

/// Scalar NTK recursion K^[j] = Σ^[j] + E_ǰ[θ^[ǰ,j] K^[ǰ]], θ = E_i[τ'(x̂_i) τ'(x̂'_i)], K^[−1] = 0.
pub fn ntk(ctx: &KernelContext, x: &DVector<f64>, xp: &DVector<f64>) -> Result<f64> {
    let (tr, trp) = ctx.traces(x, xp)?;
    let sg = nngp_from(&ctx.sk, &tr, &trp);
    let mut k = vec![0.0f64; ctx.sk.d()];
    for j in 0..ctx.sk.d() {
        let ins = ctx.sk.in_edges(j);
        let mut s = 0.0;
        for e in &ins {
            if e.from == INPUT {
                continue;
            }
            let th = theta_q(ctx.sk.activation(*e), 1, tr.hat_of(e.from), trp.hat_of(e.from))?;
            s += th * k[e.from as usize];
        }
        k[j] = sg.nodes[j] + s / ins.len() as f64;
    }
    Ok(k[ctx.sk.d() - 1])
}

/// Empirical NTK Σ_k ∇_{Θ_k} f(x) ∇_{Θ_k} f(x')ᵀ over trainable parameters
/// (identity blocks excluded), by the exact cross-node recursion on
/// C^[a,b] = J^[a](x) J^[b](x')ᵀ with J^[j] = ∂x̂^[j]/∂Θ.
pub fn ntk_matrix(ctx: &KernelContext, x: &DVector<f64>, xp: &DVector<f64>) -> Result<DMatrix<f64>> {
    let sk = &ctx.sk;
    let th = &ctx.theta;
    let (tr, trp) = ctx.traces(x, xp)?;
    let d = sk.d();
    // D_e (per edge, for each side) as vectors of τ'(x̂^[from]).
    let dvec = |t: &ForwardTrace, e: EdgeRef| -> Result<DVector<f64>> {
        let act = sk.activation(e);
        let h = t.hat_of(e.from);
        let mut v = DVector::zeros(h.len());
        for i in 0..h.len() {
            v[i] = act.deriv(1, h[i])?;
        }
        Ok(v)
    };
    let mut c: Vec<Vec<Option<DMatrix<f64>>>> = vec![vec![None; d]; d];
    let get = |c: &Vec<Vec<Option<DMatrix<f64>>>>, a: isize, b: isize| -> Option<DMatrix<f64>> {
        if a == INPUT || b == INPUT {
            None
        } else {
            c[a as usize][b as usize].clone()
        }
    };
    for a in 0..d {
        for b in 0..d {
            let (ha, hb) = (sk.width(a as isize), sk.width(b as isize));
            let mut m = DMatrix::zeros(ha, hb);
            if a == b {
                let mut own = sk.gamma * sk.gamma;
                for e in sk.in_edges(a) {
                    if !sk.is_identity(e) {
                        own += tr.check_of(e).dot(trp.check_of(e));
                    }
                }
                m += DMatrix::identity(ha, ha) * own;
                for p in sk.in_edges(a) {
                    let dp = dvec(&tr, p)?;
                    let wp = block(sk, th, p);
                    for q in sk.in_edges(b) {
                        if let Some(cpq) = get(&c, p.from, q.from) {
                            let dq = dvec(&trp, q)?;
                            let wq = block(sk, th, q);
                            m += wp.transpose() * scale_cols(&scale_rows(&cpq, &dp), &dq) * wq;
                        }
                    }
                }
            } else if a < b {
                for q in sk.in_edges(b) {
                    if let Some(caq) = get(&c, a as isize, q.from) {
                        let dq = dvec(&trp, q)?;
                        let wq = block(sk, th, q);
                        m += scale_cols(&caq, &dq) * wq;
                    }
                }
            } else {
                for p in sk.in_edges(a) {
                    if let Some(cpb) = get(&c, p.from, b as isize) {
                        let dp = dvec(&tr, p)?;
                        let wp = block(sk, th, p);
                        m += wp.transpose() * scale_rows(&cpb, &dp);
                    }
                }
            }
            c[a][b] = Some(m);
        }
    }
    Ok(c[d - 1][d - 1].take().unwrap())
}

fn block(sk: &Skeleton, th: &Parameters, e: EdgeRef) -> DMatrix<f64> {
    th.block(sk, e.to, e.slot)
}

fn scale_rows(m: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut r) in out.row_iter_mut().enumerate() {
        r *= v[i];
    }
    out
}

fn scale_cols(m: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut c) in out.column_iter_mut().enumerate() {
        c *= v[j];
    }
    out
}

/// Which LiNK scale factors to apply. With every factor off and Q = 1 the
/// derivative series reproduces [`ntk`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkScaling {
    /// ρ²/(γ²+1) inside the series argument.
    pub radius: bool,
    /// 1/ω̃² on Σ^[ǰ,j].
    pub omega: bool,
    /// 1/ψ̌_Δ on the series term.
    pub psi: bool,
    /// The leading γ².
    pub gamma: bool,
}

impl LinkScaling {
    pub const FULL: LinkScaling = LinkScaling {
        radius: true,
        omega: true,
        psi: true,
        gamma: true,
    };
    pub const NONE: LinkScaling = LinkScaling {
        radius: false,
        omega: false,
        psi: false,
        gamma: false,
    };
}

enum Series {
    Rect,
    Deriv(usize),
}

fn link_impl(ctx: &KernelContext, x: &DVector<f64>, xp: &DVector<f64>, series: Series, sc: LinkScaling) -> Result<f64> {
    let sk = &ctx.sk;
    let need_ledger = sc.radius || sc.omega || sc.psi || matches!(series, Series::Rect);
    if need_ledger && ctx.profiles.len() != sk.edges().len() {
        return Err(NkError::Domain("LiNK needs a context built with a step spec".into()));
    }
    let (tr, trp) = ctx.traces(x, xp)?;
    let sg = nngp_from(sk, &tr, &trp);
    let g2 = sk.gamma * sk.gamma;
    let idx = ctx.edge_index();
    let mut kk = vec![0.0f64; sk.d()];
    for j in 0..sk.d() {
        let ins = sk.in_edges(j);
        let mut s = 0.0;
        for (e, &i) in ins.iter().zip(&idx[j]) {
            let ename = e.to_string();
            let sigma = sg.edges[i];
            let base = if sc.omega {
                let w = ctx.step.omega[i];
                if w == 0.0 {
                    if sigma != 0.0 {
                        return Err(NkError::Edge {
                            edge: ename,
                            msg: "omega = 0 with nonzero NNGP term".into(),
                        });
                    }
                    0.0
                } else {
                    sigma / (w * w)
                }
            } else {
                sigma
            };
            let kprev = if e.from == INPUT { 0.0 } else { kk[e.from as usize] };
            let arg = if sc.radius {
                ctx.profiles[i].radius_sq / (g2 + 1.0) * kprev
            } else {
                kprev
            };
            let act = sk.activation(*e);
            let c = tr.hat_of(e.from);
            let cp = trp.hat_of(e.from);
            let mut t = 0.0;
            if arg != 0.0 {
                match series {
                    Series::Rect => {
                        let r = ctx.profiles[i].radius_sq;
                        if arg.abs() > r {
                            return Err(NkError::Edge {
                                edge: ename,
                                msg: format!("LiNK argument {arg} outside radius {r}"),
                            });
                        }
                        let order = match act.degree() {
                            Some(dg) => ctx.k.max(dg).max(1),
                            None => ctx.k,
                        };
                        for u in 0..c.len() {
                            let a = hermite_transform(act, c[u], order)?;
                            let b = hermite_transform(act, cp[u], order)?;
                            t += rectified_activation(&a, &b, ctx.eta, arg).map_err(|m| NkError::Edge {
                                edge: e.to_string(),
                                msg: m.to_string(),
                            })?;
                        }
                        t /= c.len() as f64;
                    }
                    Series::Deriv(q) => {
                        if q >= 2 && matches!(act, Activation::Relu) {
                            return Err(NkError::Unsupported(
                                "derivative series beyond q = 1 is unavailable for relu".into(),
                            ));
                        }
                        let mut pow = 1.0;
                        for qq in 1..=q {
                            pow *= arg;
                            if act.deriv_vanishes(qq) {
                                break;
                            }
                            t += theta_q(act, qq, c, cp)? * pow;
                        }
                    }
                }
            }
            let term = if sc.psi {
                let p = ctx.psi_check_delta[i];
                if p == 0.0 {
                    if t != 0.0 {
                        return Err(NkError::Edge {
                            edge: e.to_string(),
                            msg: "psi_check_delta = 0 with a nonzero series term".into(),
                        });
                    }
                    0.0
                } else {
                    t / p
                }
            } else {
                t
            };
            s += base + term;
        }
        kk[j] = if sc.gamma { g2 } else { 0.0 } + s / ins.len() as f64;
    }
    Ok(kk[sk.d() - 1])
}

/// LiNK K̂^[j] = γ² + E_ǰ[Σ^[ǰ,j]/ω̃² + (1/ψ̌_Δ) E_i τ̂_η(ρ²/(γ²+1) K̂^[ǰ]; x̂_i, x̂'_i)].
pub fn link_rect(ctx: &KernelContext, x: &DVector<f64>, xp: &DVector<f64>) -> Result<f64> {
    link_impl(ctx, x, xp, Series::Rect, LinkScaling::FULL)
}

/// The η → 1 form: E_i τ̂ replaced by Σ_{q≤Q} θ_q (ρ²/(γ²+1) K̂)^q.
pub fn link_deriv(ctx: &KernelContext, x: &DVector<f64>, xp: &DVector<f64>, q: usize) -> Result<f64> {
    link_impl(ctx, x, xp, Series::Deriv(q), LinkScaling::FULL)
}

pub fn link_deriv_with(ctx: &KernelContext, x: &DVector<f64>, xp: &DVector<f64>, q: usize, scaling: LinkScaling) -> Result<f64> {
    link_impl(ctx, x, xp, Series::Deriv(q), scaling)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Nngp,
    Ntk,
    LinkRect,
    LinkDeriv,
}

impl std::str::FromStr for KernelKind {
    type Err = NkError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nngp" => Ok(KernelKind::Nngp),
            "ntk" => Ok(KernelKind::Ntk),
            "link-rect" | "link_rect" => Ok(KernelKind::LinkRect),
            "link-deriv" | "link_deriv" => Ok(KernelKind::LinkDeriv),
            _ => Err(NkError::Parse(format!("unknown kernel kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelKind::Nngp => "nngp",
            KernelKind::Ntk => "ntk",
            KernelKind::LinkRect => "link-rect",
            KernelKind::LinkDeriv => "link-deriv",
        })
    }
}

pub fn kernel_value(ctx: &KernelContext, kind: KernelKind, x: &DVector<f64>, xp: &DVector<f64>) -> Result<f64> {
    match kind {
        KernelKind::Nngp => Ok(nngp(ctx, x, xp)?.value()),
        KernelKind::Ntk => ntk(ctx, x, xp),
        KernelKind::LinkRect => link_rect(ctx, x, xp),
        KernelKind::LinkDeriv => link_deriv(ctx, x, xp, ctx.q.max(1)),
    }
}

/// PSD tolerance on the smallest eigenvalue, relative to the trace.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    pub kind: KernelKind,
    pub values: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub trace: f64,
    /// Set when the smallest eigenvalue is below −PSD_TOL·trace.
    pub warning: Option<String>,
}

impl GramMatrix {
    pub fn is_psd(&self) -> bool {
        self.warning.is_none()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in self.values.row_iter() {
            let row: Vec<String> = r.iter().map(|v| format!("{v:.17e}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Pairwise kernel matrix, parallel over the upper triangle.
pub fn gram(ctx: &KernelContext, kind: KernelKind, inputs: &[DVector<f64>], exec: Exec) -> Result<GramMatrix> {
    if inputs.is_empty() {
        return Err(NkError::Domain("gram needs at least one input".into()));
    }
    let n = inputs.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals = par::map(exec, &pairs, |&(i, j)| kernel_value(ctx, kind, &inputs[i], &inputs[j]));
    let mut m = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        let v = v?;
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    let trace = m.trace();
    let min_eigenvalue = SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let warning = (min_eigenvalue < -PSD_TOL * trace.abs()).then(|| {
        let w = format!("{kind} gram matrix has eigenvalue {min_eigenvalue:e} below -{PSD_TOL:e}*trace");
        log::warn!("{w}");
        w
    });
    Ok(GramMatrix {
        kind,
        values: m,
        min_eigenvalue,
        trace,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{build_feedforward_relu, initialize, NodeSpec, Scheme};
    use nalgebra::{dmatrix, dvector};

    fn linear_one(n: usize) -> (Skeleton, Parameters) {
        let sk = Skeleton::new(
            n,
            0.0,
            vec![NodeSpec {
                fanout: n,
                antecedents: vec![-1],
                activations: vec![Activation::Linear],
                identity_skip: None,
            }],
        )
        .unwrap();
        let mut th = Parameters::zeros(&sk);
        th.w[0] = DMatrix::identity(n, n);
        (sk, th)
    }

    #[test]
    fn nngp_single_linear_edge() {
        let (sk, th) = linear_one(3);
        let ctx = KernelContext::plain(&sk, &th).unwrap();
        let x = dvector![0.2, -0.4, 0.5];
        let s = nngp(&ctx, &x, &x).unwrap();
        assert!((s.value() - x.norm_squared() / 3.0).abs() < 1e-15);
        let mut sk2 = sk.clone();
        sk2.gamma = 0.5;
        let ctx2 = KernelContext::plain(&sk2, &th).unwrap();
        assert!((nngp(&ctx2, &x, &x).unwrap().value() - s.value() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ntk_linear_chain_hand() {
        let node = |h, a| NodeSpec {
            fanout: h,
            antecedents: vec![a],
            activations: vec![Activation::Linear],
            identity_skip: None,
        };
        let sk = Skeleton::new(2, 0.0, vec![node(2, -1), node(1, 0)]).unwrap();
        let th = Parameters {
            w: vec![dmatrix![0.5, -0.3; 0.2, 0.8], dmatrix![1.0; -0.5]],
            b: vec![DVector::zeros(2), DVector::zeros(1)],
        };
        let ctx = KernelContext::plain(&sk, &th).unwrap();
        let (x, xp) = (dvector![0.3, 0.4], dvector![-0.1, 0.6]);
        let s = nngp(&ctx, &x, &xp).unwrap();
        let want = s.nodes[1] + s.nodes[0];
        assert!((ntk(&ctx, &x, &xp).unwrap() - want).abs() < 1e-15);
        let lin = link_deriv_with(&ctx, &x, &xp, 1, LinkScaling::NONE).unwrap();
        assert!((lin - want).abs() < 1e-15);
    }

    #[test]
    fn ntk_matrix_linear_closed_form() {
        // f = W1ᵀ W0ᵀ x: ∂f/∂W1 = W0ᵀx and ∂f/∂W0 = x W1ᵀ.
        let node = |h, a| NodeSpec {
            fanout: h,
            antecedents: vec![a],
            activations: vec![Activation::Linear],
            identity_skip: None,
        };
        let sk = Skeleton::new(2, 0.0, vec![node(2, -1), node(1, 0)]).unwrap();
        let th = Parameters {
            w: vec![dmatrix![0.5, -0.3; 0.2, 0.8], dmatrix![1.0; -0.5]],
            b: vec![DVector::zeros(2), DVector::zeros(1)],
        };
        let ctx = KernelContext::plain(&sk, &th).unwrap();
        let (x, xp) = (dvector![0.3, 0.4], dvector![-0.1, 0.6]);
        let h = th.w[0].transpose() * &x;
        let hp = th.w[0].transpose() * &xp;
        let want = h.dot(&hp) + th.w[1].norm_squared() * x.dot(&xp);
        let got = ntk_matrix(&ctx, &x, &xp).unwrap()[(0, 0)];
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }

    #[test]
    fn gram_examples() {
        let sk = build_feedforward_relu(2, &[8, 1]).unwrap();
        let th = initialize(&sk, Scheme::He, 1).unwrap();
        let ctx = KernelContext::plain(&sk, &th).unwrap();
        let x = dvector![0.6, -0.2];
        let g = gram(&ctx, KernelKind::Ntk, &[x.clone()], Exec::Sequential).unwrap();
        assert_eq!(g.values.shape(), (1, 1));
        assert!((g.values[(0, 0)] - ntk(&ctx, &x, &x).unwrap()).abs() < 1e-15);
        let g2 = gram(&ctx, KernelKind::Nngp, &[x.clone(), x.clone()], Exec::Sequential).unwrap();
        assert_eq!(g2.values[(0, 0)], g2.values[(0, 1)]);
        assert!(g2.is_psd());
    }
}
