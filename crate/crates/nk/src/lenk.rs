//! Weighted trees, the LeNK recursion, the gradient-descent step with its α
//! recursion, the exact representor sum of a step and its approximations.
//!
//! Layer-wise chains only. Node j has the single in-edge j−1 → j with
//! activation τ_j, and x̌^[j] = τ_j(x̂^[j−1]).
//!
//! Index convention. A data tree D^{⌊1,k,p⌉} of height D lists its leaves
//! lexicographically: the children of a level-j node are the consecutive
//! label slices of length Π_{i<j} k_i. A leaf r carries α_{p_r}, lifted to
//! level j by the backprop Jacobian of its own training point.
//! The output tensor α_{p₀} ⊗ α_{p₁} ⊗ … is flattened in the same leaf
//! order, with leaf 0 as the most significant index.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NkError, Result};
use crate::hermite::special::ln_fact;
use crate::hermite::Activation;
use crate::netgraph::{forward, ForwardTrace, Parameters, Skeleton};
use crate::par::{self, Exec, KahanSum};

pub const DEFAULT_TERM_CAP: u64 = 1_000_000;

/// E^{⌊e,f,ς⌉}: per-level edge weights, fan-outs and leaf labels.
/// `labels` is `None` for the probe sentinel "−".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightedTree {
    pub e: Vec<usize>,
    pub f: Vec<usize>,
    pub labels: Option<Vec<usize>>,
}

impl WeightedTree {
    pub fn new(e: Vec<usize>, f: Vec<usize>, labels: Option<Vec<usize>>) -> Result<Self> {
        if e.len() != f.len() {
            return Err(NkError::Shape(format!("tree: {} edge weights, {} fan-outs", e.len(), f.len())));
        }
        if e.iter().chain(&f).any(|&v| v == 0) {
            return Err(NkError::Domain("tree weights and fan-outs must be positive".into()));
        }
        let t = WeightedTree { e, f, labels };
        match &t.labels {
            Some(l) if l.len() != t.leaf_count() => {
                return Err(NkError::Shape(format!(
                    "tree has {} labels for {} leaves",
                    l.len(),
                    t.leaf_count()
                )))
            }
            None if t.f.iter().any(|&v| v != 1) => {
                return Err(NkError::Domain("sentinel trees need unit fan-outs".into()))
            }
            _ => {}
        }
        Ok(t)
    }

    /// {x}^{⌊e,1,−⌉}.
    pub fn probe(e: Vec<usize>) -> Result<Self> {
        let m = e.len();
        Self::new(e, vec![1; m], None)
    }

    /// D^{⌊1,f,ς⌉}.
    pub fn data(f: Vec<usize>, labels: Vec<usize>) -> Result<Self> {
        let m = f.len();
        Self::new(vec![1; m], f, Some(labels))
    }

    pub fn trivial(height: usize, label: Option<usize>) -> Self {
        WeightedTree {
            e: vec![1; height],
            f: vec![1; height],
            labels: label.map(|l| vec![l]),
        }
    }

    pub fn height(&self) -> usize {
        self.e.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.f.iter().product()
    }

    pub fn is_trivial(&self) -> bool {
        self.e.iter().chain(&self.f).all(|&v| v == 1)
    }

    /// E_k: drops the top level and keeps the k-th slice of ς.
    pub fn subtree(&self, k: usize) -> Result<WeightedTree> {
        let m = self.height();
        if m == 0 || k >= self.f[m - 1] {
            return Err(NkError::Domain(format!("subtree {k} of a height-{m} tree")));
        }
        let s: usize = self.f[..m - 1].iter().product();
        Ok(WeightedTree {
            e: self.e[..m - 1].to_vec(),
            f: self.f[..m - 1].to_vec(),
            labels: self.labels.as_ref().map(|l| l[k * s..(k + 1) * s].to_vec()),
        })
    }
}

/// Training set with squared loss L = ½ Σ_l ‖f(x_l) − y_l‖².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<DVector<f64>>, targets: Vec<DVector<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(NkError::Shape(format!(
                "dataset has {} inputs and {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Dataset = serde_json::from_str(s).map_err(|e| NkError::Parse(e.to_string()))?;
        Dataset::new(d.inputs, d.targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn check(&self, sk: &Skeleton) -> Result<()> {
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            if x.len() != sk.n || y.len() != sk.m() {
                return Err(NkError::Shape(format!(
                    "sample ({}, {}) vs skeleton ({}, {})",
                    x.len(),
                    y.len(),
                    sk.n,
                    sk.m()
                )));
            }
        }
        Ok(())
    }
}

/// α̂_l^[j], indexed [l][j].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaStack {
    pub alpha: Vec<Vec<DVector<f64>>>,
}

impl AlphaStack {
    pub fn get(&self, l: usize, j: usize) -> &DVector<f64> {
        &self.alpha[l][j]
    }
}

fn require_chain(sk: &Skeleton) -> Result<()> {
    if sk.is_chain() {
        Ok(())
    } else {
        Err(NkError::Unsupported("LeNK needs a layer-wise chain skeleton".into()))
    }
}

fn act(sk: &Skeleton, j: usize) -> &Activation {
    &sk.nodes[j].activations[0]
}

fn deriv_vec(a: &Activation, n: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(v.len());
    for (o, &z) in out.iter_mut().zip(v.iter()) {
        *o = a.deriv(n, z)?;
    }
    Ok(out)
}

pub fn loss(sk: &Skeleton, theta: &Parameters, data: &Dataset) -> Result<f64> {
    let mut s = KahanSum::new();
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        s.add(0.5 * (forward(sk, theta, x)?.output() - y).norm_squared());
    }
    Ok(s.value())
}

fn traces(sk: &Skeleton, theta: &Parameters, data: &Dataset) -> Result<Vec<ForwardTrace>> {
    data.inputs.iter().map(|x| forward(sk, theta, x)).collect()
}

fn alphas_from(sk: &Skeleton, theta: &Parameters, data: &Dataset, tr: &[ForwardTrace]) -> Result<AlphaStack> {
    let d = sk.d();
    let mut alpha = Vec::with_capacity(data.len());
    for (t, y) in tr.iter().zip(&data.targets) {
        let mut a = vec![DVector::zeros(0); d];
        a[d - 1] = t.output() - y;
        for j in (1..d).rev() {
            let g = deriv_vec(act(sk, j), 1, t.hat_of(j as isize - 1))?;
            a[j - 1] = (&theta.w[j] * &a[j]).component_mul(&g);
        }
        alpha.push(a);
    }
    Ok(AlphaStack { alpha })
}

/// α̂^[D−1] = f(x_l) − y_l, α̂^[j−1] = diag(τ_j'(x̂^[j−1])) W^[j] α̂^[j].
pub fn backprop_alphas(sk: &Skeleton, theta: &Parameters, data: &Dataset) -> Result<AlphaStack> {
    require_chain(sk)?;
    data.check(sk)?;
    let tr = traces(sk, theta, data)?;
    alphas_from(sk, theta, data, &tr)
}

fn step_from(sk: &Skeleton, tr: &[ForwardTrace], al: &AlphaStack, eta_lr: f64) -> Parameters {
    let mut delta = Parameters::zeros(sk);
    for (t, a) in tr.iter().zip(&al.alpha) {
        for j in 0..sk.d() {
            delta.w[j].ger(-eta_lr, &t.check[j][0], &a[j], 1.0);
            delta.b[j].axpy(-eta_lr * sk.gamma, &a[j], 1.0);
        }
    }
    delta
}

/// ΔW^[j] = −η_lr Σ_l x̌_l^[j] α̂_l^[j]ᵀ, Δb^[j] = −η_lr Σ_l γ α̂_l^[j].
pub fn gd_step(sk: &Skeleton, theta: &Parameters, data: &Dataset, eta_lr: f64) -> Result<Parameters> {
    let al = backprop_alphas(sk, theta, data)?;
    let tr = traces(sk, theta, data)?;
    Ok(step_from(sk, &tr, &al, eta_lr))
}

/// A gradient step together with the per-sample traces and α needed by the
/// representor sums.
#[derive(Debug, Clone)]
pub struct LenkProblem<'a> {
    pub sk: &'a Skeleton,
    pub theta: &'a Parameters,
    pub data: &'a Dataset,
    pub eta_lr: f64,
    pub delta: Parameters,
    pub alphas: AlphaStack,
    traces: Vec<ForwardTrace>,
}

impl<'a> LenkProblem<'a> {
    pub fn new(sk: &'a Skeleton, theta: &'a Parameters, data: &'a Dataset, eta_lr: f64) -> Result<Self> {
        require_chain(sk)?;
        data.check(sk)?;
        let traces = traces(sk, theta, data)?;
        let alphas = alphas_from(sk, theta, data, &traces)?;
        let delta = step_from(sk, &traces, &alphas, eta_lr);
        Ok(LenkProblem { sk, theta, data, eta_lr, delta, alphas, traces })
    }

    /// Θ + ΔΘ.
    pub fn stepped(&self) -> Parameters {
        self.theta.add(&self.delta)
    }

    fn evaluator(&self, x: &DVector<f64>, wp: Vec<DMatrix<f64>>, kmax: usize) -> Result<Evaluator<'_>> {
        let sk = self.sk;
        let d = sk.d();
        let probe = forward(sk, self.theta, x)?;
        // tau[j][k] = τ_j^{(k)}(x̂^[j−1](x)), None where the derivative vanishes.
        let mut tau = vec![Vec::new(); d];
        for (j, t) in tau.iter_mut().enumerate() {
            t.push(None);
            for k in 1..=kmax {
                let a = act(sk, j);
                t.push(if a.deriv_vanishes(k) {
                    None
                } else {
                    Some(deriv_vec(a, k, probe.hat_of(j as isize - 1))?)
                });
            }
        }
        let sigma = (0..d)
            .map(|j| {
                self.traces
                    .iter()
                    .map(|t| sk.gamma * sk.gamma + probe.check[j][0].dot(&t.check[j][0]))
                    .collect()
            })
            .collect();
        let tau1 = self
            .traces
            .iter()
            .map(|t| (0..d).map(|j| deriv_vec(act(sk, j), 1, t.hat_of(j as isize - 1))).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        Ok(Evaluator { p: self, wp, tau, sigma, tau1 })
    }

    fn warped(&self) -> Vec<DMatrix<f64>> {
        self.theta.w.iter().zip(&self.delta.w).map(|(w, dw)| w + dw).collect()
    }
}

struct Evaluator<'p> {
    p: &'p LenkProblem<'p>,
    wp: Vec<DMatrix<f64>>,
    tau: Vec<Vec<Option<DVector<f64>>>>,
    /// Σ^[j](x, x_l) = γ² + x̌^[j](x) · x̌_l^[j], indexed [j][l].
    sigma: Vec<Vec<f64>>,
    /// τ_j'(x̂_l^[j−1]), indexed [l][j].
    tau1: Vec<Vec<DVector<f64>>>,
}

impl Evaluator<'_> {
    fn width(&self, j: usize) -> usize {
        self.p.sk.width(j as isize)
    }

    fn k_choices(&self, j: usize, kmax: usize) -> Vec<usize> {
        (1..=kmax).filter(|&k| self.tau[j][k].is_some()).collect()
    }

    /// LeNK value of the pair ({x}^{⌊e,1,−⌉}, D^{⌊1,f,labels⌉}) at level j,
    /// contracted with leaf vectors `alpha(r, l, j)`.
    #[allow(clippy::too_many_arguments)]
    fn uniform(
        &self,
        j: usize,
        e: &[usize],
        f: &[usize],
        labels: &[usize],
        off: usize,
        alpha: &dyn Fn(usize, usize, usize) -> DVector<f64>,
    ) -> DVector<f64> {
        let mut v = DVector::zeros(self.width(j));
        if e[..=j].iter().chain(&f[..=j]).all(|&kk| kk == 1) {
            let l = labels[0];
            v.axpy(self.sigma[j][l], &alpha(off, l, j), 1.0);
        }
        if j >= 1 {
            if let Some(t) = self.tau[j].get(e[j]).and_then(|t| t.as_ref()) {
                let s = labels.len() / f[j];
                let mut prod = t.clone();
                for c in 0..f[j] {
                    let child = self.uniform(j - 1, e, f, &labels[c * s..(c + 1) * s], off + c * s, alpha);
                    prod.component_mul_assign(&child);
                }
                v.gemv_tr(1.0, &self.wp[j], &prod, 1.0);
            }
        }
        v
    }

    /// Diagonal K^NCT at level j for the same tree pair.
    fn nct(&self, j: usize, k: &[usize], labels: &[usize]) -> DVector<f64> {
        let mut v = DVector::zeros(self.width(j));
        if k[..=j].iter().all(|&kk| kk == 1) {
            v.add_scalar_mut(self.sigma[j][labels[0]]);
        }
        if j >= 1 {
            if let Some(t) = &self.tau[j][k[j]] {
                let w2 = self.wp[j].map(|w| w * w);
                let s = labels.len() / k[j];
                let mut prod = DVector::from_element(self.width(j), 1.0);
                for c in 0..k[j] {
                    let sub = &labels[c * s..(c + 1) * s];
                    let mut u = self.nct(j - 1, k, sub).component_mul(t);
                    for &l in sub {
                        u.component_mul_assign(&self.tau1[l][j]);
                    }
                    prod.component_mul_assign(&w2.tr_mul(&u));
                }
                v += prod;
            }
        }
        v
    }
}

/// Exact representor sum together with its partial sums grouped by the
/// number of leaves (the power of η_lr).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentorSum {
    pub value: DVector<f64>,
    pub orders: Vec<(usize, DVector<f64>)>,
    pub terms: u64,
}

/// Per-component compensated accumulator.
#[derive(Debug, Clone)]
struct VecAcc(Vec<KahanSum>);

impl VecAcc {
    fn new(n: usize) -> Self {
        VecAcc(vec![KahanSum::new(); n])
    }

    fn add(&mut self, v: &DVector<f64>, scale: f64) {
        for (a, &x) in self.0.iter_mut().zip(v.iter()) {
            a.add(scale * x);
        }
    }

    fn value(&self) -> DVector<f64> {
        DVector::from_iterator(self.0.len(), self.0.iter().map(|a| a.value()))
    }
}

/// Pairwise reduction of equally sized vectors in a fixed order.
fn reduce(parts: &[DVector<f64>], n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    let mut buf = Vec::with_capacity(parts.len());
    for i in 0..n {
        buf.clear();
        buf.extend(parts.iter().map(|p| p[i]));
        out[i] = par::pairwise_sum(&buf);
    }
    out
}

fn cap_error(what: String, count: u128, cap: u64) -> NkError {
    NkError::TermCap {
        what,
        count: count.min(u64::MAX as u128) as u64,
        cap,
    }
}

/// Δf over ragged labeled trees. A level-j tree is either a leaf l with
/// value −η Σ^[j](x, x_l) α̂_l^[j], or a node with k ordered level-(j−1)
/// children and value (1/k!) W'^[j]ᵀ [τ_j^{(k)}(x̂^[j−1](x)) ⊙ Π_c v_c].
fn ragged(p: &LenkProblem, x: &DVector<f64>, kmax: usize, cap: u64, wp: Vec<DMatrix<f64>>, exec: Exec) -> Result<RepresentorSum> {
    if kmax == 0 {
        return Err(NkError::Domain("k_max must be at least 1".into()));
    }
    let ev = p.evaluator(x, wp, kmax)?;
    let d = p.sk.d();
    let n = p.data.len();
    let eta = p.eta_lr;

    let mut count: u128 = n as u128;
    for j in 1..d {
        let prev = count;
        count = n as u128;
        for k in ev.k_choices(j, kmax) {
            count = count.saturating_add(prev.saturating_pow(k as u32));
            if count > cap as u128 {
                return Err(cap_error(format!("level {j}, k={k}"), count, cap));
            }
        }
    }

    let leaves = |j: usize| -> Vec<(DVector<f64>, usize)> {
        (0..n)
            .map(|l| (p.alphas.get(l, j) * (-eta * ev.sigma[j][l]), 1))
            .collect()
    };
    let mut level = leaves(0);
    for j in 1..d.saturating_sub(1) {
        let mut next = leaves(j);
        for k in ev.k_choices(j, kmax) {
            let t = ev.tau[j][k].as_ref().unwrap();
            let inv = (-ln_fact(k)).exp();
            for_each_tuple(level.len(), k, |idx| {
                let mut prod = t.clone();
                let mut cnt = 0;
                for &i in idx {
                    prod.component_mul_assign(&level[i].0);
                    cnt += level[i].1;
                }
                next.push((ev.wp[j].tr_mul(&prod) * inv, cnt));
            });
        }
        level = next;
    }

    let top = d - 1;
    let m = p.sk.m();
    let mut orders: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    if top == 0 {
        let mut acc = VecAcc::new(m);
        for (v, _) in &level {
            acc.add(v, 1.0);
        }
        orders.insert(1, acc.value());
    } else {
        let mut leaf_acc = VecAcc::new(m);
        for (v, _) in leaves(top) {
            leaf_acc.add(&v, 1.0);
        }
        let h = ev.width(top - 1);
        let mut inner: BTreeMap<usize, Vec<DVector<f64>>> = BTreeMap::new();
        for k in ev.k_choices(top, kmax) {
            let t = ev.tau[top][k].as_ref().unwrap();
            let inv = (-ln_fact(k)).exp();
            let parts = par::map_range(exec, level.len(), |first| {
                let mut acc: BTreeMap<usize, VecAcc> = BTreeMap::new();
                for_each_tuple(level.len(), k - 1, |rest| {
                    let mut prod = t.component_mul(&level[first].0);
                    let mut cnt = level[first].1;
                    for &i in rest {
                        prod.component_mul_assign(&level[i].0);
                        cnt += level[i].1;
                    }
                    acc.entry(cnt).or_insert_with(|| VecAcc::new(h)).add(&prod, inv);
                });
                acc.into_iter().map(|(o, a)| (o, a.value())).collect::<Vec<_>>()
            });
            for part in parts {
                for (o, v) in part {
                    inner.entry(o).or_default().push(v);
                }
            }
        }
        for (o, vs) in inner {
            orders.insert(o, ev.wp[top].tr_mul(&reduce(&vs, h)));
        }
        let lv = leaf_acc.value();
        orders
            .entry(1)
            .and_modify(|v| *v += &lv)
            .or_insert(lv);
    }
    let orders: Vec<(usize, DVector<f64>)> = orders.into_iter().collect();
    let parts: Vec<DVector<f64>> = orders.iter().map(|(_, v)| v.clone()).collect();
    Ok(RepresentorSum {
        value: reduce(&parts, m),
        orders,
        terms: count as u64,
    })
}

/// Calls `f` on every k-tuple over 0..n in lexicographic order.
fn for_each_tuple(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > 0 && n == 0 {
        return;
    }
    let mut idx = vec![0usize; k];
    loop {
        f(&idx);
        let mut pos = k;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < n {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Exact Δf = f(x; Θ+ΔΘ) − f(x; Θ) for polynomial chains with k_max at
/// least the activation degree.
pub fn representor_sum(p: &LenkProblem, x: &DVector<f64>, kmax: usize, cap: u64) -> Result<RepresentorSum> {
    ragged(p, x, kmax, cap, p.warped(), Exec::default())
}

pub fn representor_sum_with(p: &LenkProblem, x: &DVector<f64>, kmax: usize, cap: u64, exec: Exec) -> Result<RepresentorSum> {
    ragged(p, x, kmax, cap, p.warped(), exec)
}

/// The representor sum with the unwarped kernel (Θ, Θ).
pub fn lenk_fixed(p: &LenkProblem, x: &DVector<f64>, kmax: usize, cap: u64) -> Result<RepresentorSum> {
    ragged(p, x, kmax, cap, p.theta.w.clone(), Exec::default())
}

/// Lexicographic enumeration of k ∈ [1, k_max]^D with k₀ = 1 and k_j
/// restricted to non-vanishing derivatives. Terms at k₀ > 1 are zero since
/// K^[−1] = 0.
fn k_vectors(ev: &Evaluator, d: usize, kmax: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![1]];
    for j in 1..d {
        let ch = ev.k_choices(j, kmax);
        out = out
            .into_iter()
            .flat_map(|k| {
                ch.iter().map(move |&c| {
                    let mut k2 = k.clone();
                    k2.push(c);
                    k2
                })
            })
            .collect();
    }
    out
}

fn uniform_budget(ks: &[Vec<usize>], n: usize, cap: u64) -> Result<u64> {
    let mut total: u128 = 0;
    for k in ks {
        let leaves: u32 = k.iter().product::<usize>() as u32;
        total = total.saturating_add((n as u128).saturating_pow(leaves));
        if total > cap as u128 {
            return Err(cap_error(format!("k={k:?}"), total, cap));
        }
    }
    Ok(total as u64)
}

/// (−η)^{Πk_j} / Π k_j!.
fn prefactor(eta: f64, k: &[usize]) -> f64 {
    let leaves: usize = k.iter().product();
    let lf: f64 = k.iter().map(|&kk| ln_fact(kk)).sum();
    (-eta).powi(leaves as i32) * (-lf).exp()
}

fn uniform_sum(
    p: &LenkProblem,
    x: &DVector<f64>,
    kmax: usize,
    cap: u64,
    term: &(dyn Fn(&Evaluator, &[usize], &[usize]) -> DVector<f64> + Sync),
    diag_only: bool,
) -> Result<DVector<f64>> {
    let ev = p.evaluator(x, p.warped(), kmax)?;
    let d = p.sk.d();
    let n = p.data.len();
    let m = p.sk.m();
    let ks = k_vectors(&ev, d, kmax);
    if diag_only {
        let total = ks.len() as u128 * n as u128;
        if total > cap as u128 {
            return Err(cap_error("diagonal terms".into(), total, cap));
        }
    } else {
        uniform_budget(&ks, n, cap)?;
    }
    if p.eta_lr == 0.0 {
        return Ok(DVector::zeros(m));
    }
    let parts = par::map(Exec::default(), &ks, |k| {
        let leaves: usize = k.iter().product();
        let pre = prefactor(p.eta_lr, k);
        let mut acc = VecAcc::new(m);
        if diag_only {
            for l in 0..n {
                acc.add(&term(&ev, k, &vec![l; leaves]), pre);
            }
        } else {
            for_each_tuple(n, leaves, |labels| acc.add(&term(&ev, k, labels), pre));
        }
        acc.value()
    });
    Ok(reduce(&parts, m))
}

/// The representor sum over uniform trees ({x}^{⌊k,1,−⌉}, D^{⌊1,k,p⌉}) only.
/// Exact when at most one edge past the first is nonlinear; otherwise it
/// misses the cross terms between children of different shapes.
pub fn representor_sum_uniform(p: &LenkProblem, x: &DVector<f64>, kmax: usize, cap: u64) -> Result<DVector<f64>> {
    let d = p.sk.d();
    let alpha = |_r: usize, l: usize, j: usize| p.alphas.get(l, j).clone();
    uniform_sum(p, x, kmax, cap, &|ev, k, labels| ev.uniform(d - 1, k, k, labels, 0, &alpha), false)
}

fn nct_term(p: &LenkProblem, ev: &Evaluator, k: &[usize], labels: &[usize]) -> DVector<f64> {
    let d = p.sk.d();
    let mut v = ev.nct(d - 1, k, labels);
    for &l in labels {
        v.component_mul_assign(p.alphas.get(l, d - 1));
    }
    v
}

/// Diagonal (no-cross-term) approximation with Hadamard α contraction.
pub fn lenk_nct(p: &LenkProblem, x: &DVector<f64>, kmax: usize, cap: u64) -> Result<DVector<f64>> {
    uniform_sum(p, x, kmax, cap, &|ev, k, labels| nct_term(p, ev, k, labels), false)
}

/// [`lenk_nct`] restricted to terms whose leaves share one training point.
pub fn lenk_diag(p: &LenkProblem, x: &DVector<f64>, kmax: usize, cap: u64) -> Result<DVector<f64>> {
    uniform_sum(p, x, kmax, cap, &|ev, k, labels| nct_term(p, ev, k, labels), true)
}

/// Backprop Jacobians A_l^[j] (H^[j] × m) with α̂_l^[j] = A_l^[j] α̂_l^[D−1].
fn lifts(p: &LenkProblem) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let sk = p.sk;
    let d = sk.d();
    let m = sk.m();
    p.traces
        .iter()
        .map(|t| {
            let mut a = vec![DMatrix::zeros(0, 0); d];
            a[d - 1] = DMatrix::identity(m, m);
            for j in (1..d).rev() {
                let g = deriv_vec(act(sk, j), 1, t.hat_of(j as isize - 1))?;
                let mut prev = &p.theta.w[j] * &a[j];
                for (mut row, gi) in prev.row_iter_mut().zip(g.iter()) {
                    row *= *gi;
                }
                a[j - 1] = prev;
            }
            Ok(a)
        })
        .collect()
}

/// K_LeNK(probe, data; Θ', Θ) as an m × m^L matrix, L the data leaf count.
/// Column (i₀, …, i_{L−1}) is the kernel applied to α-tensor e_{i₀} ⊗ … ⊗ e_{i_{L−1}}.
/// Supports probe trees {x}^{⌊e,1,−⌉} and data trees D^{⌊1,f,ς⌉}.
pub fn lenk_kernel(
    p: &LenkProblem,
    x: &DVector<f64>,
    probe: &WeightedTree,
    data: &WeightedTree,
    theta_p: &Parameters,
    column_cap: u64,
) -> Result<DMatrix<f64>> {
    let sk = p.sk;
    let d = sk.d();
    if probe.height() != d || data.height() != d {
        return Err(NkError::Shape(format!(
            "tree heights {} and {} vs depth {d}",
            probe.height(),
            data.height()
        )));
    }
    if probe.f.iter().any(|&v| v != 1) || data.e.iter().any(|&v| v != 1) {
        return Err(NkError::Unsupported("kernel needs a unit-fan-out probe and a unit-weight data tree".into()));
    }
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| NkError::Domain("data tree needs labels".into()))?;
    if labels.iter().any(|&l| l >= p.data.len()) {
        return Err(NkError::Domain("leaf label out of range".into()));
    }
    theta_p.check(sk)?;
    let m = sk.m();
    let nleaves = labels.len();
    let cols = (m as u128).saturating_pow(nleaves as u32);
    if cols > column_cap as u128 {
        return Err(cap_error("kernel columns".into(), cols, column_cap));
    }
    let kmax = probe.e.iter().copied().max().unwrap_or(1);
    let ev = p.evaluator(x, theta_p.w.clone(), kmax)?;
    let lifted = lifts(p)?;
    let mut out = DMatrix::zeros(m, cols as usize);
    let mut digits = vec![0usize; nleaves];
    for c in 0..cols as usize {
        let mut r = c;
        for pos in (0..nleaves).rev() {
            digits[pos] = r % m;
            r /= m;
        }
        let alpha = |rr: usize, l: usize, j: usize| lifted[l][j].column(digits[rr]).into_owned();
        out.set_column(c, &ev.uniform(d - 1, &probe.e, &data.f, labels, 0, &alpha));
    }
    Ok(out)
}

/// Flattened α_{p₀} ⊗ α_{p₁} ⊗ … in the kernel's column order.
pub fn alpha_tensor(p: &LenkProblem, labels: &[usize]) -> DVector<f64> {
    let d = p.sk.d();
    let mut v = DVector::from_element(1, 1.0);
    for &l in labels {
        v = v.kronecker(p.alphas.get(l, d - 1));
    }
    v
}

/// One row of the per-order convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub order: usize,
    pub partial: Vec<f64>,
    pub cumulative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub method: String,
    pub value: Vec<f64>,
    pub abs_error: f64,
}

/// Convergence of the representor sum against a reference Δf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LenkReport {
    pub k_max: usize,
    pub terms: u64,
    pub value: Vec<f64>,
    pub reference: Vec<f64>,
    pub abs_error: f64,
    pub orders: Vec<OrderRow>,
    pub ladder: Vec<LadderRow>,
}

impl LenkReport {
    pub fn new(sum: &RepresentorSum, reference: &DVector<f64>, k_max: usize) -> Self {
        let mut cum = DVector::zeros(reference.len());
        let orders = sum
            .orders
            .iter()
            .map(|(o, v)| {
                cum += v;
                OrderRow {
                    order: *o,
                    partial: v.iter().copied().collect(),
                    cumulative_error: (&cum - reference).amax(),
                }
            })
            .collect();
        LenkReport {
            k_max,
            terms: sum.terms,
            value: sum.value.iter().copied().collect(),
            reference: reference.iter().copied().collect(),
            abs_error: (&sum.value - reference).amax(),
            orders,
            ladder: Vec::new(),
        }
    }

    pub fn push_ladder(&mut self, method: &str, value: &DVector<f64>) {
        let r = DVector::from_column_slice(&self.reference);
        self.ladder.push(LadderRow {
            method: method.to_string(),
            value: value.iter().copied().collect(),
            abs_error: (value - r).amax(),
        });
    }

    pub fn final_error(&self) -> f64 {
        self.orders.last().map_or(self.abs_error, |o| o.cumulative_error)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{initialize, NodeSpec, Scheme};
    use nalgebra::dvector;

    fn chain(n: usize, widths: &[usize], acts: Vec<Activation>, gamma: f64) -> Skeleton {
        let nodes = widths
            .iter()
            .zip(acts)
            .enumerate()
            .map(|(j, (&h, a))| NodeSpec {
                fanout: h,
                antecedents: vec![j as isize - 1],
                activations: vec![a],
                identity_skip: None,
            })
            .collect();
        Skeleton::new(n, gamma, nodes).unwrap()
    }

    fn sq() -> Activation {
        Activation::Polynomial(vec![0.1, 0.5, 0.7])
    }

    fn dataset(sk: &Skeleton, n: usize) -> Dataset {
        let xs = (0..n)
            .map(|l| DVector::from_fn(sk.n, |i, _| 0.3 * ((l * 7 + i * 3) as f64).sin()))
            .collect();
        let ys = (0..n)
            .map(|l| DVector::from_fn(sk.m(), |i, _| 0.2 * ((l + 2 * i) as f64).cos()))
            .collect();
        Dataset::new(xs, ys).unwrap()
    }

    fn brute(p: &LenkProblem, x: &DVector<f64>) -> DVector<f64> {
        forward(p.sk, &p.stepped(), x).unwrap().output() - forward(p.sk, p.theta, x).unwrap().output()
    }

    #[test]
    fn tree_slices() {
        let t = WeightedTree::data(vec![2, 3], (0..6).collect()).unwrap();
        assert_eq!(t.leaf_count(), 6);
        assert_eq!(t.subtree(1).unwrap().labels, Some(vec![2, 3]));
        assert!(t.subtree(3).is_err());
        assert!(WeightedTree::new(vec![1], vec![2], None).is_err());
        assert!(WeightedTree::probe(vec![2, 1]).unwrap().labels.is_none());
    }

    #[test]
    fn one_node_linear_step() {
        let sk = chain(3, &[2], vec![Activation::Linear], 0.5);
        let th = initialize(&sk, Scheme::Lecun, 3).unwrap();
        let data = dataset(&sk, 1);
        let p = LenkProblem::new(&sk, &th, &data, 0.3).unwrap();
        let r = th.w[0].tr_mul(&data.inputs[0]) + &th.b[0] * 0.5 - &data.targets[0];
        let want = -0.3 * &data.inputs[0] * r.transpose();
        assert!((&p.delta.w[0] - want).amax() < 1e-14);
        let x = dvector![0.2, -0.1, 0.4];
        let s = representor_sum(&p, &x, 1, DEFAULT_TERM_CAP).unwrap();
        let dx = p.delta.w[0].tr_mul(&x) + &p.delta.b[0] * 0.5;
        assert!((&s.value - dx).amax() < 1e-14);
        let u = representor_sum_uniform(&p, &x, 1, DEFAULT_TERM_CAP).unwrap();
        assert!((&u - &s.value).amax() < 1e-14);
    }

    #[test]
    fn square_net_exact() {
        let sk = chain(3, &[3, 2], vec![Activation::Linear, sq()], 0.3);
        let th = initialize(&sk, Scheme::Lecun, 5).unwrap();
        let data = dataset(&sk, 2);
        let p = LenkProblem::new(&sk, &th, &data, 0.4).unwrap();
        let x = dvector![0.1, 0.5, -0.3];
        let want = brute(&p, &x);
        let s = representor_sum(&p, &x, 2, DEFAULT_TERM_CAP).unwrap();
        assert!((&s.value - &want).amax() < 1e-12, "{} vs {}", s.value, want);
        let u = representor_sum_uniform(&p, &x, 2, DEFAULT_TERM_CAP).unwrap();
        assert!((&u - &want).amax() < 1e-12);
    }

    #[test]
    fn three_level_ragged_exact() {
        let cube = Activation::Polynomial(vec![0.0, 0.8, 0.3, 0.2]);
        let sk = chain(2, &[3, 3, 2], vec![sq(), cube.clone(), cube], 0.4);
        let th = initialize(&sk, Scheme::Lecun, 9).unwrap();
        let data = dataset(&sk, 2);
        let p = LenkProblem::new(&sk, &th, &data, 0.5).unwrap();
        let x = dvector![0.3, -0.6];
        let want = brute(&p, &x);
        let s = representor_sum(&p, &x, 3, DEFAULT_TERM_CAP).unwrap();
        assert!((&s.value - &want).amax() < 1e-11, "{} vs {}", s.value, want);
        let seq = representor_sum_with(&p, &x, 3, DEFAULT_TERM_CAP, Exec::Sequential).unwrap();
        assert_eq!(seq.value, s.value);
        let u = representor_sum_uniform(&p, &x, 3, DEFAULT_TERM_CAP).unwrap();
        assert!((&u - &want).amax() > 1e-9);
        assert!(matches!(representor_sum(&p, &x, 3, 100), Err(NkError::TermCap { .. })));
    }

    #[test]
    fn zero_residuals() {
        let sk = chain(2, &[2, 2], vec![Activation::Linear, sq()], 0.0);
        let th = initialize(&sk, Scheme::Lecun, 1).unwrap();
        let xs = vec![dvector![0.2, 0.1], dvector![-0.4, 0.3]];
        let ys = xs.iter().map(|x| forward(&sk, &th, x).unwrap().output().clone()).collect();
        let data = Dataset::new(xs, ys).unwrap();
        let p = LenkProblem::new(&sk, &th, &data, 0.5).unwrap();
        assert_eq!(p.delta.frobenius(), 0.0);
        let x = dvector![0.5, 0.5];
        for v in [
            representor_sum(&p, &x, 2, DEFAULT_TERM_CAP).unwrap().value,
            lenk_fixed(&p, &x, 2, DEFAULT_TERM_CAP).unwrap().value,
            lenk_nct(&p, &x, 2, DEFAULT_TERM_CAP).unwrap(),
            lenk_diag(&p, &x, 2, DEFAULT_TERM_CAP).unwrap(),
        ] {
            assert_eq!(v.amax(), 0.0);
        }
    }

    #[test]
    fn kernel_contracts_to_uniform_sum() {
        let sk = chain(2, &[3, 2], vec![Activation::Linear, sq()], 0.2);
        let th = initialize(&sk, Scheme::Lecun, 2).unwrap();
        let data = dataset(&sk, 2);
        let p = LenkProblem::new(&sk, &th, &data, 0.3).unwrap();
        let x = dvector![0.4, -0.2];
        let mut total = DVector::zeros(sk.m());
        let wp = p.stepped();
        for k1 in 1..=2usize {
            let k = vec![1, k1];
            for_each_tuple(2, k1, |labels| {
                let kern = lenk_kernel(
                    &p,
                    &x,
                    &WeightedTree::probe(k.clone()).unwrap(),
                    &WeightedTree::data(k.clone(), labels.to_vec()).unwrap(),
                    &wp,
                    1000,
                )
                .unwrap();
                total += kern * alpha_tensor(&p, labels) * prefactor(0.3, &k);
            });
        }
        let u = representor_sum_uniform(&p, &x, 2, DEFAULT_TERM_CAP).unwrap();
        assert!((&total - &u).amax() < 1e-13);
    }

    #[test]
    fn kernel_trivial_and_zero_weights() {
        let sk = chain(2, &[3, 2], vec![Activation::Linear, sq()], 0.5);
        let th = initialize(&sk, Scheme::Lecun, 4).unwrap();
        let data = dataset(&sk, 2);
        let p = LenkProblem::new(&sk, &th, &data, 0.3).unwrap();
        let x = dvector![0.1, 0.7];
        let t = WeightedTree::trivial(2, None);
        let dt = WeightedTree::trivial(2, Some(1));
        // Θ' = Θ, depth 2: the kernel diagonal is the NCT value.
        let kern = lenk_kernel(&p, &x, &t, &dt, &th, 100).unwrap();
        let ev = p.evaluator(&x, th.w.clone(), 1).unwrap();
        let nct = ev.nct(1, &[1, 1], &[1]);
        for i in 0..2 {
            assert!((kern[(i, i)] - nct[i]).abs() < 1e-14);
        }
        let zero = Parameters::zeros(&sk);
        let kz = lenk_kernel(&p, &x, &t, &dt, &zero, 100).unwrap();
        let sig = ev.sigma[1][1];
        assert!((kz - DMatrix::identity(2, 2) * sig).amax() < 1e-15);
    }

    #[test]
    fn linear_nct_equals_diag() {
        let sk = chain(2, &[3, 3, 2], vec![Activation::Linear; 3], 0.3);
        let th = initialize(&sk, Scheme::Lecun, 6).unwrap();
        let data = dataset(&sk, 3);
        let p = LenkProblem::new(&sk, &th, &data, 0.2).unwrap();
        let x = dvector![0.3, 0.3];
        let a = lenk_nct(&p, &x, 3, DEFAULT_TERM_CAP).unwrap();
        let b = lenk_diag(&p, &x, 3, DEFAULT_TERM_CAP).unwrap();
        assert!((&a - &b).amax() < 1e-15);
    }

    #[test]
    fn rejects_non_chain() {
        let sk = crate::netgraph::build_resnet(2, &[2, 2]).unwrap();
        let th = initialize(&sk, Scheme::Lecun, 0).unwrap();
        let data = Dataset::new(vec![dvector![0.1, 0.2]], vec![dvector![0.0, 0.0]]).unwrap();
        assert!(matches!(backprop_alphas(&sk, &th, &data), Err(NkError::Unsupported(_))));
    }
}
