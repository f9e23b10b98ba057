//! Forward passes with full traces.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::skeleton::{EdgeRef, NodeId, Skeleton, INPUT};
use crate::error::{NkError, Result};

/// Per-edge post-activations and per-node pre-activations of one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub x: DVector<f64>,
    /// x̂^[j] for j = 0..D−1.
    pub hat: Vec<DVector<f64>>,
    /// x̌^[ǰ,j] indexed [j][slot].
    pub check: Vec<Vec<DVector<f64>>>,
}

impl ForwardTrace {
    /// x̂^[id], with x̂^[−1] = x.
    pub fn hat_of(&self, id: NodeId) -> &DVector<f64> {
        if id == INPUT {
            &self.x
        } else {
            &self.hat[id as usize]
        }
    }

    pub fn check_of(&self, e: EdgeRef) -> &DVector<f64> {
        &self.check[e.to][e.slot]
    }

    pub fn output(&self) -> &DVector<f64> {
        self.hat.last().unwrap()
    }

    /// Concatenated x̌^[j] over antecedents.
    pub fn check_concat(&self, j: usize) -> DVector<f64> {
        let parts = &self.check[j];
        let n: usize = parts.iter().map(|p| p.len()).sum();
        let mut v = DVector::zeros(n);
        let mut off = 0;
        for p in parts {
            v.rows_mut(off, p.len()).copy_from(p);
            off += p.len();
        }
        v
    }
}

/// Evaluates f(x; Θ) = x̂^[D−1] in topological order.
pub fn forward(sk: &Skeleton, theta: &Parameters, x: &DVector<f64>) -> Result<ForwardTrace> {
    if x.len() != sk.n {
        return Err(NkError::Shape(format!("input has length {}, expected {}", x.len(), sk.n)));
    }
    theta.check(sk)?;
    if x.norm() > 1.0 + 1e-12 {
        log::warn!("input norm {} exceeds 1", x.norm());
    }
    Ok(forward_unchecked(sk, theta, x))
}

pub(crate) fn forward_unchecked(sk: &Skeleton, theta: &Parameters, x: &DVector<f64>) -> ForwardTrace {
    let mut hat: Vec<DVector<f64>> = Vec::with_capacity(sk.d());
    let mut check = Vec::with_capacity(sk.d());
    for j in 0..sk.d() {
        let node = &sk.nodes[j];
        let mut edges = Vec::with_capacity(node.antecedents.len());
        for (slot, &a) in node.antecedents.iter().enumerate() {
            let src = if a == INPUT { x } else { &hat[a as usize] };
            let act = &node.activations[slot];
            edges.push(src.map(|v| act.eval(v)));
        }
        let mut out = &theta.b[j] * sk.gamma;
        let mut off = 0;
        for e in &edges {
            let blk = theta.w[j].rows(off, e.len());
            out += blk.transpose() * e;
            off += e.len();
        }
        hat.push(out);
        check.push(edges);
    }
    ForwardTrace { x: x.clone(), hat, check }
}
