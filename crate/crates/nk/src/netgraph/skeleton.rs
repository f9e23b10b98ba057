//! DAG skeletons.

use serde::{Deserialize, Serialize};

use crate::error::{NkError, Result};
use crate::hermite::Activation;

/// Node index; −1 is the virtual input node.
pub type NodeId = isize;

pub const INPUT: NodeId = -1;

/// One node of the skeleton and its incoming edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub fanout: usize,
    /// Antecedent set P̌^[j], in block order of W^[j].
    pub antecedents: Vec<NodeId>,
    /// τ^[ǰ,j] per antecedent.
    pub activations: Vec<Activation>,
    /// Antecedent position whose weight block is a fixed identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity_skip: Option<usize>,
}

/// Reference to the edge ǰ → j, with `slot` the position of ǰ in P̌^[j].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeRef {
    pub from: NodeId,
    pub to: usize,
    pub slot: usize,
}

impl std::fmt::Display for EdgeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

/// Computational skeleton: nodes 0..D−1 in topological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Input width n = H^[−1].
    pub n: usize,
    #[serde(default)]
    pub gamma: f64,
    pub nodes: Vec<NodeSpec>,
}

impl Skeleton {
    /// Validates and builds a skeleton.
    pub fn new(n: usize, gamma: f64, nodes: Vec<NodeSpec>) -> Result<Self> {
        let sk = Skeleton { n, gamma, nodes };
        sk.validate()?;
        Ok(sk)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sk: Skeleton = serde_json::from_str(s).map_err(|e| NkError::Parse(e.to_string()))?;
        sk.validate()?;
        Ok(sk)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NkError::Skeleton(m));
        if self.n == 0 {
            return bad("input width must be positive".into());
        }
        if self.nodes.is_empty() {
            return bad("at least one node required".into());
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma {} must be finite and >= 0", self.gamma));
        }
        let d = self.nodes.len();
        let mut has_successor = vec![false; d + 1];
        for (j, node) in self.nodes.iter().enumerate() {
            if node.fanout == 0 {
                return bad(format!("node {j} has zero fan-out"));
            }
            if node.antecedents.is_empty() {
                return bad(format!("node {j} has no antecedents"));
            }
            if node.antecedents.len() != node.activations.len() {
                return bad(format!("node {j}: one activation per antecedent required"));
            }
            for (s, &a) in node.antecedents.iter().enumerate() {
                if a < INPUT || a >= j as isize {
                    return bad(format!("node {j}: antecedent {a} breaks topological order"));
                }
                if node.antecedents[..s].contains(&a) {
                    return bad(format!("node {j}: duplicate antecedent {a}"));
                }
                has_successor[(a + 1) as usize] = true;
            }
            if let Some(s) = node.identity_skip {
                if s >= node.antecedents.len() {
                    return bad(format!("node {j}: identity slot {s} out of range"));
                }
                if self.width(node.antecedents[s]) != node.fanout {
                    return bad(format!(
                        "node {j}: identity skip from {} needs width {} but has {}",
                        node.antecedents[s],
                        node.fanout,
                        self.width(node.antecedents[s])
                    ));
                }
            }
        }
        for (i, &s) in has_successor.iter().enumerate().take(d) {
            if !s {
                return bad(format!("node {} does not reach the output", i as isize - 1));
            }
        }
        Ok(())
    }

    /// Node count D.
    pub fn d(&self) -> usize {
        self.nodes.len()
    }

    /// H^[id], with H^[−1] = n.
    pub fn width(&self, id: NodeId) -> usize {
        if id == INPUT {
            self.n
        } else {
            self.nodes[id as usize].fanout
        }
    }

    /// Output width m.
    pub fn m(&self) -> usize {
        self.nodes.last().unwrap().fanout
    }

    /// Fan-in Ȟ^[j].
    pub fn fan_in(&self, j: usize) -> usize {
        self.nodes[j].antecedents.iter().map(|&a| self.width(a)).sum()
    }

    /// In-degree p̌^[j].
    pub fn in_degree(&self, j: usize) -> usize {
        self.nodes[j].antecedents.len()
    }

    /// Row offset of the block for `slot` inside W^[j].
    pub fn block_offset(&self, j: usize, slot: usize) -> usize {
        self.nodes[j].antecedents[..slot]
            .iter()
            .map(|&a| self.width(a))
            .sum()
    }

    pub fn activation(&self, e: EdgeRef) -> &Activation {
        &self.nodes[e.to].activations[e.slot]
    }

    /// Incoming edges of node j.
    pub fn in_edges(&self, j: usize) -> Vec<EdgeRef> {
        self.nodes[j]
            .antecedents
            .iter()
            .enumerate()
            .map(|(slot, &from)| EdgeRef { from, to: j, slot })
            .collect()
    }

    /// All edges, grouped by target in topological order.
    pub fn edges(&self) -> Vec<EdgeRef> {
        (0..self.d()).flat_map(|j| self.in_edges(j)).collect()
    }

    /// Outgoing edges of `id`.
    pub fn out_edges(&self, id: NodeId) -> Vec<EdgeRef> {
        self.edges().into_iter().filter(|e| e.from == id).collect()
    }

    pub fn is_identity(&self, e: EdgeRef) -> bool {
        self.nodes[e.to].identity_skip == Some(e.slot)
    }

    /// Layer-wise chain: P̌^[j] = {j−1} for all j.
    pub fn is_chain(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(j, n)| n.antecedents == vec![j as isize - 1])
    }

    /// All input → output paths, as lists of nodes (excluding −1).
    pub fn paths(&self) -> Vec<Vec<usize>> {
        fn walk(sk: &Skeleton, at: NodeId, acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            for e in sk.out_edges(at) {
                acc.push(e.to);
                if e.to == sk.d() - 1 {
                    out.push(acc.clone());
                } else {
                    walk(sk, e.to as isize, acc, out);
                }
                acc.pop();
            }
        }
        let mut out = Vec::new();
        walk(self, INPUT, &mut Vec::new(), &mut out);
        out
    }
}

/// Feedforward ReLU chain with input width `n` and node fan-outs `widths`.
/// First and last edges are linear, ReLU elsewhere, γ = 0.
pub fn build_feedforward_relu(n: usize, widths: &[usize]) -> Result<Skeleton> {
    let d = widths.len();
    let nodes = widths
        .iter()
        .enumerate()
        .map(|(j, &h)| NodeSpec {
            fanout: h,
            antecedents: vec![j as isize - 1],
            activations: vec![if j == 0 || j + 1 == d {
                Activation::Linear
            } else {
                Activation::Relu
            }],
            identity_skip: None,
        })
        .collect();
    Skeleton::new(n, 0.0, nodes)
}

/// ResNet: D even, odd nodes take {j−1, j−2} with a linear identity skip
/// so W^[j] = [W_C; I].
pub fn build_resnet(n: usize, widths: &[usize]) -> Result<Skeleton> {
    let d = widths.len();
    if d == 0 || d % 2 == 1 {
        return Err(NkError::Skeleton(format!("ResNet needs an even node count, got {d}")));
    }
    let main_act = |j: usize| {
        if j == 0 || j + 1 == d {
            Activation::Linear
        } else {
            Activation::Relu
        }
    };
    let mut nodes = Vec::with_capacity(d);
    for (j, &h) in widths.iter().enumerate() {
        if j % 2 == 0 {
            nodes.push(NodeSpec {
                fanout: h,
                antecedents: vec![j as isize - 1],
                activations: vec![main_act(j)],
                identity_skip: None,
            });
        } else {
            let skip_from = j as isize - 2;
            let skip_w = if skip_from == INPUT { n } else { widths[skip_from as usize] };
            if skip_w != h {
                return Err(NkError::Skeleton(format!(
                    "ResNet skip {skip_from}->{j}: width {skip_w} != {h}"
                )));
            }
            nodes.push(NodeSpec {
                fanout: h,
                antecedents: vec![j as isize - 1, skip_from],
                activations: vec![main_act(j), Activation::Linear],
                identity_skip: Some(1),
            });
        }
    }
    Skeleton::new(n, 0.0, nodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders() {
        let ff = build_feedforward_relu(2, &[2, 3, 1]).unwrap();
        assert_eq!(ff.d(), 3);
        assert!(ff.is_chain());
        assert!((0..3).all(|j| ff.in_degree(j) == 1));
        assert_eq!(ff.nodes[1].activations[0], Activation::Relu);
        assert_eq!(ff.nodes[2].activations[0], Activation::Linear);
        let rn = build_resnet(3, &[3, 3, 3, 3]).unwrap();
        assert_eq!(rn.in_degree(1), 2);
        assert_eq!(rn.in_degree(3), 2);
        assert_eq!(rn.in_degree(2), 1);
        assert_eq!(rn.paths().len(), 4);
        assert!(build_resnet(3, &[3, 2, 3, 3]).is_err());
        assert!(build_resnet(3, &[3, 3, 3]).is_err());
    }

    #[test]
    fn validation() {
        let node = |a: Vec<isize>| NodeSpec {
            fanout: 1,
            antecedents: a.clone(),
            activations: a.iter().map(|_| Activation::Linear).collect(),
            identity_skip: None,
        };
        assert!(Skeleton::new(1, 0.0, vec![node(vec![-1]), node(vec![1])]).is_err());
        // node 0 never reaches the output
        assert!(Skeleton::new(1, 0.0, vec![node(vec![-1]), node(vec![-1])]).is_err());
        let sk = Skeleton::new(1, 0.0, vec![node(vec![-1]), node(vec![0, -1])]).unwrap();
        let js = serde_json::to_string(&sk).unwrap();
        assert_eq!(Skeleton::from_json(&js).unwrap(), sk);
    }
}
