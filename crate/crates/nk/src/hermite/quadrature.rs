//! Gauss–Hermite rules for the standard normal weight.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, SymmetricEigen};
use once_cell::sync::Lazy;

/// Nodes and weights with Σ w_i g(z_i) ≈ E[g(Z)], Z ~ N(0, 1).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

static CACHE: Lazy<Mutex<HashMap<usize, Arc<GaussHermite>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

/// Golub–Welsch rule with `n` nodes (cached).
pub fn gauss_hermite(n: usize) -> Arc<GaussHermite> {
    if let Some(q) = CACHE.lock().unwrap().get(&n) {
        return q.clone();
    }
    let q = Arc::new(golub_welsch(n));
    CACHE.lock().unwrap().insert(n, q.clone());
    q
}

fn golub_welsch(n: usize) -> GaussHermite {
    assert!(n >= 1);
    // Jacobi matrix of the probabilists' recurrence He_{k+1} = z He_k − k He_{k−1}.
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));
    // Symmetrize: the rule is exactly symmetric about 0.
    for i in 0..n / 2 {
        let z = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    // Newton polish on h_n, then Christoffel weights 1/Σ_{k<n} h_k(z)², which
    // stay accurate at the extreme nodes where eigenvector entries do not.
    let mut weights = Vec::with_capacity(n);
    for z in nodes.iter_mut() {
        for _ in 0..3 {
            let (hn, hn1, _) = normalized_tail(n, *z);
            let d = (n as f64).sqrt() * hn1;
            if d != 0.0 && d.is_finite() && hn.is_finite() {
                let step = hn / d;
                if step.abs() < 1e-6 * (1.0 + z.abs()) {
                    *z -= step;
                }
            }
        }
        weights.push(normalized_tail(n, *z).2);
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    GaussHermite { nodes, weights }
}

/// (h_n(z), h_{n−1}(z), 1/Σ_{k<n} h_k(z)²); the weight is 0 once the sum overflows.
fn normalized_tail(n: usize, z: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sum = 0.0;
    for k in 0..n {
        sum += cur * cur;
        if !(sum < 1e300) {
            return (f64::INFINITY, f64::INFINITY, 0.0);
        }
        let next = (z * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev, 1.0 / sum)
}

impl GaussHermite {
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}
