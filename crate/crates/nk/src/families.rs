//! Random instance generators for tests, benches and the CLI.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::hermite::Activation;
use crate::lenk::Dataset;
use crate::netgraph::{NodeSpec, Parameters, Skeleton};

/// Size limits of a random family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyOptions {
    pub max_depth: usize,
    pub max_width: usize,
    pub max_degree: usize,
    pub gamma: f64,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        FamilyOptions {
            max_depth: 3,
            max_width: 3,
            max_degree: 3,
            gamma: 0.5,
        }
    }
}

/// Polynomial of the given degree with coefficients in [−½, ½] and
/// leading coefficient at least 0.1 in magnitude.
pub fn random_polynomial(rng: &mut ChaCha8Rng, degree: usize) -> Activation {
    let mut c: Vec<f64> = (0..=degree).map(|_| rng.random_range(-0.5..0.5)).collect();
    let lead = c[degree];
    if lead.abs() < 0.1 {
        c[degree] = if lead < 0.0 { -0.1 } else { 0.1 } + lead;
    }
    Activation::Polynomial(c)
}

fn random_act(rng: &mut ChaCha8Rng, opts: &FamilyOptions) -> Activation {
    let deg = rng.random_range(1..=opts.max_degree.max(1));
    random_polynomial(rng, deg)
}

fn sizes(rng: &mut ChaCha8Rng, opts: &FamilyOptions) -> (usize, Vec<usize>) {
    let d = rng.random_range(1..=opts.max_depth.max(1));
    let n = rng.random_range(1..=opts.max_width.max(1));
    let widths = (0..d).map(|_| rng.random_range(1..=opts.max_width.max(1))).collect();
    (n, widths)
}

/// Layer-wise chain with random polynomial activations.
pub fn random_poly_chain(rng: &mut ChaCha8Rng, opts: &FamilyOptions) -> Result<Skeleton> {
    let (n, widths) = sizes(rng, opts);
    let nodes = widths
        .iter()
        .enumerate()
        .map(|(j, &h)| NodeSpec {
            fanout: h,
            antecedents: vec![j as isize - 1],
            activations: vec![random_act(rng, opts)],
            identity_skip: None,
        })
        .collect();
    Skeleton::new(n, opts.gamma, nodes)
}

/// DAG whose node j always reads j−1 and each earlier node (or the input)
/// with probability 0.4.
pub fn random_poly_dag(rng: &mut ChaCha8Rng, opts: &FamilyOptions) -> Result<Skeleton> {
    let (n, widths) = sizes(rng, opts);
    let mut nodes = Vec::with_capacity(widths.len());
    for (j, &h) in widths.iter().enumerate() {
        let mut ante = vec![j as isize - 1];
        for a in -1..(j as isize - 1) {
            if rng.random_bool(0.4) {
                ante.push(a);
            }
        }
        let activations = ante.iter().map(|_| random_act(rng, opts)).collect();
        nodes.push(NodeSpec {
            fanout: h,
            antecedents: ante,
            activations,
            identity_skip: None,
        });
    }
    Skeleton::new(n, opts.gamma, nodes)
}

/// Two-layer chain n=3 → 3 → 2 with a linear input edge and a quadratic
/// hidden edge τ(ζ) = 0.1 + 0.5ζ + 0.7ζ², γ = 0.3.
pub fn poly2_fixture() -> Skeleton {
    let nodes = vec![
        NodeSpec {
            fanout: 3,
            antecedents: vec![-1],
            activations: vec![Activation::Linear],
            identity_skip: None,
        },
        NodeSpec {
            fanout: 2,
            antecedents: vec![0],
            activations: vec![Activation::Polynomial(vec![0.1, 0.5, 0.7])],
            identity_skip: None,
        },
    ];
    Skeleton::new(3, 0.3, nodes).expect("fixture skeleton")
}

/// Gaussian weights with standard deviation `scale/√(fan-in)`, biases with
/// standard deviation `scale`; identity blocks set to I.
pub fn random_params(rng: &mut ChaCha8Rng, sk: &Skeleton, scale: f64) -> Parameters {
    let mut p = Parameters::with_identities(sk);
    for j in 0..sk.d() {
        let (r, c) = p.w[j].shape();
        let s = scale / (r as f64).sqrt();
        let g = DMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        match sk.nodes[j].identity_skip {
            None => p.w[j] = g,
            Some(slot) => {
                let off = sk.block_offset(j, slot);
                let keep = p.w[j].view((off, 0), (c, c)).into_owned();
                p.w[j] = g;
                p.w[j].view_mut((off, 0), (c, c)).copy_from(&keep);
            }
        }
        p.b[j] = DVector::from_fn(c, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    }
    p
}

/// Uniform direction with norm uniform in [0, radius].
pub fn random_input(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let nv = v.norm().max(f64::MIN_POSITIVE);
    v * (radius * rng.random::<f64>() / nv)
}

/// N inputs in the unit ball and Gaussian targets with deviation `target_scale`.
pub fn random_dataset(rng: &mut ChaCha8Rng, sk: &Skeleton, n: usize, target_scale: f64) -> Result<Dataset> {
    let xs = (0..n).map(|_| random_input(rng, sk.n, 1.0)).collect();
    let ys = (0..n)
        .map(|_| DVector::from_fn(sk.m(), |_, _| target_scale * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Dataset::new(xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generators_respect_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let opts = FamilyOptions::default();
        for _ in 0..50 {
            let sk = random_poly_dag(&mut rng, &opts).unwrap();
            assert!(sk.d() <= 3);
            for node in &sk.nodes {
                assert!(node.fanout <= 3);
                for a in &node.activations {
                    assert!(matches!(a.degree(), Some(1..=3)));
                }
            }
            let ch = random_poly_chain(&mut rng, &opts).unwrap();
            assert!(ch.is_chain());
            let th = random_params(&mut rng, &ch, 0.5);
            th.check(&ch).unwrap();
            assert!(random_input(&mut rng, 3, 1.0).norm() <= 1.0);
        }
    }
}
