//! Weights, biases and their serialization.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::skeleton::Skeleton;
use crate::error::{NkError, Result};

/// Θ = {W^[j], b^[j]}. W^[j] is Ȟ^[j]×H^[j] with row blocks per antecedent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub w: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

impl Parameters {
    /// All-zero parameters (identity blocks included).
    pub fn zeros(sk: &Skeleton) -> Self {
        Parameters {
            w: (0..sk.d())
                .map(|j| DMatrix::zeros(sk.fan_in(j), sk.width(j as isize)))
                .collect(),
            b: (0..sk.d()).map(|j| DVector::zeros(sk.width(j as isize))).collect(),
        }
    }

    /// Zeros with identity skip blocks set to I.
    pub fn with_identities(sk: &Skeleton) -> Self {
        let mut p = Self::zeros(sk);
        p.set_identities(sk);
        p
    }

    pub(crate) fn set_identities(&mut self, sk: &Skeleton) {
        for (j, node) in sk.nodes.iter().enumerate() {
            if let Some(s) = node.identity_skip {
                let off = sk.block_offset(j, s);
                let h = node.fanout;
                let mut blk = self.w[j].view_mut((off, 0), (h, h));
                blk.fill(0.0);
                blk.fill_diagonal(1.0);
            }
        }
    }

    /// Zeroes identity blocks, for step deltas where those blocks are fixed.
    pub fn clear_identities(&mut self, sk: &Skeleton) {
        for (j, node) in sk.nodes.iter().enumerate() {
            if let Some(s) = node.identity_skip {
                let off = sk.block_offset(j, s);
                let h = node.fanout;
                self.w[j].view_mut((off, 0), (h, h)).fill(0.0);
            }
        }
    }

    pub fn check(&self, sk: &Skeleton) -> Result<()> {
        if self.w.len() != sk.d() || self.b.len() != sk.d() {
            return Err(NkError::Shape(format!(
                "parameters have {} weight and {} bias blocks, skeleton has {} nodes",
                self.w.len(),
                self.b.len(),
                sk.d()
            )));
        }
        for j in 0..sk.d() {
            let (r, c) = self.w[j].shape();
            if r != sk.fan_in(j) || c != sk.width(j as isize) || self.b[j].len() != c {
                return Err(NkError::Shape(format!(
                    "node {j}: W is {r}x{c}, b has {}; expected {}x{}",
                    self.b[j].len(),
                    sk.fan_in(j),
                    sk.width(j as isize)
                )));
            }
            if self.w[j].iter().chain(self.b[j].iter()).any(|v| !v.is_finite()) {
                return Err(NkError::NonFinite(format!("parameters of node {j}")));
            }
        }
        Ok(())
    }

    /// Block W^[ǰ,j] for antecedent `slot`.
    pub fn block(&self, sk: &Skeleton, j: usize, slot: usize) -> DMatrix<f64> {
        let off = sk.block_offset(j, slot);
        let h = sk.width(sk.nodes[j].antecedents[slot]);
        self.w[j].rows(off, h).into_owned()
    }

    pub fn add(&self, other: &Parameters) -> Parameters {
        Parameters {
            w: self.w.iter().zip(&other.w).map(|(a, b)| a + b).collect(),
            b: self.b.iter().zip(&other.b).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, t: f64) -> Parameters {
        Parameters {
            w: self.w.iter().map(|a| a * t).collect(),
            b: self.b.iter().map(|a| a * t).collect(),
        }
    }

    /// Euclidean norm over all entries.
    pub fn frobenius(&self) -> f64 {
        self.w
            .iter()
            .map(|m| m.norm_squared())
            .chain(self.b.iter().map(|v| v.norm_squared()))
            .sum::<f64>()
            .sqrt()
    }

    /// Flat little-endian f64 blob (row-major per block, W then b per node) plus JSON manifest.
    pub fn save(&self, bin: &Path, manifest: &Path) -> Result<()> {
        let io = |e: std::io::Error| NkError::Parse(e.to_string());
        let mut blocks = Vec::new();
        let mut buf: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for j in 0..self.w.len() {
            let (r, c) = self.w[j].shape();
            blocks.push(BlockInfo { name: format!("W{j}"), rows: r, cols: c, offset });
            for i in 0..r {
                for k in 0..c {
                    buf.extend_from_slice(&self.w[j][(i, k)].to_le_bytes());
                }
            }
            offset += r * c;
            let n = self.b[j].len();
            blocks.push(BlockInfo { name: format!("b{j}"), rows: n, cols: 1, offset });
            for v in self.b[j].iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            offset += n;
        }
        std::fs::File::create(bin).map_err(io)?.write_all(&buf).map_err(io)?;
        let m = Manifest { dtype: "f64le".into(), layout: "row-major".into(), blocks };
        std::fs::write(manifest, serde_json::to_string_pretty(&m).unwrap()).map_err(io)?;
        Ok(())
    }

    pub fn load(bin: &Path, manifest: &Path) -> Result<Parameters> {
        let io = |e: std::io::Error| NkError::Parse(e.to_string());
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest).map_err(io)?)
            .map_err(|e| NkError::Parse(e.to_string()))?;
        let mut raw = Vec::new();
        std::fs::File::open(bin).map_err(io)?.read_to_end(&mut raw).map_err(io)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut w = Vec::new();
        let mut b = Vec::new();
        for blk in &m.blocks {
            let end = blk.offset + blk.rows * blk.cols;
            if end > vals.len() {
                return Err(NkError::Shape(format!("block {} past end of data", blk.name)));
            }
            let data = &vals[blk.offset..end];
            if blk.name.starts_with('W') {
                w.push(DMatrix::from_row_slice(blk.rows, blk.cols, data));
            } else {
                b.push(DVector::from_column_slice(data));
            }
        }
        Ok(Parameters { w, b })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    layout: String,
    blocks: Vec<BlockInfo>,
}
