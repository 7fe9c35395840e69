//! Precomputed rotation tables for 2-D rotary position embeddings.
//!
//! A [`RopePlan`] is built once per (position list, head layout) pair and then
//! applied to query/key tensors on the tape. Coordinates are supplied already
//! normalized; the plan only turns them into per-pair angles.
//!
//! Layout inside each head: the first half of the head dimensions rotates with
//! the row coordinate, the second half with the column coordinate. Within each
//! half, consecutive dimension pairs (2k, 2k+1) rotate by `coord * theta^(-k/(d/4))`.

use crate::error::{Error, Result};

/// Rotation table: per token, `head_dim/2` (cos, sin) pairs.
#[derive(Debug, Clone)]
pub struct RopePlan {
    head_dim: usize,
    tokens: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopePlan {
    /// `coords[t] = (u, v)` are the normalized row/column coordinates of token `t`.
    pub fn new(coords: &[(f64, f64)], head_dim: usize, theta: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "rope head_dim {head_dim} must be a positive multiple of 4"
            )));
        }
        let pairs_per_axis = head_dim / 4;
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(coords.len() * pairs);
        let mut sin = Vec::with_capacity(coords.len() * pairs);
        for &(u, v) in coords {
            for axis_coord in [u, v] {
                for k in 0..pairs_per_axis {
                    let freq = theta.powf(-(k as f64) / pairs_per_axis as f64);
                    let angle = axis_coord * freq;
                    cos.push(angle.cos());
                    sin.push(angle.sin());
                }
            }
        }
        Ok(RopePlan {
            head_dim,
            tokens: coords.len(),
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// (cos, sin) for pair `p` of token `t`; pairs are indexed 0..head_dim/2.
    #[inline]
    pub fn angle(&self, t: usize, p: usize) -> (f64, f64) {
        let i = t * (self.head_dim / 2) + p;
        (self.cos[i], self.sin[i])
    }
}
