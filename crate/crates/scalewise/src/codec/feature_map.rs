//! Channel-major latent grids.

use crate::error::{Error, Result};
use crate::math::Tensor;

/// `C × H × W` real-valued grid, channel-major row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(Error::Dimension {
                op: "feature_map_new",
                lhs: vec![channels, h, w],
                rhs: vec![data.len()],
            });
        }
        Ok(FeatureMap {
            channels,
            h,
            w,
            data,
        })
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            channels,
            h,
            w,
            data: vec![0.0; channels * h * w],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// One channel's `H × W` plane.
    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    /// The channel vector at one spatial position.
    pub fn position_vector(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }

    /// Flatten to a `(H*W, C)` matrix in raster order, the layout the
    /// transformer consumes.
    pub fn to_rows(&self) -> Tensor<f64> {
        let mut data = Vec::with_capacity(self.h * self.w * self.channels);
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..self.channels {
                    data.push(self.at(c, y, x));
                }
            }
        }
        Tensor::mat(self.h * self.w, self.channels, data).expect("row layout")
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mse(&self, other: &FeatureMap) -> Result<f64> {
        if (self.channels, self.h, self.w) != (other.channels, other.h, other.w) {
            return Err(Error::Dimension {
                op: "feature_map_mse",
                lhs: vec![self.channels, self.h, self.w],
                rhs: vec![other.channels, other.h, other.w],
            });
        }
        let n = self.data.len().max(1);
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if (self.channels, self.h, self.w) != (other.channels, other.h, other.w) {
            return Err(Error::Dimension {
                op: "feature_map_sub",
                lhs: vec![self.channels, self.h, self.w],
                rhs: vec![other.channels, other.h, other.w],
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        FeatureMap::new(self.channels, self.h, self.w, data)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        if (self.channels, self.h, self.w) != (other.channels, other.h, other.w) {
            return Err(Error::Dimension {
                op: "feature_map_add",
                lhs: vec![self.channels, self.h, self.w],
                rhs: vec![other.channels, other.h, other.w],
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}
