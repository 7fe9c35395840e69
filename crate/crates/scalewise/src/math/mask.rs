//! Boolean attention mask over a token sequence.

use crate::error::{Error, Result};

/// Row-major boolean matrix; `true` means "query row may attend to key column".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Dimension {
                op: "mask_new",
                lhs: vec![rows, cols],
                rhs: vec![allowed.len()],
            });
        }
        Ok(MaskMatrix {
            rows,
            cols,
            allowed,
        })
    }

    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        MaskMatrix {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        MaskMatrix {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }
}
