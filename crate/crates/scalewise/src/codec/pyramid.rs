//! Residual-quantization pyramid coding.
//!
//! Encoding walks the schedule coarse to fine, at each scale area-downsampling
//! the residual, snapping every position to its nearest code, bilinearly
//! upsampling the quantized grid back to full resolution and subtracting it.
//! Decoding is the matching telescoping sum.

use super::codebook::CodeBook;
use super::feature_map::FeatureMap;
use super::resample::{area_downsample, bilinear_upsample};
use super::schedule::ScaleSchedule;
use crate::error::{Error, Result};
use crate::rng;

/// Per-scale integer grids indexing the codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPyramid {
    grids: Vec<TokenGrid>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != h * w {
            return Err(Error::Dimension {
                op: "token_grid_new",
                lhs: vec![h, w],
                rhs: vec![indices.len()],
            });
        }
        Ok(TokenGrid { h, w, indices })
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.indices[y * self.w + x]
    }
}

impl TokenPyramid {
    pub fn new(grids: Vec<TokenGrid>) -> Self {
        TokenPyramid { grids }
    }

    pub fn n_scales(&self) -> usize {
        self.grids.len()
    }

    pub fn grid(&self, i: usize) -> &TokenGrid {
        &self.grids[i]
    }

    pub fn grids(&self) -> &[TokenGrid] {
        &self.grids
    }

    /// All indices of one scale as usize, raster order.
    pub fn scale_indices(&self, i: usize) -> Vec<usize> {
        self.grids[i].indices.iter().map(|&v| v as usize).collect()
    }

    /// Total tokens across scales.
    pub fn total_tokens(&self) -> usize {
        self.grids.iter().map(|g| g.indices.len()).sum()
    }

    /// Fraction of positions whose token differs from `other`'s.
    pub fn token_diff_fraction(&self, other: &TokenPyramid) -> Result<f64> {
        if self.grids.len() != other.grids.len() {
            return Err(Error::Codec("pyramids have different scale counts".into()));
        }
        let mut diff = 0usize;
        let mut total = 0usize;
        for (a, b) in self.grids.iter().zip(&other.grids) {
            if (a.h, a.w) != (b.h, b.w) {
                return Err(Error::Codec("pyramids have different grid shapes".into()));
            }
            total += a.indices.len();
            diff += a
                .indices
                .iter()
                .zip(&b.indices)
                .filter(|(x, y)| x != y)
                .count();
        }
        Ok(diff as f64 / total.max(1) as f64)
    }

    fn matches_schedule(&self, sched: &ScaleSchedule) -> Result<()> {
        if self.grids.len() != sched.n_scales() {
            return Err(Error::Codec(format!(
                "pyramid has {} scales, schedule has {}",
                self.grids.len(),
                sched.n_scales()
            )));
        }
        for (i, g) in self.grids.iter().enumerate() {
            if (g.h, g.w) != sched.resolution(i) {
                return Err(Error::Codec(format!(
                    "grid {i} is {}x{}, schedule says {:?}",
                    g.h,
                    g.w,
                    sched.resolution(i)
                )));
            }
        }
        Ok(())
    }
}

/// The embedding of one token grid: codebook vectors placed on the grid.
fn embed_grid(grid: &TokenGrid, cb: &CodeBook) -> Result<FeatureMap> {
    let mut out = FeatureMap::zeros(cb.channels(), grid.h, grid.w);
    for y in 0..grid.h {
        for x in 0..grid.w {
            let idx = grid.at(y, x) as usize;
            if idx >= cb.vocab() {
                return Err(Error::Codec(format!(
                    "token index {idx} out of vocabulary {}",
                    cb.vocab()
                )));
            }
            for (c, v) in cb.vector(idx).iter().enumerate() {
                out.set(c, y, x, *v);
            }
        }
    }
    Ok(out)
}

/// Residual-quantize a latent into a token pyramid.
pub fn encode_pyramid(
    f: &FeatureMap,
    cb: &CodeBook,
    sched: &ScaleSchedule,
) -> Result<TokenPyramid> {
    let (grids, _) = encode_with_residuals(f, cb, sched)?;
    Ok(grids)
}

/// As [`encode_pyramid`], also returning `‖residual‖₂` after every scale.
/// The first entry is the norm of the input itself.
pub fn encode_with_residuals(
    f: &FeatureMap,
    cb: &CodeBook,
    sched: &ScaleSchedule,
) -> Result<(TokenPyramid, Vec<f64>)> {
    if cb.vocab() == 0 {
        return Err(Error::Usage("empty codebook".into()));
    }
    if f.channels() != cb.channels() {
        return Err(Error::Dimension {
            op: "encode_pyramid",
            lhs: vec![f.channels()],
            rhs: vec![cb.channels()],
        });
    }
    if f.hw() != sched.final_hw() {
        return Err(Error::Dimension {
            op: "encode_pyramid",
            lhs: vec![f.h(), f.w()],
            rhs: vec![sched.final_hw().0, sched.final_hw().1],
        });
    }
    if !f.is_finite() {
        return Err(Error::Numeric { op: "encode_pyramid" });
    }

    let (fh, fw) = sched.final_hw();
    let mut residual = f.clone();
    let mut norms = vec![residual.l2_norm()];
    let mut grids = Vec::with_capacity(sched.n_scales());
    for i in 0..sched.n_scales() {
        let (h, w) = sched.resolution(i);
        let down = area_downsample(&residual, h, w);
        let mut indices = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                indices.push(cb.nearest(&down.position_vector(y, x)) as u32);
            }
        }
        let grid = TokenGrid::new(h, w, indices)?;
        let up = bilinear_upsample(&embed_grid(&grid, cb)?, fh, fw);
        residual = residual.sub(&up)?;
        if !residual.is_finite() {
            return Err(Error::Numeric { op: "encode_pyramid" });
        }
        norms.push(residual.l2_norm());
        grids.push(grid);
    }
    Ok((TokenPyramid::new(grids), norms))
}

/// The channel vectors actually quantized during encoding: the area-downsampled
/// residual at every scale and position. Codebook fitting trains on these.
pub fn encode_residual_vectors(
    f: &FeatureMap,
    cb: &CodeBook,
    sched: &ScaleSchedule,
) -> Result<Vec<Vec<f64>>> {
    let (fh, fw) = sched.final_hw();
    let mut residual = f.clone();
    let mut out = Vec::new();
    for i in 0..sched.n_scales() {
        let (h, w) = sched.resolution(i);
        let down = area_downsample(&residual, h, w);
        let mut indices = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let v = down.position_vector(y, x);
                indices.push(cb.nearest(&v) as u32);
                out.push(v);
            }
        }
        let grid = TokenGrid::new(h, w, indices)?;
        let up = bilinear_upsample(&embed_grid(&grid, cb)?, fh, fw);
        residual = residual.sub(&up)?;
    }
    Ok(out)
}

/// Sum the bilinearly upsampled embeddings of every scale.
pub fn decode_pyramid(
    p: &TokenPyramid,
    cb: &CodeBook,
    sched: &ScaleSchedule,
) -> Result<FeatureMap> {
    p.matches_schedule(sched)?;
    let (fh, fw) = sched.final_hw();
    let mut out = FeatureMap::zeros(cb.channels(), fh, fw);
    for grid in p.grids() {
        let up = bilinear_upsample(&embed_grid(grid, cb)?, fh, fw);
        out.add_assign(&up)?;
    }
    Ok(out)
}

/// Partial reconstruction from the first `upto` scales, resampled to the
/// resolution of scale `upto + 1` (or the final resolution when `upto == N`).
/// `upto == 0` yields the zero map at the first scale's resolution.
///
/// This is the model input at scale `upto + 1` during both training and
/// sampling.
pub fn accumulate_prefix(
    p: &TokenPyramid,
    upto: usize,
    cb: &CodeBook,
    sched: &ScaleSchedule,
) -> Result<FeatureMap> {
    if upto > sched.n_scales() {
        return Err(Error::Range(format!(
            "accumulate_prefix upto {upto} exceeds {} scales",
            sched.n_scales()
        )));
    }
    if p.grids().len() < upto {
        return Err(Error::Codec(format!(
            "pyramid has only {} scales, need {upto}",
            p.grids().len()
        )));
    }
    for (i, g) in p.grids().iter().take(upto).enumerate() {
        if (g.h, g.w) != sched.resolution(i) {
            return Err(Error::Codec(format!(
                "grid {i} is {}x{}, schedule says {:?}",
                g.h,
                g.w,
                sched.resolution(i)
            )));
        }
    }

    let target = if upto == sched.n_scales() {
        sched.final_hw()
    } else {
        sched.resolution(upto)
    };
    if upto == 0 {
        return Ok(FeatureMap::zeros(cb.channels(), target.0, target.1));
    }

    let (fh, fw) = sched.final_hw();
    let mut sum = FeatureMap::zeros(cb.channels(), fh, fw);
    for grid in &p.grids()[..upto] {
        let up = bilinear_upsample(&embed_grid(grid, cb)?, fh, fw);
        sum.add_assign(&up)?;
    }
    Ok(area_downsample(&sum, target.0, target.1))
}

/// Add seeded i.i.d. Gaussian noise of standard deviation `sigma`.
pub fn perturb_latents(f: &FeatureMap, sigma: f64, seed: u64) -> Result<FeatureMap> {
    if sigma < 0.0 {
        return Err(Error::Usage(format!("sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(f.clone());
    }
    let mut rng = rng::stream(seed, "perturb-latents");
    let mut out = f.clone();
    for v in out.data_mut() {
        *v += sigma * rng::normal(&mut rng);
    }
    Ok(out)
}
