//! Scale schedules: the ordered list of token-grid resolutions.

use crate::error::{Error, Result};

/// Ordered token-grid sizes, coarse to fine. The first entry is always
/// `(1, 1)` and the last one equals the latent resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    resolutions: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(resolutions: Vec<(usize, usize)>) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::Schedule("schedule must have at least one scale".into()));
        }
        if resolutions[0] != (1, 1) {
            return Err(Error::Schedule(format!(
                "first scale must be (1,1), got {:?}",
                resolutions[0]
            )));
        }
        for win in resolutions.windows(2) {
            let (a, b) = (win[0], win[1]);
            if b.0 < a.0 || b.1 < a.1 {
                return Err(Error::Schedule(format!(
                    "resolutions must be non-decreasing, got {a:?} then {b:?}"
                )));
            }
            if a == b {
                return Err(Error::Schedule(format!("duplicate scale {a:?}")));
            }
        }
        Ok(ScaleSchedule { resolutions })
    }

    pub fn n_scales(&self) -> usize {
        self.resolutions.len()
    }

    pub fn resolution(&self, i: usize) -> (usize, usize) {
        self.resolutions[i]
    }

    pub fn final_hw(&self) -> (usize, usize) {
        *self.resolutions.last().unwrap()
    }

    pub fn resolutions(&self) -> &[(usize, usize)] {
        &self.resolutions
    }

    /// Token count of scale `i`.
    pub fn tokens_at(&self, i: usize) -> usize {
        let (h, w) = self.resolutions[i];
        h * w
    }

    /// Token count over all scales.
    pub fn total_tokens(&self) -> usize {
        (0..self.n_scales()).map(|i| self.tokens_at(i)).sum()
    }

    /// Token count over scales `0..n` (exclusive).
    pub fn tokens_before(&self, n: usize) -> usize {
        (0..n).map(|i| self.tokens_at(i)).sum()
    }
}

/// Build an `n_scales`-step schedule from `(1,1)` to `final_hw` by rounded
/// geometric interpolation, nudged to keep every step distinct.
///
/// Each axis is interpolated as `extent^(i/(n-1))` and rounded; when the axis
/// extent allows (extent >= n_scales) a forward/backward fix-up enforces
/// strict growth on that axis. Deterministic.
pub fn build_scale_schedule(n_scales: usize, final_hw: (usize, usize)) -> Result<ScaleSchedule> {
    let (fh, fw) = final_hw;
    if n_scales == 0 {
        return Err(Error::Schedule("n_scales must be >= 1".into()));
    }
    if fh == 0 || fw == 0 {
        return Err(Error::Schedule("final resolution must be >= 1 on both axes".into()));
    }
    if n_scales == 1 {
        if final_hw != (1, 1) {
            return Err(Error::Schedule(format!(
                "a 1-scale schedule requires final resolution (1,1), got {final_hw:?}"
            )));
        }
        return ScaleSchedule::new(vec![(1, 1)]);
    }
    if n_scales > fh.max(fw) {
        return Err(Error::Schedule(format!(
            "{n_scales} scales exceed the {} distinct sizes available up to {final_hw:?}",
            fh.max(fw)
        )));
    }

    let axis = |extent: usize| -> Vec<usize> {
        let mut sizes: Vec<usize> = (0..n_scales)
            .map(|i| {
                let t = i as f64 / (n_scales - 1) as f64;
                (extent as f64).powf(t).round() as usize
            })
            .collect();
        sizes[0] = 1;
        *sizes.last_mut().unwrap() = extent;
        if extent >= n_scales {
            for i in 1..n_scales {
                if sizes[i] <= sizes[i - 1] {
                    sizes[i] = sizes[i - 1] + 1;
                }
            }
            for i in (0..n_scales - 1).rev() {
                if sizes[i] >= sizes[i + 1] {
                    sizes[i] = sizes[i + 1] - 1;
                }
            }
        }
        sizes
    };

    let hs = axis(fh);
    let ws = axis(fw);
    let resolutions: Vec<(usize, usize)> = hs.into_iter().zip(ws).collect();
    ScaleSchedule::new(resolutions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_scale() {
        let s = build_scale_schedule(1, (1, 1)).unwrap();
        assert_eq!(s.resolutions(), &[(1, 1)]);
    }

    #[test]
    fn five_scales_to_16_are_powers_of_two() {
        // Geometric interpolation lands exactly on 1, 2, 4, 8, 16.
        let s = build_scale_schedule(5, (16, 16)).unwrap();
        assert_eq!(s.resolutions(), &[(1, 1), (2, 2), (4, 4), (8, 8), (16, 16)]);
    }

    #[test]
    fn ten_scales_to_16_monotone_distinct() {
        let s = build_scale_schedule(10, (16, 16)).unwrap();
        assert_eq!(s.n_scales(), 10);
        assert_eq!(s.resolution(0), (1, 1));
        assert_eq!(s.final_hw(), (16, 16));
        for w in s.resolutions().windows(2) {
            assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1, "{:?}", s.resolutions());
        }
    }

    #[test]
    fn rectangular_schedule_allows_repeats_on_short_axis() {
        let s = build_scale_schedule(8, (16, 4)).unwrap();
        assert_eq!(s.final_hw(), (16, 4));
        for w in s.resolutions().windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            assert_ne!(w[0], w[1]);
        }
    }

    #[test]
    fn too_many_scales_is_an_error() {
        assert!(matches!(
            build_scale_schedule(10, (4, 4)),
            Err(Error::Schedule(_))
        ));
    }

    #[test]
    fn token_counts() {
        let s = build_scale_schedule(3, (4, 4)).unwrap();
        assert_eq!(s.resolutions(), &[(1, 1), (2, 2), (4, 4)]);
        assert_eq!(s.total_tokens(), 1 + 4 + 16);
        assert_eq!(s.tokens_before(2), 5);
    }
}
