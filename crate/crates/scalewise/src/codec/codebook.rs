//! Shared codebook and its k-means fitting loop.

use rand::Rng;

use super::feature_map::FeatureMap;
use super::pyramid::{decode_pyramid, encode_residual_vectors};
use super::schedule::ScaleSchedule;
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::{logging, rng};

/// `V × C` matrix of code vectors shared across all scales.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeBook {
    vectors: Tensor<f64>,
}

impl CodeBook {
    pub fn new(vectors: Tensor<f64>) -> Result<Self> {
        if !vectors.is_mat() || vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::Codebook(format!(
                "codebook must be a non-empty V x C matrix, got shape {:?}",
                vectors.shape()
            )));
        }
        vectors
            .ensure_finite("codebook")
            .map_err(|_| Error::Codebook("codebook entries must be finite".into()))?;
        let v = vectors.rows();
        for i in 0..v {
            for j in i + 1..v {
                if vectors.row(i) == vectors.row(j) {
                    return Err(Error::Codebook(format!("duplicate code vectors {i} and {j}")));
                }
            }
        }
        Ok(CodeBook { vectors })
    }

    pub fn vocab(&self) -> usize {
        self.vectors.rows()
    }

    pub fn channels(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn vectors(&self) -> &Tensor<f64> {
        &self.vectors
    }

    /// Index of the nearest code by squared L2 distance; ties break to the
    /// lowest index.
    pub fn nearest(&self, point: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for i in 0..self.vocab() {
            let d = sq_dist(self.vector(i), point);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Settings for [`fit_codebook`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub vocab: usize,
    /// Lloyd iterations inside each k-means fit.
    pub kmeans_iters: usize,
    /// Alternating harvest/fit rounds.
    pub rounds: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            vocab: 24,
            kmeans_iters: 25,
            rounds: 3,
            seed: 0,
        }
    }
}

/// Fit trace: effective reconstruction MSE after each round. Non-increasing,
/// because a round that fails to improve is discarded.
#[derive(Debug, Clone)]
pub struct FitTrace {
    pub round_mse: Vec<f64>,
}

/// Fit a codebook by alternating residual harvesting and seeded k-means.
///
/// Round 1 clusters the area-downsampled latents themselves; each later round
/// re-harvests the vectors actually quantized when encoding with the current
/// codebook and refits. The best codebook by reconstruction MSE wins.
pub fn fit_codebook(
    latents: &[FeatureMap],
    sched: &ScaleSchedule,
    cfg: &FitConfig,
) -> Result<(CodeBook, FitTrace)> {
    if latents.is_empty() {
        return Err(Error::Codebook("empty latent dataset".into()));
    }
    if cfg.vocab == 0 {
        return Err(Error::Codebook("vocab must be >= 1".into()));
    }
    if cfg.rounds == 0 {
        return Err(Error::Codebook("at least one fit round required".into()));
    }
    let channels = latents[0].channels();
    for f in latents {
        if f.hw() != sched.final_hw() || f.channels() != channels {
            return Err(Error::Codebook(format!(
                "latent {:?}x{:?} does not match schedule final {:?}",
                f.channels(),
                f.hw(),
                sched.final_hw()
            )));
        }
    }

    let mut rng = rng::stream(cfg.seed, "fit-codebook");
    let mut best: Option<(CodeBook, f64)> = None;
    let mut trace = FitTrace { round_mse: Vec::new() };

    for round in 0..cfg.rounds {
        let samples = match &best {
            // First harvest: the downsampled latents at every scale.
            None => {
                let mut s = Vec::new();
                for f in latents {
                    for i in 0..sched.n_scales() {
                        let (h, w) = sched.resolution(i);
                        let d = super::resample::area_downsample(f, h, w);
                        for y in 0..h {
                            for x in 0..w {
                                s.push(d.position_vector(y, x));
                            }
                        }
                    }
                }
                s
            }
            Some((cb, _)) => {
                let mut s = Vec::new();
                for f in latents {
                    s.extend(encode_residual_vectors(f, cb, sched)?);
                }
                s
            }
        };

        let centroids = kmeans(&samples, cfg.vocab, cfg.kmeans_iters, &mut rng)?;
        let data: Vec<f64> = centroids.iter().flatten().copied().collect();
        let candidate = CodeBook::new(Tensor::mat(cfg.vocab, channels, data)?)?;

        let mse = dataset_mse(latents, &candidate, sched)?;
        match &best {
            Some((_, best_mse)) if mse > *best_mse => {
                logging::debug(format!(
                    "fit round {round}: mse {mse:.6e} worse than {best_mse:.6e}, keeping previous"
                ));
            }
            _ => best = Some((candidate, mse)),
        }
        trace.round_mse.push(best.as_ref().unwrap().1);
    }

    Ok((best.unwrap().0, trace))
}

fn dataset_mse(latents: &[FeatureMap], cb: &CodeBook, sched: &ScaleSchedule) -> Result<f64> {
    let mut total = 0.0;
    for f in latents {
        let p = super::pyramid::encode_pyramid(f, cb, sched)?;
        let rec = decode_pyramid(&p, cb, sched)?;
        total += f.mse(&rec)?;
    }
    Ok(total / latents.len() as f64)
}

/// Seeded Lloyd's algorithm with k-means++ initialization. Empty clusters
/// steal the sample farthest from its assigned centroid.
fn kmeans(
    samples: &[Vec<f64>],
    k: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for s in samples {
        if !distinct.iter().any(|d| *d == s) {
            distinct.push(s);
        }
        if distinct.len() > k {
            break;
        }
    }
    if distinct.len() < k {
        return Err(Error::Codebook(format!(
            "vocab {k} exceeds the {} distinct samples available",
            distinct.len()
        )));
    }

    let n = samples.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(samples[rng.gen_range(0..n)].clone());
    let mut dist: Vec<f64> = samples
        .iter()
        .map(|s| sq_dist(s, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total <= 0.0 {
            // All mass on existing centroids: pick the first unused distinct sample.
            samples
                .iter()
                .find(|s| !centroids.contains(s))
                .expect("distinct count checked above")
                .clone()
        } else {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                t -= d;
                if t <= 0.0 {
                    pick = i;
                    break;
                }
            }
            samples[pick].clone()
        };
        for (i, s) in samples.iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(s, &next));
        }
        centroids.push(next);
    }

    let dim = centroids[0].len();
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        // Assign.
        for (i, s) in samples.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(s, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        // Update.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, s) in samples.iter().enumerate() {
            counts[assign[i]] += 1;
            for (a, v) in sums[assign[i]].iter_mut().zip(s) {
                *a += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Deterministic: first sample at maximal distance from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&samples[a], &centroids[assign[a]]);
                        let db = sq_dist(&samples[b], &centroids[assign[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = samples[far].clone();
                assign[far] = c;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
    }
    Ok(centroids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::schedule::build_scale_schedule;

    #[test]
    fn rejects_duplicate_rows() {
        let t = Tensor::mat(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!(matches!(CodeBook::new(t), Err(Error::Codebook(_))));
    }

    #[test]
    fn nearest_breaks_ties_to_lowest_index() {
        let cb = CodeBook::new(Tensor::mat(2, 1, vec![-1.0, 1.0]).unwrap()).unwrap();
        // 0.0 is equidistant from both codes.
        assert_eq!(cb.nearest(&[0.0]), 0);
    }

    #[test]
    fn single_constant_map_vocab_one() {
        let sched = build_scale_schedule(2, (2, 2)).unwrap();
        let f = FeatureMap::new(2, 2, 2, vec![0.4; 8]).unwrap();
        let cfg = FitConfig {
            vocab: 1,
            kmeans_iters: 5,
            rounds: 2,
            seed: 1,
        };
        let (cb, _) = fit_codebook(&[f], &sched, &cfg).unwrap();
        assert!((cb.vector(0)[0] - 0.4).abs() < 1e-12);
        assert!((cb.vector(0)[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn two_separated_clusters_recover_means() {
        // Two constant maps far apart; V = 2 must land on the two means.
        let sched = build_scale_schedule(1, (1, 1)).unwrap();
        let a = FeatureMap::new(1, 1, 1, vec![-3.0]).unwrap();
        let b = FeatureMap::new(1, 1, 1, vec![5.0]).unwrap();
        let cfg = FitConfig {
            vocab: 2,
            kmeans_iters: 10,
            rounds: 1,
            seed: 9,
        };
        let (cb, _) = fit_codebook(&[a, b], &sched, &cfg).unwrap();
        let mut vals = vec![cb.vector(0)[0], cb.vector(1)[0]];
        vals.sort_by(f64::total_cmp);
        assert!((vals[0] + 3.0).abs() < 1e-12 && (vals[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn vocab_larger_than_distinct_samples_errors() {
        let sched = build_scale_schedule(1, (1, 1)).unwrap();
        let f = FeatureMap::new(1, 1, 1, vec![0.5]).unwrap();
        let cfg = FitConfig {
            vocab: 4,
            kmeans_iters: 3,
            rounds: 1,
            seed: 0,
        };
        assert!(matches!(
            fit_codebook(&[f], &sched, &cfg),
            Err(Error::Codebook(_))
        ));
    }

    #[test]
    fn fit_trace_is_non_increasing() {
        let sched = build_scale_schedule(3, (4, 4)).unwrap();
        let mut rng = crate::rng::stream(11, "fit-test");
        let latents: Vec<FeatureMap> = (0..4)
            .map(|_| {
                let data: Vec<f64> = (0..3 * 16).map(|_| crate::rng::normal(&mut rng)).collect();
                FeatureMap::new(3, 4, 4, data).unwrap()
            })
            .collect();
        let cfg = FitConfig {
            vocab: 16,
            kmeans_iters: 8,
            rounds: 5,
            seed: 5,
        };
        let (_, trace) = fit_codebook(&latents, &sched, &cfg).unwrap();
        assert_eq!(trace.round_mse.len(), 5);
        for w in trace.round_mse.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "trace not monotone: {:?}", trace.round_mse);
        }
        assert!(trace.round_mse[4] <= trace.round_mse[0]);
    }
}
