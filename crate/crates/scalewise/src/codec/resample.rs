//! The pinned resampling pair for pyramid construction: area-average
//! downsampling and bilinear upsampling with the align-corners-false
//! convention. Same-size calls copy bit-exactly.
//!
//! Golden files under `tests/golden/` freeze small cases of both kernels.

use super::feature_map::FeatureMap;

/// Fractional box filter: every target cell averages the source cells it
/// covers, weighted by overlap area.
pub fn area_downsample(src: &FeatureMap, th: usize, tw: usize) -> FeatureMap {
    let (h, w) = src.hw();
    if (h, w) == (th, tw) {
        return src.clone();
    }
    let mut out = FeatureMap::zeros(src.channels(), th, tw);
    let (ry, rx) = (h as f64 / th as f64, w as f64 / tw as f64);
    for c in 0..src.channels() {
        for ty in 0..th {
            let y0 = ty as f64 * ry;
            let y1 = (ty + 1) as f64 * ry;
            for tx in 0..tw {
                let x0 = tx as f64 * rx;
                let x1 = (tx + 1) as f64 * rx;
                let mut acc = 0.0;
                let mut area = 0.0;
                let mut sy = y0.floor() as usize;
                while (sy as f64) < y1 && sy < h {
                    let wy = (y1.min((sy + 1) as f64) - y0.max(sy as f64)).max(0.0);
                    if wy > 0.0 {
                        let mut sx = x0.floor() as usize;
                        while (sx as f64) < x1 && sx < w {
                            let wx = (x1.min((sx + 1) as f64) - x0.max(sx as f64)).max(0.0);
                            if wx > 0.0 {
                                acc += src.at(c, sy, sx) * wy * wx;
                                area += wy * wx;
                            }
                            sx += 1;
                        }
                    }
                    sy += 1;
                }
                out.set(c, ty, tx, acc / area);
            }
        }
    }
    out
}

/// Bilinear interpolation with sample points at cell centers
/// (align-corners-false); edges clamp.
pub fn bilinear_upsample(src: &FeatureMap, th: usize, tw: usize) -> FeatureMap {
    let (h, w) = src.hw();
    if (h, w) == (th, tw) {
        return src.clone();
    }
    let mut out = FeatureMap::zeros(src.channels(), th, tw);
    let (ry, rx) = (h as f64 / th as f64, w as f64 / tw as f64);
    for ty in 0..th {
        let sy = ((ty as f64 + 0.5) * ry - 0.5).max(0.0).min((h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for tx in 0..tw {
            let sx = ((tx as f64 + 0.5) * rx - 0.5).max(0.0).min((w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for c in 0..src.channels() {
                let v = src.at(c, y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + src.at(c, y0, x1) * (1.0 - fy) * fx
                    + src.at(c, y1, x0) * fy * (1.0 - fx)
                    + src.at(c, y1, x1) * fy * fx;
                out.set(c, ty, tx, v);
            }
        }
    }
    out
}
