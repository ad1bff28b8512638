//! Masked gray-level co-occurrence matrices and the alignment metrics derived
//! from the Haralick correlation-versus-distance profile.

use serde::{Deserialize, Serialize};

use super::{FeatureError, Result};
use crate::imagecore::{CellMask, GrayImage};

/// Directions sampled by [`correlation_profile`], in degrees.
pub const DIRECTIONS_DEG: [f64; 4] = [0.0, 45.0, 90.0, 135.0];
const CV_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlcmConfig {
    pub levels: usize,
    pub d_max: usize,
}

impl Default for GlcmConfig {
    fn default() -> Self {
        Self { levels: 8, d_max: 30 }
    }
}

/// Symmetric, normalized co-occurrence matrix (`levels × levels`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Glcm {
    levels: usize,
    p: Vec<f64>,
}

impl Glcm {
    /// Wraps an arbitrary non-negative matrix, normalizing it to unit mass.
    pub fn from_counts(levels: usize, counts: Vec<f64>) -> Result<Self> {
        if levels < 2 || counts.len() != levels * levels || counts.iter().any(|&c| c < 0.0) {
            return Err(FeatureError::InvalidGlcm);
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(FeatureError::NoPairs);
        }
        Ok(Self {
            levels,
            p: counts.into_iter().map(|c| c / total).collect(),
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.levels + j]
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }
}

/// In-mask intensities quantized into `levels` equal-width bins over the
/// masked min..max range; `None` outside the mask.
#[derive(Debug, Clone)]
pub struct Quantized {
    height: usize,
    width: usize,
    levels: usize,
    bins: Vec<Option<u8>>,
}

pub fn quantize(img: &GrayImage, mask: &CellMask, levels: usize) -> Result<Quantized> {
    if !(2..=256).contains(&levels) {
        return Err(FeatureError::InvalidLevels(levels));
    }
    mask.ensure_matches(img.dims())?;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (&v, &m) in img.pixels().iter().zip(mask.bits()) {
        if m {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi <= lo {
        return Err(FeatureError::ConstantRegion);
    }
    let span = (hi - lo) as f64;
    let bins = img
        .pixels()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &m)| {
            m.then(|| {
                let q = ((v - lo) as f64 / span * levels as f64).floor() as usize;
                q.min(levels - 1) as u8
            })
        })
        .collect();
    Ok(Quantized {
        height: img.height(),
        width: img.width(),
        levels,
        bins,
    })
}

impl Quantized {
    /// Symmetrized co-occurrence counts over ordered in-mask pairs
    /// `(p, p + (dx, dy))`, `dx` along columns and `dy` along rows.
    pub fn glcm(&self, dx: isize, dy: isize) -> Result<Glcm> {
        if dx == 0 && dy == 0 {
            return Err(FeatureError::ZeroDisplacement);
        }
        let l = self.levels;
        let mut counts = vec![0.0f64; l * l];
        let (h, w) = (self.height as isize, self.width as isize);
        let y_range = (-dy).max(0)..(h - dy).min(h);
        let x_range = (-dx).max(0)..(w - dx).min(w);
        for y in y_range {
            let row = (y * w) as usize;
            let row2 = ((y + dy) * w) as usize;
            for x in x_range.clone() {
                let (Some(a), Some(b)) = (self.bins[row + x as usize], self.bins[row2 + (x + dx) as usize]) else {
                    continue;
                };
                counts[a as usize * l + b as usize] += 1.0;
                counts[b as usize * l + a as usize] += 1.0;
            }
        }
        Glcm::from_counts(l, counts)
    }
}

/// Normalized co-occurrence matrix of the masked region at displacement
/// `(dx, dy)`.
pub fn glcm(img: &GrayImage, mask: &CellMask, levels: usize, dx: isize, dy: isize) -> Result<Glcm> {
    quantize(img, mask, levels)?.glcm(dx, dy)
}

/// Haralick correlation `Σ p(i,j)(i−μi)(j−μj) / (σi σj)`.
pub fn glcm_correlation(m: &Glcm) -> Result<f64> {
    let l = m.levels;
    let (mut mu_i, mut mu_j) = (0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let p = m.get(i, j);
            mu_i += i as f64 * p;
            mu_j += j as f64 * p;
        }
    }
    let (mut var_i, mut var_j, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let p = m.get(i, j);
            let (di, dj) = (i as f64 - mu_i, j as f64 - mu_j);
            var_i += p * di * di;
            var_j += p * dj * dj;
            cov += p * di * dj;
        }
    }
    if var_i <= 1e-15 || var_j <= 1e-15 {
        return Err(FeatureError::ConstantRegion);
    }
    Ok((cov / (var_i.sqrt() * var_j.sqrt())).clamp(-1.0, 1.0))
}

/// Displacement `(dx, dy)` for distance `d` along `theta_deg`, rows pointing
/// down so 90° is straight up.
pub fn displacement(d: usize, theta_deg: f64) -> (isize, isize) {
    let t = theta_deg.to_radians();
    let dx = (d as f64 * t.cos()).round() as isize;
    let dy = -(d as f64 * t.sin()).round() as isize;
    (dx, dy)
}

/// Correlation versus distance for each direction, plus the direction mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationProfile {
    pub d_max: usize,
    pub distances: Vec<usize>,
    /// `per_direction[k][i]` is the correlation along `DIRECTIONS_DEG[k]` at
    /// `distances[i]`.
    pub per_direction: [Vec<f64>; 4],
    pub mean: Vec<f64>,
}

pub fn correlation_profile(img: &GrayImage, mask: &CellMask, cfg: &GlcmConfig) -> Result<CorrelationProfile> {
    if cfg.d_max < 4 {
        return Err(FeatureError::InsufficientTexture(cfg.d_max));
    }
    let q = quantize(img, mask, cfg.levels)?;
    let mut distances = Vec::new();
    let mut per_direction: [Vec<f64>; 4] = Default::default();
    let mut mean = Vec::new();
    'dist: for d in 1..=cfg.d_max {
        let mut vals = [0.0; 4];
        for (k, &theta) in DIRECTIONS_DEG.iter().enumerate() {
            let (dx, dy) = displacement(d, theta);
            match q.glcm(dx, dy).and_then(|m| glcm_correlation(&m)) {
                Ok(c) => vals[k] = c,
                Err(FeatureError::NoPairs | FeatureError::ConstantRegion) => continue 'dist,
                Err(e) => return Err(e),
            }
        }
        distances.push(d);
        for k in 0..4 {
            per_direction[k].push(vals[k]);
        }
        mean.push(vals.iter().sum::<f64>() / 4.0);
    }
    if distances.len() < 4 {
        return Err(FeatureError::InsufficientTexture(distances.len()));
    }
    Ok(CorrelationProfile {
        d_max: cfg.d_max,
        distances,
        per_direction,
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentMetrics {
    pub max_cv: f64,
    pub peak_height: f64,
    pub peak_distance_px: f64,
}

/// Runs of equal values as `(first index, last index, value)`.
fn plateaus(c: &[f64]) -> Vec<(usize, usize, f64)> {
    let mut runs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, &v) in c.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.2 == v => r.1 = i,
            _ => runs.push((i, i, v)),
        }
    }
    runs
}

/// First interior local minimum of the curve, then the first interior local
/// maximum after it. Plateaus resolve to their smallest index.
pub fn find_peak(curve: &[f64]) -> Option<(usize, usize)> {
    let runs = plateaus(curve);
    let mut min_run = None;
    for r in 1..runs.len().saturating_sub(1) {
        if runs[r].2 < runs[r - 1].2 && runs[r].2 < runs[r + 1].2 {
            min_run = Some(r);
            break;
        }
    }
    let m = min_run?;
    for r in m + 1..runs.len().saturating_sub(1) {
        if runs[r].2 > runs[r - 1].2 && runs[r].2 > runs[r + 1].2 {
            return Some((runs[m].0, runs[r].0));
        }
    }
    None
}

/// `max_cv` (direction spread over |direction mean|, max over distances) and
/// the rebound peak of the direction-mean curve. Without a rebound the peak
/// height is 0 and the peak distance is `d_max`.
pub fn alignment_metrics(profile: &CorrelationProfile) -> AlignmentMetrics {
    let mut max_cv = 0.0f64;
    for i in 0..profile.distances.len() {
        let vals: Vec<f64> = profile.per_direction.iter().map(|d| d[i]).collect();
        let m = vals.iter().sum::<f64>() / 4.0;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        max_cv = max_cv.max(sd / (m.abs() + CV_FLOOR));
    }
    match find_peak(&profile.mean) {
        Some((lo, hi)) => AlignmentMetrics {
            max_cv,
            peak_height: profile.mean[hi] - profile.mean[lo],
            peak_distance_px: profile.distances[hi] as f64,
        },
        None => AlignmentMetrics {
            max_cv,
            peak_height: 0.0,
            peak_distance_px: profile.d_max as f64,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full(h: usize, w: usize) -> CellMask {
        CellMask::new(h, w, vec![true; h * w]).unwrap()
    }

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> GrayImage {
        GrayImage::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    /// Brute-force pair enumeration over every pixel and its displaced partner.
    fn brute_glcm(img: &GrayImage, mask: &CellMask, levels: usize, dx: isize, dy: isize) -> Vec<f64> {
        let (h, w) = img.dims();
        let vals: Vec<f32> = (0..h * w)
            .filter(|&i| mask.bits()[i])
            .map(|i| img.pixels()[i])
            .collect();
        let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let q = |v: f32| (((v - lo) as f64 / (hi - lo) as f64 * levels as f64).floor() as usize).min(levels - 1);
        let mut c = vec![0.0; levels * levels];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (y2, x2) = (y + dy, x + dx);
                if y2 < 0 || x2 < 0 || y2 >= h as isize || x2 >= w as isize {
                    continue;
                }
                let (a, b) = ((y * w as isize + x) as usize, (y2 * w as isize + x2) as usize);
                if !mask.bits()[a] || !mask.bits()[b] {
                    continue;
                }
                let (i, j) = (q(img.pixels()[a]), q(img.pixels()[b]));
                c[i * levels + j] += 1.0;
                c[j * levels + i] += 1.0;
            }
        }
        let s: f64 = c.iter().sum();
        c.iter().map(|v| v / s).collect()
    }

    #[test]
    fn checkerboard_is_all_off_diagonal() {
        let img = image(8, 8, |y, x| ((x + y) % 2) as f32);
        let m = glcm(&img, &full(8, 8), 2, 1, 0).unwrap();
        assert_eq!(m.get(0, 0) + m.get(1, 1), 0.0);
        assert!((m.get(0, 1) - 0.5).abs() < 1e-12);
        assert!((glcm_correlation(&m).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn vertical_stripes_along_rows_are_diagonal() {
        let img = image(12, 12, |_, x| ((x / 2) % 2) as f32);
        let m = glcm(&img, &full(12, 12), 2, 0, 1).unwrap();
        assert!((m.get(0, 0) + m.get(1, 1) - 1.0).abs() < 1e-12);
        assert!((glcm_correlation(&m).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = GrayImage::new(16, 16, (0..256).map(|_| rng.random::<f32>()).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mask = CellMask::new(16, 16, (0..256).map(|_| rng.random_bool(0.7)).collect()).unwrap();
        for (dx, dy) in [(1, 0), (0, -1), (2, -2), (-3, -3), (5, 1)] {
            let fast = glcm(&img, &mask, 8, dx, dy).unwrap();
            let slow = brute_glcm(&img, &mask, 8, dx, dy);
            for (a, b) in fast.probabilities().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
            // symmetric and unit mass
            let p = fast.probabilities();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(fast.get(i, j), fast.get(j, i));
                }
            }
        }
    }

    #[test]
    fn correlation_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let counts: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
        let m = Glcm::from_counts(5, counts.clone()).unwrap();
        let s: f64 = counts.iter().sum();
        let p = |i: usize, j: usize| counts[i * 5 + j] / s;
        let mi: f64 = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| i as f64 * p(i, j))
            .sum();
        let mj: f64 = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| j as f64 * p(i, j))
            .sum();
        let vi: f64 = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| (i as f64 - mi).powi(2) * p(i, j))
            .sum();
        let vj: f64 = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| (j as f64 - mj).powi(2) * p(i, j))
            .sum();
        let c: f64 = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| (i as f64 - mi) * (j as f64 - mj) * p(i, j))
            .sum::<f64>()
            / (vi.sqrt() * vj.sqrt());
        assert!((glcm_correlation(&m).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn perfect_cooccurrence_is_one() {
        let mut counts = vec![0.0; 16];
        for i in 0..4 {
            counts[i * 4 + i] = 1.0;
        }
        let m = Glcm::from_counts(4, counts).unwrap();
        assert!((glcm_correlation(&m).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn error_paths() {
        let img = image(8, 8, |_, _| 0.5);
        assert!(matches!(
            glcm(&img, &full(8, 8), 8, 1, 0),
            Err(FeatureError::ConstantRegion)
        ));
        let img = image(8, 8, |y, x| (x * y) as f32 / 49.0);
        assert!(matches!(
            glcm(&img, &full(8, 8), 8, 0, 0),
            Err(FeatureError::ZeroDisplacement)
        ));
        assert!(matches!(glcm(&img, &full(8, 8), 8, 9, 0), Err(FeatureError::NoPairs)));
        assert!(matches!(
            glcm(&img, &full(8, 8), 1, 1, 0),
            Err(FeatureError::InvalidLevels(1))
        ));
    }

    #[test]
    fn peak_rules() {
        // monotone decay: no rebound
        let decay = [1.0, 0.8, 0.6, 0.5, 0.45, 0.4];
        assert_eq!(find_peak(&decay), None);
        let curve = [1.0, 0.2, -0.3, 0.1, 0.6, 0.4, 0.5, 0.2];
        assert_eq!(find_peak(&curve), Some((2, 4)));
        // equal neighbouring maxima break toward the smaller distance
        let flat_top = [1.0, 0.0, 0.7, 0.7, 0.1];
        assert_eq!(find_peak(&flat_top), Some((1, 2)));
    }

    #[test]
    fn metrics_fallback_and_isotropy() {
        let mut per: [Vec<f64>; 4] = Default::default();
        let curve = vec![0.9, 0.7, 0.5, 0.4, 0.35];
        for d in per.iter_mut() {
            *d = curve.clone();
        }
        let profile = CorrelationProfile {
            d_max: 5,
            distances: vec![1, 2, 3, 4, 5],
            per_direction: per,
            mean: curve,
        };
        let m = alignment_metrics(&profile);
        assert_eq!(m.peak_height, 0.0);
        assert_eq!(m.peak_distance_px, 5.0);
        assert!(m.max_cv < 1e-6);
    }

    #[test]
    fn displacement_directions() {
        assert_eq!(displacement(10, 0.0), (10, 0));
        assert_eq!(displacement(10, 90.0), (0, -10));
        assert_eq!(displacement(10, 45.0), (7, -7));
        assert_eq!(displacement(10, 135.0), (-7, -7));
    }
}
