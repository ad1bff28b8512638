use super::{FeatureError, Result};
use crate::imagecore::CellMask;

/// Foreground pixel count.
pub fn cell_area(mask: &CellMask) -> usize {
    mask.count()
}

/// Major/minor axis ratio of the ellipse with the same central second moments
/// as the foreground: `sqrt(λmax / λmin)` of the coordinate covariance.
pub fn aspect_ratio(mask: &CellMask) -> Result<f64> {
    let (mut n, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.contains(y, x) {
                n += 1.0;
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    let (cx, cy) = (sx / n, sy / n);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.contains(y, x) {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                cxx += dx * dx;
                cyy += dy * dy;
                cxy += dx * dy;
            }
        }
    }
    let (cxx, cyy, cxy) = (cxx / n, cyy / n, cxy / n);
    let half_tr = 0.5 * (cxx + cyy);
    let disc = (0.25 * (cxx - cyy).powi(2) + cxy * cxy).sqrt();
    let (hi, lo) = (half_tr + disc, half_tr - disc);
    if lo <= 1e-9 * hi.max(1e-300) {
        return Err(FeatureError::Collinear);
    }
    Ok((hi / lo).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn mask_from(h: usize, w: usize, f: impl Fn(f64, f64) -> bool) -> CellMask {
        let data = (0..h * w).map(|i| f((i / w) as f64, (i % w) as f64)).collect();
        CellMask::new(h, w, data).unwrap()
    }

    #[test]
    fn full_mask_area() {
        assert_eq!(cell_area(&mask_from(10, 10, |_, _| true)), 100);
        let m = mask_from(10, 10, |y, x| y < 4.0 && x < 4.0);
        assert_eq!(cell_area(&m), 16);
    }

    #[test]
    fn disc_is_round() {
        let m = mask_from(81, 81, |y, x| (y - 40.0).powi(2) + (x - 40.0).powi(2) <= 900.0);
        assert!((aspect_ratio(&m).unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn rectangle_matches_side_ratio() {
        let m = mask_from(30, 60, |y, x| (5.0..15.0).contains(&y) && (10.0..50.0).contains(&x));
        let ar = aspect_ratio(&m).unwrap();
        assert!((ar - 4.0).abs() / 4.0 < 0.02, "{ar}");
    }

    #[test]
    fn translation_invariant() {
        let a = mask_from(40, 40, |y, x| (2.0..12.0).contains(&y) && (3.0..23.0).contains(&x));
        let b = mask_from(40, 40, |y, x| (20.0..30.0).contains(&y) && (15.0..35.0).contains(&x));
        assert!((aspect_ratio(&a).unwrap() - aspect_ratio(&b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn line_is_rejected() {
        let m = mask_from(20, 20, |y, _| y == 5.0);
        assert!(matches!(aspect_ratio(&m), Err(FeatureError::Collinear)));
    }
}
