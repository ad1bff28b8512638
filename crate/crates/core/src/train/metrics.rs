//! The four evaluation metrics.

use super::{Result, TrainError};

fn check_lengths(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(TrainError::Metric(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min {
        return Err(TrainError::Metric(format!(
            "need at least {min} values, got {}",
            a.len()
        )));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b, 2)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(TrainError::Metric("correlation undefined for constant input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b, 3)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target, 1)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target, 1)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target, 1)?;
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(TrainError::Metric("r2 undefined for a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_extremes_and_ties() {
        let a = [1.0, 5.0, 2.0, 8.0, 3.0];
        assert_eq!(spearman(&a, &a).unwrap(), 1.0);
        let rev: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(spearman(&a, &rev).unwrap(), -1.0);
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), [1.0, 2.5, 2.5, 4.0]);
        // ranks [1,2.5,2.5,4] vs [1,3,2,4]; Pearson by hand = 4.5 / sqrt(4.5 * 5)
        let s = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((s - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn error_metrics() {
        let t = [1.0, 4.0];
        assert_eq!(mae(&[1.0, 2.0], &t).unwrap(), 1.0);
        assert_eq!(mse(&[1.0, 2.0], &t).unwrap(), 2.0);
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        assert_eq!(r2(&[2.5, 2.5], &t).unwrap(), 0.0);
        assert!(r2(&[1.0, 2.0], &[3.0, 3.0]).is_err());
        assert!(mae(&[1.0], &t).is_err());
    }

    proptest! {
        #[test]
        fn rank_invariance(v in prop::collection::vec(-100.0f64..100.0, 3..40), w in prop::collection::vec(-100.0f64..100.0, 40)) {
            let w = &w[..v.len()];
            if let Ok(s) = spearman(&v, w) {
                let m: Vec<f64> = v.iter().map(|x| x.powi(3) + 2.0 * x).collect();
                prop_assert!((spearman(&m, w).unwrap() - s).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn mse_zero_iff_mae_zero(p in prop::collection::vec(-5.0f64..5.0, 1..20), eq in any::<bool>()) {
            let t: Vec<f64> = if eq { p.clone() } else { p.iter().map(|x| x + 0.5).collect() };
            let (a, s) = (mae(&p, &t).unwrap(), mse(&p, &t).unwrap());
            prop_assert!(a >= 0.0 && s >= 0.0);
            prop_assert_eq!(a == 0.0, s == 0.0);
        }

        #[test]
        fn train_mean_has_zero_r2(t in prop::collection::vec(0.0f64..5.0, 2..30)) {
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            if let Ok(r) = r2(&vec![mean; t.len()], &t) {
                prop_assert!(r.abs() < 1e-12);
            }
        }
    }
}
