use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_CS_THRESHOLD: f64 = 5.0;

fn check(pred: &[f64], labels: &[f64], op: &'static str) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::contract(op, "no samples"));
    }
    if pred.len() != labels.len() {
        return Err(Error::contract(
            op,
            format!("{} predictions for {} labels", pred.len(), labels.len()),
        ));
    }
    Ok(())
}

/// Mean absolute error in years.
pub fn mae_metric(pred: &[f64], labels: &[f64]) -> Result<f64> {
    check(pred, labels, "mae_metric")?;
    Ok(pred
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Percentage of samples with absolute error at most `l` years.
pub fn cs_metric(pred: &[f64], labels: &[f64], l: f64) -> Result<f64> {
    check(pred, labels, "cs_metric")?;
    if !(l >= 0.0) {
        return Err(Error::contract(
            "cs_metric",
            format!("threshold {l} must be non-negative"),
        ));
    }
    let hits = pred
        .iter()
        .zip(labels)
        .filter(|(p, y)| (*p - *y).abs() <= l)
        .count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the combined objective over batches.
    pub loss: f64,
    pub mae_loss: f64,
    pub matching_loss: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Headline MAE (after correction when it is enabled).
    pub mae: f64,
    pub cs: f64,
    pub cs_threshold: f64,
    pub base_mae: f64,
    pub corrected_mae: Option<f64>,
    /// Constant-mean-age predictor on the same split.
    pub mean_baseline_mae: f64,
    pub loss_curve: Vec<EpochStats>,
    pub benchmark: Option<super::bench::BenchmarkReport>,
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn mae_fixtures() {
        assert_eq!(mae_metric(&[4.0, 9.0], &[4.0, 9.0]).unwrap(), 0.0);
        assert_eq!(mae_metric(&[3.0, 5.0], &[1.0, 5.0]).unwrap(), 1.0);
        assert!(mae_metric(&[], &[]).is_err());
        assert!(mae_metric(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_matches_compensated_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let p: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..100.0)).collect();
        let y: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..100.0)).collect();
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for (a, b) in p.iter().zip(&y) {
            let t = (a - b).abs() - comp;
            let s = sum + t;
            comp = (s - sum) - t;
            sum = s;
        }
        assert!((mae_metric(&p, &y).unwrap() - sum / 10_000.0).abs() < 1e-6);
    }

    #[test]
    fn cs_fixtures() {
        let y = [0.0; 4];
        assert_eq!(cs_metric(&[0.0, 1.0, 2.0, 6.0], &y, 5.0).unwrap(), 75.0);
        assert_eq!(cs_metric(&[0.0, 1.0, 2.0, 6.0], &y, 1e9).unwrap(), 100.0);
        assert_eq!(cs_metric(&[0.0, 1.0, 2.0, 6.0], &y, 0.0).unwrap(), 25.0);
        assert!(cs_metric(&[1.0], &[1.0], -1.0).is_err());
        assert!(cs_metric(&[1.0, 2.0], &[1.0], 5.0).is_err());
    }

    proptest! {
        #[test]
        fn cs_is_monotone_in_threshold(
            pairs in prop::collection::vec((0.0f64..80.0, 0.0f64..80.0), 1..50),
            a in 0.0f64..40.0,
            b in 0.0f64..40.0,
        ) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c_lo = cs_metric(&p, &y, lo).unwrap();
            let c_hi = cs_metric(&p, &y, hi).unwrap();
            prop_assert!(c_lo <= c_hi);
            prop_assert!((0.0..=100.0).contains(&c_lo));
        }
    }
}
