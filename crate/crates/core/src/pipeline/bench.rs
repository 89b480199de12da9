//! Wall-clock scaling of the Fourier mixer against softmax attention.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fourierformer::{
    attention_baseline_forward, spatial_interaction_eval, AttentionParams, BlockParams, FpeConfig,
    MixOptions,
};
use crate::numeric::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkPoint {
    pub tokens: usize,
    /// Median seconds per forward.
    pub fourier_secs: f64,
    pub attention_secs: f64,
    pub fourier_samples: Vec<f64>,
    pub attention_samples: Vec<f64>,
}

/// Least-squares line through `(ln tokens, ln seconds)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square residual in log space.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub channels: usize,
    pub repetitions: usize,
    pub points: Vec<BenchmarkPoint>,
    pub fourier: ScalingFit,
    pub attention: ScalingFit,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn log_log_fit(tokens: &[usize], secs: &[f64]) -> ScalingFit {
    let x: Vec<f64> = tokens.iter().map(|&t| (t as f64).ln()).collect();
    let y: Vec<f64> = secs.iter().map(|s| s.max(1e-12).ln()).collect();
    let (slope, intercept) = super::dataset::least_squares_line(&x, &y);
    let ss: f64 = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    ScalingFit {
        slope,
        intercept,
        residual: (ss / x.len() as f64).sqrt(),
    }
}

/// Grid `[H, W]` with `H * W = tokens`, as square as powers of two allow.
pub fn grid_for(tokens: usize) -> (usize, usize) {
    let k = tokens.trailing_zeros();
    (1 << k.div_ceil(2), 1 << (k / 2))
}

/// Shortest wall time one sample may cover; faster calls are repeated.
const MIN_SAMPLE_SECS: f64 = 0.01;

/// Per-call seconds for `reps` samples. The warm-up (at least one call and
/// `2 * MIN_SAMPLE_SECS`) also sizes the number of calls per sample.
fn time<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<Vec<f64>> {
    let t = Instant::now();
    let mut calls = 0;
    while calls == 0 || t.elapsed().as_secs_f64() < 2.0 * MIN_SAMPLE_SECS {
        f()?;
        calls += 1;
    }
    let once = (t.elapsed().as_secs_f64() / calls as f64).max(1e-9);
    let inner = (MIN_SAMPLE_SECS / once).ceil().clamp(1.0, 10_000.0) as usize;
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        out.push(t.elapsed().as_secs_f64() / inner as f64);
    }
    Ok(out)
}

/// Median forward time of one spatial-interaction layer and one attention
/// layer per token count, on this thread.
pub fn benchmark_mixing(
    tokens: &[usize],
    channels: usize,
    repetitions: usize,
) -> Result<BenchmarkReport> {
    if tokens.len() < 3 {
        return Err(Error::contract(
            "benchmark_mixing",
            "need at least three token counts",
        ));
    }
    if let Some(t) = tokens.iter().find(|t| !t.is_power_of_two()) {
        return Err(Error::contract(
            "benchmark_mixing",
            format!("token count {t} is not a power of two"),
        ));
    }
    if repetitions < 5 {
        return Err(Error::contract(
            "benchmark_mixing",
            "need at least five repetitions",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c);
    let cfg = FpeConfig {
        channels,
        ..Default::default()
    };
    let block = BlockParams::init(channels, &mut rng);
    let attn = AttentionParams::init(channels, &mut rng);
    let mut points = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let (h, w) = grid_for(t);
        let x: Tensor = Tensor::randn(&[1, h, w, channels], 1.0, &mut rng);
        let seq = x.reshape(&[t, channels])?;
        let fourier = time(repetitions, || {
            spatial_interaction_eval(&x, &block, &cfg, MixOptions::default()).map(drop)
        })?;
        let attention = time(repetitions, || {
            attention_baseline_forward(&seq, &attn).map(drop)
        })?;
        points.push(BenchmarkPoint {
            tokens: t,
            fourier_secs: median(&fourier),
            attention_secs: median(&attention),
            fourier_samples: fourier,
            attention_samples: attention,
        });
    }
    let f: Vec<f64> = points.iter().map(|p| p.fourier_secs).collect();
    let a: Vec<f64> = points.iter().map(|p| p.attention_secs).collect();
    Ok(BenchmarkReport {
        channels,
        repetitions,
        fourier: log_log_fit(tokens, &f),
        attention: log_log_fit(tokens, &a),
        points,
    })
}

/// Rows `tokens,fourier_secs,attention_secs`.
pub fn write_benchmark_csv<W: std::io::Write>(w: W, report: &BenchmarkReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Data(format!("writing benchmark csv: {e}"));
    w.write_record(["tokens", "fourier_secs", "attention_secs"])
        .map_err(err)?;
    for p in &report.points {
        w.write_record([
            p.tokens.to_string(),
            format!("{:.9}", p.fourier_secs),
            format!("{:.9}", p.attention_secs),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing benchmark csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_power_law() {
        let t = [256, 1024, 4096, 16384];
        let s: Vec<f64> = t.iter().map(|&n| 3e-9 * (n as f64).powf(1.5)).collect();
        let fit = log_log_fit(&t, &s);
        assert!((fit.slope - 1.5).abs() < 1e-9 && fit.residual < 1e-9);
    }

    #[test]
    fn grids_cover_token_counts() {
        for t in [16usize, 32, 256, 2048, 16384] {
            let (h, w) = grid_for(t);
            assert_eq!(h * w, t);
            assert!(h == w || h == 2 * w);
        }
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(benchmark_mixing(&[16, 64], 4, 5).is_err());
        assert!(benchmark_mixing(&[16, 60, 256], 4, 5).is_err());
        assert!(benchmark_mixing(&[16, 64, 256], 4, 4).is_err());
    }

    #[test]
    fn small_benchmark_reports_every_count() {
        let r = benchmark_mixing(&[16, 64, 256], 4, 5).unwrap();
        assert_eq!(r.points.len(), 3);
        assert!(r
            .points
            .iter()
            .all(|p| p.fourier_secs > 0.0 && p.attention_secs > 0.0));
        let mut buf = Vec::new();
        write_benchmark_csv(&mut buf, &r).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
