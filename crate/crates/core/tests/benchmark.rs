use ageformer_core::pipeline::benchmark_mixing;

const TOKENS: [usize; 3] = [256, 1024, 4096];

#[test]
fn fourier_scales_below_attention_on_repeat() {
    for _ in 0..2 {
        let r = benchmark_mixing(&TOKENS, 16, 5).unwrap();
        assert!(
            r.fourier.slope < r.attention.slope,
            "{:?} vs {:?}",
            r.fourier,
            r.attention
        );
        assert!(r.fourier.residual.is_finite() && r.attention.residual.is_finite());
        let last = r.points.last().unwrap();
        assert!(last.fourier_secs < last.attention_secs);
    }
}

/// Timing-sensitive: needs a machine without noisy neighbours.
/// Run with `cargo test --test benchmark -- --ignored`.
#[test]
#[ignore]
fn doubling_repetitions_keeps_medians_within_twenty_percent() {
    let a = benchmark_mixing(&TOKENS, 16, 5).unwrap();
    let b = benchmark_mixing(&TOKENS, 16, 10).unwrap();
    for (p, q) in a.points.iter().zip(&b.points) {
        for (x, y, what) in [
            (p.fourier_secs, q.fourier_secs, "fourier"),
            (p.attention_secs, q.attention_secs, "attention"),
        ] {
            let rel = (x - y).abs() / x.max(y);
            assert!(
                rel < 0.2,
                "{what} at {} tokens: {x:.6}s vs {y:.6}s",
                p.tokens
            );
        }
    }
}
