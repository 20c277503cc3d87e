use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Code whose value is nearest `v` on the grid `{c(q)}`; equal distances go
/// to the grid value of larger magnitude, matching half-away-from-zero.
pub fn nearest(v: f64, max: i64, grid: impl Fn(i64) -> f64) -> i64 {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for q in 0..=max {
        let d = (v - grid(q)).abs();
        if d < best_d || (d == best_d && grid(q).abs() > grid(best).abs()) {
            best = q;
            best_d = d;
        }
    }
    best
}

/// `n` softmax rows of length `len` over uniform logits in `[0, 8·temp)`.
pub fn softmax_samples(n: usize, len: usize, temp: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * len);
    for _ in 0..n {
        let logits: Vec<f64> = (0..len).map(|_| rng.gen::<f64>() * temp as f64 * 8.0).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| (v / s) as f32));
    }
    out
}
