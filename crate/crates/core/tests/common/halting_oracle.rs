//! Direct evaluation of the halting rule, one candidate unit at a time.

/// `(N, R, p)` for one position: the first unit whose running score total,
/// with the last score forced to 1, reaches `1 - epsilon`.
pub fn brute_force(h: &[f64], epsilon: f64) -> (usize, f64, Vec<f64>) {
    let units = h.len();
    let score = |s: usize| if s + 1 == units { 1.0 } else { h[s] };
    let n = (1..=units)
        .find(|&n| (0..n).map(score).sum::<f64>() >= 1.0 - epsilon)
        .expect("forced last score always halts");
    let r = 1.0 - (0..n - 1).map(score).sum::<f64>();
    let p = (0..units)
        .map(|s| match (s + 1).cmp(&n) {
            std::cmp::Ordering::Less => h[s],
            std::cmp::Ordering::Equal => r,
            std::cmp::Ordering::Greater => 0.0,
        })
        .collect();
    (n, r, p)
}
