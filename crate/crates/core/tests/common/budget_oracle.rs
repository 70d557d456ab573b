//! Grid scan for the exit rate, with the expected cost recomputed from the
//! unnormalized geometric weights.

pub const GRID: usize = 10_000;
pub const Q_LOW: f64 = 0.001;

pub fn grid_unit() -> f64 {
    (1.0 - Q_LOW) / (GRID - 1) as f64
}

pub fn cost_at(costs: &[f64], batch: usize, q: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut w = q;
    for c in costs {
        num += w * c;
        den += w;
        w *= 1.0 - q;
    }
    batch as f64 * num / den
}

/// Smallest grid rate whose expected cost fits the budget, up to rounding.
pub fn scan(costs: &[f64], batch: usize, budget: f64) -> Option<f64> {
    (0..GRID)
        .map(|i| if i + 1 == GRID { 1.0 } else { Q_LOW + i as f64 * grid_unit() })
        .find(|&q| cost_at(costs, batch, q) <= budget * (1.0 + 1e-12))
}
