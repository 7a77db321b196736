//! Fixed momentum schedule for the unrolled accelerated method.
//!
//! The `t` sequence is plain data: it never enters the autodiff graph.

/// `t_1..=t_count` with `t_1 = 1` and `t_{i+1} = (1 + sqrt(1 + 4 t_i²)) / 2`.
pub fn t_sequence(count: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(count);
    let mut cur = 1.0f64;
    for _ in 0..count {
        t.push(cur);
        cur = (1.0 + (1.0 + 4.0 * cur * cur).sqrt()) / 2.0;
    }
    t
}

/// Momentum coefficients `(t_{i+1} - 1) / t_{i+2}` for `i = 0..steps`.
///
/// The coefficient at `i` multiplies `x^{i+1} - x^i` in the extrapolated
/// point `x_n^{i+1}`.
pub fn momentum_coefficients(steps: usize) -> Vec<f64> {
    let t = t_sequence(steps + 1);
    (0..steps).map(|i| (t[i] - 1.0) / t[i + 1]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recurrence_values() {
        let t = t_sequence(3);
        assert_eq!(t[0], 1.0);
        assert!((t[1] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((t[1] - 1.6180).abs() < 1e-4);
        let t3 = (1.0 + (1.0 + 4.0 * t[1] * t[1]).sqrt()) / 2.0;
        assert_eq!(t[2], t3);
        assert!((t[2] - 2.1935).abs() < 1e-4);
    }

    #[test]
    fn first_coefficient_is_zero() {
        let c = momentum_coefficients(4);
        assert_eq!(c[0], 0.0);
        assert!(c.windows(2).all(|w| w[1] > w[0]));
        assert!(c.iter().all(|v| *v < 1.0));
    }
}
