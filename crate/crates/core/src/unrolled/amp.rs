//! Single-probe Monte-Carlo divergence for the Onsager term.

use rand::Rng;

/// Rademacher (`±1`) probe of length `n`.
pub fn rademacher_probe<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// `u + ε ẑ` and the displacement actually applied per entry.
///
/// Rounding makes the applied step differ slightly from `ε ẑ`; dividing the
/// response by it instead of by `ε ẑ` keeps the estimate for the identity map
/// at exactly `n`.
pub fn probe_shift(u: &[f64], probe: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let shifted: Vec<f64> = u.iter().zip(probe).map(|(a, z)| a + eps * z).collect();
    let steps = shifted
        .iter()
        .zip(u)
        .zip(probe)
        .map(|((s, a), z)| match s - a {
            d if d == 0.0 => eps * z,
            d => d,
        })
        .collect();
    (shifted, steps)
}

/// `Σ_i (moved_i - base_i) / step_i`, the single-probe divergence estimate
/// given the responses at `u + step` and `u`.
pub fn divergence_from_response(moved: &[f64], base: &[f64], steps: &[f64]) -> f64 {
    moved
        .iter()
        .zip(base)
        .zip(steps)
        .map(|((p, b), d)| (p - b) / d)
        .sum()
}

/// `ẑᵀ (f(u + ε ẑ) - f(u)) / ε`, an unbiased-to-first-order estimate of
/// `div f(u)` for Rademacher `ẑ`.
pub fn mc_divergence(f: impl Fn(&[f64]) -> Vec<f64>, u: &[f64], probe: &[f64], eps: f64) -> f64 {
    let (shifted, steps) = probe_shift(u, probe, eps);
    divergence_from_response(&f(&shifted), &f(u), &steps)
}

/// Probe scale `rel * rms(u)`, falling back to `rel` for an all-zero input.
pub fn probe_epsilon(u: &[f64], rel: f64) -> f64 {
    let rms = (u.iter().map(|v| v * v).sum::<f64>() / u.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        rel * rms
    } else {
        rel
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_divergence_is_exactly_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u: Vec<f64> = (0..32).map(|i| i as f64 * 0.25).collect();
        for _ in 0..10 {
            let z = rademacher_probe(32, &mut rng);
            assert_eq!(mc_divergence(|x| x.to_vec(), &u, &z, 0.5), 32.0);
        }
    }

    #[test]
    fn identity_is_exact_for_arbitrary_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let u: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z = rademacher_probe(64, &mut rng);
            assert_eq!(mc_divergence(|x| x.to_vec(), &u, &z, probe_epsilon(&u, 1e-3)), 64.0);
        }
    }

    #[test]
    fn zero_map_has_zero_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = rademacher_probe(8, &mut rng);
        assert_eq!(mc_divergence(|x| vec![0.0; x.len()], &[1.0; 8], &z, 1e-3), 0.0);
    }

    /// `Q Qᵀ` for `rank` Gram-Schmidt-orthonormalized Gaussian columns.
    fn random_projector(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < rank {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for q in &basis {
                let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let mut m = vec![0.0; n * n];
        for q in &basis {
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] += q[i] * q[j];
                }
            }
        }
        m
    }

    #[test]
    fn mean_of_probes_approaches_trace() {
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_projector(n, 8, &mut rng);
        let apply = |x: &[f64]| -> Vec<f64> {
            (0..n).map(|i| (0..n).map(|j| m[i * n + j] * x[j]).sum()).collect()
        };
        let trace: f64 = (0..n).map(|i| m[i * n + i]).sum();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let probes = 10_000;
        let mean = (0..probes)
            .map(|_| {
                let z = rademacher_probe(n, &mut rng);
                mc_divergence(apply, &u, &z, probe_epsilon(&u, 1e-3))
            })
            .sum::<f64>()
            / probes as f64;
        assert!((mean - trace).abs() < 0.01 * trace, "{mean} vs {trace}");
    }

    #[test]
    fn probe_epsilon_scales_with_rms() {
        assert_eq!(probe_epsilon(&[3.0, -3.0], 1e-3), 3e-3);
        assert_eq!(probe_epsilon(&[0.0; 4], 1e-3), 1e-3);
    }
}
