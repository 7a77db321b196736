use crate::autodiff::{Coef, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// DeMUN mixing weights: `x̃^i = α_i x^i + Σ_{j≤i} β^i_j A′ᵀ(y - A′x^j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryWeights {
    /// `[T]`, one coefficient per step.
    pub alpha: Tensor,
    /// `beta[i]` has `i + 1` entries.
    pub beta: Vec<Tensor>,
}

impl MemoryWeights {
    /// `α_i = 1`, `β^i_i = 1`, everything else 0: plain unit-step gradient descent.
    pub fn new(steps: usize) -> Self {
        let beta = (0..steps)
            .map(|i| {
                let mut b = Tensor::zeros(&[i + 1]);
                b.data_mut()[i] = 1.0;
                b
            })
            .collect();
        Self {
            alpha: Tensor::ones(&[steps]),
            beta,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }
}

/// `α x_i + Σ_j β_j g_j` where `alpha` is element `step` of `alpha_var` and
/// `betas` holds one coefficient per gradient in `stack`.
///
/// Viewing `x_i` and the gradients as image channels, this is a one-by-one
/// convolution with `i + 2` input channels and one output channel.
pub fn demun_combine(
    g: &mut Graph,
    alpha: Coef,
    betas: Var,
    x_i: Var,
    stack: &[Var],
) -> Result<Var> {
    let width = g.value(betas).numel();
    if width != stack.len() {
        return Err(Error::shape(
            "demun_combine",
            format!("{width} memory weights for {} stacked gradients", stack.len()),
        ));
    }
    let mut coefs = Vec::with_capacity(stack.len() + 1);
    let mut terms = Vec::with_capacity(stack.len() + 1);
    coefs.push(alpha);
    terms.push(x_i);
    for (j, s) in stack.iter().enumerate() {
        coefs.push(Coef::Param(betas, j));
        terms.push(*s);
    }
    g.combine(&coefs, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn init_is_gradient_step() {
        let w = MemoryWeights::new(3);
        assert_eq!(w.alpha.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(w.beta[2].data(), &[0.0, 0.0, 1.0]);
        assert_eq!(w.beta[0].data(), &[1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(Mode::Training);
        let x = g.constant(random(6, &mut rng));
        let stack: Vec<Var> = (0..3).map(|_| g.constant(random(6, &mut rng))).collect();
        let alpha = g.param(w.alpha.clone());
        let betas = g.param(w.beta[2].clone());
        let out = demun_combine(&mut g, Coef::Param(alpha, 2), betas, x, &stack).unwrap();
        for i in 0..6 {
            let e = g.value(x).data()[i] + g.value(stack[2]).data()[i];
            assert_eq!(g.value(out).data()[i], e);
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(Mode::Training);
        let x = g.constant(random(4, &mut rng));
        let stack: Vec<Var> = (0..2).map(|_| g.constant(random(4, &mut rng))).collect();
        let betas = g.param(Tensor::zeros(&[2]));
        let out = demun_combine(&mut g, Coef::Const(0.0), betas, x, &stack).unwrap();
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn random_weights_match_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(Mode::Training);
        let xs = random(5, &mut rng);
        let grads: Vec<Tensor> = (0..3).map(|_| random(5, &mut rng)).collect();
        let a: f64 = rng.random_range(-2.0..2.0);
        let bs = random(3, &mut rng);
        let mut expect = vec![0.0; 5];
        for p in 0..5 {
            expect[p] = a * xs.data()[p];
            for j in 0..3 {
                expect[p] += bs.data()[j] * grads[j].data()[p];
            }
        }
        let x = g.constant(xs);
        let stack: Vec<Var> = grads.into_iter().map(|t| g.constant(t)).collect();
        let betas = g.param(bs);
        let out = demun_combine(&mut g, Coef::Const(a), betas, x, &stack).unwrap();
        for (v, e) in g.value(out).data().iter().zip(&expect) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!(demun_combine(&mut g, Coef::Const(a), betas, x, &stack[..2]).is_err());
    }
}
