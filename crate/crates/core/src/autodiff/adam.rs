use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ADAM with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments shaped like `params`, with the default `β1 = 0.9`,
    /// `β2 = 0.999`, `ε = 1e-8`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let first: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        let second = first.clone();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.first[i].len() || g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_advances_counter() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut adam = AdamState::new([&p], 1e-4);
        adam.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_is_bias_corrected_unit_step() {
        // m_hat = g = 1, v_hat = g^2 = 1, so the step is lr / (1 + eps).
        let mut p = Tensor::scalar(0.5);
        let mut adam = AdamState::new([&p], 0.1);
        adam.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        let expect = 0.5 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expect).abs() < 1e-15);
        assert!((0.5 - p.item() - 0.1).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[3]);
        let mut adam = AdamState::new([&p], 0.1);
        assert!(adam.step(&mut [&mut p], &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::from_vec(vec![0.3, -0.7, 1.1]);
            let mut adam = AdamState::new([&p], 1e-2);
            for k in 0..50 {
                let g: Vec<f64> = p.data().iter().map(|w| 2.0 * w + (k as f64).sin()).collect();
                adam.step(&mut [&mut p], &[Tensor::from_vec(g)]).unwrap();
            }
            p
        };
        assert_eq!(run().data(), run().data());
    }
}
