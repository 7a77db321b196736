//! DnCNN projector: an input conv + ReLU, `depth` blocks of conv + BN + ReLU,
//! and a single-filter output conv, optionally wrapped as `x + net(x)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Mode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnCNNConfig {
    /// Number of intermediate conv + BN + ReLU blocks.
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Side length of the square input image.
    pub image_k: usize,
}

impl Default for DnCNNConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            channels: 64,
            kernel: 3,
            image_k: 50,
        }
    }
}

impl DnCNNConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("projector needs at least one channel"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("projector kernel {} must be odd", self.kernel)));
        }
        if self.image_k == 0 {
            return Err(Error::invalid("projector image size must be positive"));
        }
        Ok(())
    }

    /// Trainable parameter count; BN running statistics are not counted.
    pub fn param_count(&self) -> usize {
        let (c, kk) = (self.channels, self.kernel * self.kernel);
        let input = c * kk + c;
        let block = c * c * kk + c + 2 * c;
        let output = c * kk + 1;
        input + self.depth * block + output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    /// Fan-in uniform init: `U(-b, b)` with `b = 1 / sqrt(c_in * kh * kw)`.
    fn init(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / (c_in * k * k) as f64).sqrt();
        Self {
            kernel: Tensor::uniform(&[c_out, c_in, k, k], bound, rng),
            bias: Tensor::uniform(&[c_out], bound, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub conv: ConvParams,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams {
    pub config: DnCNNConfig,
    pub residual: bool,
    pub input: ConvParams,
    pub blocks: Vec<BlockParams>,
    pub output: ConvParams,
}

/// Graph handles for one bound projector, in [`ProjectorParams::named_params`] order.
#[derive(Clone, Debug)]
pub struct ProjectorVars {
    vars: Vec<Var>,
}

impl ProjectorVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

impl ProjectorParams {
    pub fn new(config: DnCNNConfig, residual: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, k) = (config.channels, config.kernel);
        let input = ConvParams::init(c, 1, k, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                conv: ConvParams::init(c, c, k, &mut rng),
                gamma: Tensor::ones(&[c]),
                beta: Tensor::zeros(&[c]),
                running: RunningStats::new(c),
            })
            .collect();
        let output = ConvParams::init(1, c, k, &mut rng);
        Ok(Self {
            config,
            residual,
            input,
            blocks,
            output,
        })
    }

    /// Zeroes the output layer, making the core network the zero function.
    pub fn zero_output(&mut self) {
        self.output.kernel.data_mut().fill(0.0);
        self.output.bias.data_mut().fill(0.0);
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.kernel".to_string(), &self.input.kernel),
            ("input.bias".to_string(), &self.input.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.kernel"), &b.conv.kernel));
            out.push((format!("block{i}.bias"), &b.conv.bias));
            out.push((format!("block{i}.gamma"), &b.gamma));
            out.push((format!("block{i}.beta"), &b.beta));
        }
        out.push(("output.kernel".to_string(), &self.output.kernel));
        out.push(("output.bias".to_string(), &self.output.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input.kernel, &mut self.input.bias];
        for b in &mut self.blocks {
            out.push(&mut b.conv.kernel);
            out.push(&mut b.conv.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.push(&mut self.output.kernel);
        out.push(&mut self.output.bias);
        out
    }

    pub fn bind(&self, g: &mut Graph) -> ProjectorVars {
        ProjectorVars {
            vars: self
                .named_params()
                .into_iter()
                .map(|(_, t)| g.param(t.clone()))
                .collect(),
        }
    }

    /// Folds training-mode batch statistics into the running statistics,
    /// one entry per block in order.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.running.update(s);
        }
    }

    /// Applies the projector to `x` of shape `[B, k*k]` or `[B, 1, k, k]`,
    /// returning the same shape and the per-block batch statistics (training
    /// mode only).
    pub fn forward(&self, g: &mut Graph, vars: &ProjectorVars, x: Var) -> Result<(Var, Vec<BatchStats>)> {
        let k = self.config.image_k;
        let in_shape = g.shape(x).to_vec();
        let batch = in_shape[0];
        let ok = match in_shape.as_slice() {
            [_, n] => *n == k * k,
            [_, 1, h, w] => *h == k && *w == k,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "project",
                format!("input {in_shape:?} does not fit a {k}x{k} projector"),
            ));
        }
        let v = &vars.vars;
        let img = g.reshape(x, &[batch, 1, k, k])?;
        let mut h = g.conv2d(img, v[0], Some(v[1]))?;
        h = g.relu(h)?;
        let mut stats = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let base = 2 + 4 * i;
            h = g.conv2d(h, v[base], Some(v[base + 1]))?;
            let (bn, s) = g.batch_norm(h, v[base + 2], v[base + 3], &block.running)?;
            stats.extend(s);
            h = g.relu(bn)?;
        }
        let last = v.len() - 2;
        let out = g.conv2d(h, v[last], Some(v[last + 1]))?;
        let out = if self.residual { g.add(img, out)? } else { out };
        let out = g.reshape(out, &in_shape)?;
        Ok((out, stats))
    }

    /// Gradient-free evaluation on `[B, 1, k, k]` (or `[B, k*k]`) data.
    pub fn project(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new(mode);
        let vars = ProjectorVars {
            vars: self
                .named_params()
                .into_iter()
                .map(|(_, t)| g.constant(t.clone()))
                .collect(),
        };
        let xv = g.constant(x.clone());
        let (out, _) = self.forward(&mut g, &vars, xv)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error, FD_STEP};
    use rand::Rng;

    fn small(depth: usize) -> DnCNNConfig {
        DnCNNConfig {
            depth,
            channels: 4,
            kernel: 3,
            image_k: 8,
        }
    }

    fn random_images(batch: usize, k: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![batch, 1, k, k],
            (0..batch * k * k).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn layer_stack_for_three_blocks() {
        let p = ProjectorParams::new(
            DnCNNConfig {
                depth: 3,
                ..DnCNNConfig::default()
            },
            false,
            0,
        )
        .unwrap();
        assert_eq!(p.input.kernel.shape(), &[64, 1, 3, 3]);
        assert_eq!(p.blocks.len(), 3);
        for b in &p.blocks {
            assert_eq!(b.conv.kernel.shape(), &[64, 64, 3, 3]);
            assert_eq!(b.gamma.shape(), &[64]);
        }
        assert_eq!(p.output.kernel.shape(), &[1, 64, 3, 3]);
    }

    #[test]
    fn empty_middle_is_a_valid_projector() {
        let p = ProjectorParams::new(small(0), false, 1).unwrap();
        assert!(p.blocks.is_empty());
        let x = random_images(2, 8, 2);
        let y = p.project(&x, Mode::Training).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn parameter_count_formula_matches_allocation() {
        let config = DnCNNConfig {
            depth: 5,
            channels: 64,
            kernel: 3,
            image_k: 50,
        };
        let p = ProjectorParams::new(config, true, 3).unwrap();
        let counted: usize = p.named_params().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(counted, config.param_count());
        // 640 (input) + 5 * 37056 (blocks) + 577 (output)
        assert_eq!(counted, 186_497);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let p = ProjectorParams::new(small(2), false, 4).unwrap();
        let bound = (1.0f64 / 36.0).sqrt();
        for b in &p.blocks {
            assert!(b.conv.kernel.data().iter().all(|v| v.abs() <= bound));
        }
        let in_bound = (1.0f64 / 9.0).sqrt();
        assert!(p.input.kernel.data().iter().all(|v| v.abs() <= in_bound));
        assert_eq!(p, ProjectorParams::new(small(2), false, 4).unwrap());
        assert_ne!(p, ProjectorParams::new(small(2), false, 5).unwrap());
    }

    #[test]
    fn residual_with_zero_output_is_identity() {
        let mut p = ProjectorParams::new(small(2), true, 5).unwrap();
        p.zero_output();
        let x = random_images(3, 8, 6);
        assert_eq!(p.project(&x, Mode::Training).unwrap(), x);
        p.residual = false;
        let y = p.project(&x, Mode::Training).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_matches_single_calls_in_inference_mode() {
        let mut p = ProjectorParams::new(small(2), true, 7).unwrap();
        for b in &mut p.blocks {
            b.running.mean = vec![0.1, -0.2, 0.3, 0.0];
            b.running.var = vec![0.5, 1.5, 2.0, 1.0];
        }
        let x = random_images(2, 8, 8);
        let both = p.project(&x, Mode::Inference).unwrap();
        for b in 0..2 {
            let single = Tensor::new(vec![1, 1, 8, 8], x.row(b).to_vec()).unwrap();
            let out = p.project(&single, Mode::Inference).unwrap();
            for (a, e) in out.data().iter().zip(both.row(b)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = ProjectorParams::new(small(2), true, 9).unwrap();
        let x = random_images(2, 8, 10);
        let target = random_images(2, 8, 11);
        let loss_of = |data: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new(Mode::Training);
            let vars = p.bind(&mut g);
            let xv = g.param(Tensor::new(vec![2, 1, 8, 8], data.to_vec()).unwrap());
            let (y, _) = p.forward(&mut g, &vars, xv).unwrap();
            let t = g.constant(target.clone());
            let loss = g.mse(y, t).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).item(), g.grad_or_zeros(xv).into_data())
        };
        let (_, analytic) = loss_of(x.data());
        let numeric = central_difference(|d| loss_of(d).0, x.data(), FD_STEP);
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
    }

    #[test]
    fn rejects_wrong_resolution() {
        let p = ProjectorParams::new(small(1), false, 0).unwrap();
        assert!(p.project(&random_images(1, 7, 0), Mode::Inference).is_err());
        assert!(DnCNNConfig {
            kernel: 2,
            ..small(1)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn training_forward_reports_block_statistics() {
        let mut p = ProjectorParams::new(small(3), false, 12).unwrap();
        let mut g = Graph::new(Mode::Training);
        let vars = p.bind(&mut g);
        let x = g.constant(random_images(2, 8, 13).reshape(&[2, 64]).unwrap());
        let (y, stats) = p.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.shape(y), &[2, 64]);
        assert_eq!(stats.len(), 3);
        let before = p.blocks[0].running.clone();
        p.update_running(&stats);
        assert_ne!(p.blocks[0].running, before);
    }
}
