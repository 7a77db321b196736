use std::sync::Arc;

use demun::autodiff::Mode;
use demun::dncnn::DnCNNConfig;
use demun::eval::{baseline_reconstructions, capped, psnr};
use demun::operator::{add_noise, MeasurementOperator, NoiseModel, OperatorKind};
use demun::train::OperatorSpec;
use demun::unrolled::{Algorithm, LossSpec, UnrollPlan, UnrolledModel};
use demun::{Error, Result, Tensor};

pub fn sampling_mask(k: usize, rate: f64, seed: u64) -> Result<Vec<u8>> {
    let op = MeasurementOperator::dct(k, rate, seed)?;
    let mut mask = vec![0u8; k * k];
    for &i in op.dct_indices().expect("dct operator") {
        mask[i] = 1;
    }
    Ok(mask)
}

pub fn loss_weights(loss: &str, steps: usize) -> Result<Vec<f64>> {
    loss.parse::<LossSpec>()?.weights(steps)
}

#[derive(Clone, Debug)]
pub struct Params {
    pub algorithm: Algorithm,
    pub operator: OperatorKind,
    pub k: usize,
    pub rate: f64,
    pub steps: usize,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub k: usize,
    pub original: Vec<f64>,
    pub adjoint: Vec<f64>,
    pub min_norm: Vec<f64>,
    pub estimates: Vec<Vec<f64>>,
    /// Capped PSNR after each projection.
    pub curve: Vec<f64>,
    pub adjoint_psnr: f64,
    pub min_norm_psnr: f64,
}

/// Largest tile the page offers; keeps the dense operator small.
pub const MAX_K: usize = 48;

pub fn reconstruct(p: &Params) -> Result<Reconstruction> {
    if p.k == 0 || p.k > MAX_K {
        return Err(Error::Invalid(format!("k must lie in 1..={MAX_K}")));
    }
    let original: Vec<f64> = demun::synth::scene(p.k, p.seed)
        .pixels()
        .map(|px| px[0] as f64 / 255.0)
        .collect();
    let op = Arc::new(OperatorSpec::from_rate(p.operator, p.rate, p.seed).build(p.k)?);
    let noise = NoiseModel::new(p.sigma, p.seed)?;
    let y = add_noise(&op.apply_vec(&original)?, &noise);

    let plan = UnrollPlan::new(
        p.algorithm,
        p.steps,
        true,
        DnCNNConfig {
            depth: 0,
            channels: 1,
            kernel: 3,
            image_k: p.k,
        },
    );
    let mut model = UnrolledModel::new(plan, p.seed)?;
    for proj in &mut model.projectors {
        proj.zero_output();
    }
    let states = model.reconstruct(&Tensor::new(vec![1, op.m()], y.clone())?, &op, Mode::Inference, p.seed)?;
    let estimates: Vec<Vec<f64>> = states.into_iter().map(|s| s.data().to_vec()).collect();
    let curve = estimates
        .iter()
        .map(|x| psnr(x, &original).map(capped))
        .collect::<Result<Vec<_>>>()?;
    let base = baseline_reconstructions(&op, &y)?;
    Ok(Reconstruction {
        k: p.k,
        adjoint_psnr: capped(psnr(&base.adjoint, &original)?),
        min_norm_psnr: capped(psnr(&base.min_norm_ls, &original)?),
        original,
        adjoint: base.adjoint,
        min_norm: base.min_norm_ls,
        estimates,
        curve,
    })
}
