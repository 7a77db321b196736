//! PSNR, per-projection evaluation reports and classical baselines.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearMap, Mode};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Cholesky};
use crate::operator::{add_noise_stream, MeasurementOperator, NoiseModel};
use crate::tensor::Tensor;
use crate::unrolled::UnrolledModel;

/// Aggregates replace an infinite PSNR (exact reconstruction) with this value.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10 log10(1 / mse)` for images scaled to [0, 1]; `+inf` when identical.
pub fn psnr(x_hat: &[f64], x_star: &[f64]) -> Result<f64> {
    if x_hat.len() != x_star.len() || x_hat.is_empty() {
        return Err(Error::shape(
            "psnr",
            format!("{} vs {} pixels", x_hat.len(), x_star.len()),
        ));
    }
    let mse = x_hat
        .iter()
        .zip(x_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x_hat.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

pub fn capped(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

/// `y = A′x + w` for tiles `range` of `dataset`; tile `i` always draws noise
/// from stream `i`, so measurements are fixed per tile.
pub fn measurements(
    op: &MeasurementOperator,
    dataset: &Dataset,
    range: std::ops::Range<usize>,
    noise: &NoiseModel,
) -> Result<Tensor> {
    let n = dataset.k() * dataset.k();
    if op.n() != n {
        return Err(Error::shape(
            "measurements",
            format!("operator acts on {} pixels, tiles have {n}", op.n()),
        ));
    }
    let count = range.len();
    let mut clean = vec![0.0; count * op.m()];
    let tiles: Vec<f64> = range.clone().flat_map(|i| dataset.tile(i).iter().copied()).collect();
    op.apply_rows(&tiles, count, &mut clean);
    let mut out = Vec::with_capacity(clean.len());
    for (row, i) in clean.chunks(op.m()).zip(range) {
        out.extend(add_noise_stream(row, noise, i as u64));
    }
    Tensor::new(vec![count, op.m()], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    /// Mean capped PSNR of the final estimate; equals `curve[T - 1]`.
    pub mean_psnr: f64,
    /// Mean capped PSNR after each projection.
    pub curve: Vec<f64>,
    /// Uncapped PSNR of the final estimate per tile, in split order.
    pub per_image: Vec<f64>,
    /// Manifest entries `(file, tile)` aligned with `per_image`.
    pub sources: Vec<(String, usize)>,
    pub wall_seconds: f64,
    pub label: String,
}

impl MetricsReport {
    /// `image,file,tile,psnr_db`, one row per tile. Values are written at
    /// round-trip precision.
    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("image,file,tile,psnr_db\n");
        for (i, (p, (file, tile))) in self.per_image.iter().zip(&self.sources).enumerate() {
            let _ = writeln!(s, "{i},{file},{tile},{p}");
        }
        s
    }

    /// `step,psnr_db` for steps 1..=T.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,psnr_db\n");
        for (i, p) in self.curve.iter().enumerate() {
            let _ = writeln!(s, "{},{p}", i + 1);
        }
        s
    }

    pub fn write_csvs(&self, per_image: &Path, curve: &Path) -> Result<()> {
        std::fs::write(per_image, self.per_image_csv()).map_err(|e| Error::io(per_image, e))?;
        std::fs::write(curve, self.curve_csv()).map_err(|e| Error::io(curve, e))
    }
}

/// Inference-mode reconstruction of every tile in `split`, scored after
/// each projection.
pub fn evaluate(
    model: &UnrolledModel,
    op: &Arc<MeasurementOperator>,
    dataset: &Dataset,
    split: Split,
    noise: &NoiseModel,
    batch_size: usize,
    probe_seed: u64,
) -> Result<MetricsReport> {
    let start = std::time::Instant::now();
    let k = model.plan.projector.image_k;
    if dataset.k() != k {
        return Err(Error::shape(
            "evaluate",
            format!("model expects {k}x{k} tiles, dataset has {0}x{0}", dataset.k()),
        ));
    }
    let range = dataset.range(split)?;
    if range.is_empty() {
        return Err(Error::Empty(format!("{split} split has no tiles")));
    }
    let steps = model.plan.steps;
    let n = k * k;
    let mut sums = vec![0.0; steps];
    let mut per_image = Vec::with_capacity(range.len());
    let chunk = batch_size.max(1);
    let mut at = range.start;
    while at < range.end {
        let end = (at + chunk).min(range.end);
        let y = measurements(op, dataset, at..end, noise)?;
        let states = model.reconstruct(&y, op, Mode::Inference, probe_seed.wrapping_add(at as u64))?;
        for (b, i) in (at..end).enumerate() {
            let target = dataset.tile(i);
            for (s, state) in states.iter().enumerate() {
                let db = psnr(&state.data()[b * n..(b + 1) * n], target)?;
                sums[s] += capped(db);
                if s + 1 == steps {
                    per_image.push(db);
                }
            }
        }
        at = end;
    }
    let count = range.len() as f64;
    let curve: Vec<f64> = sums.iter().map(|s| s / count).collect();
    Ok(MetricsReport {
        split,
        mean_psnr: curve[steps - 1],
        curve,
        per_image,
        sources: dataset.manifest()[range]
            .iter()
            .map(|t| (t.file.clone(), t.tile))
            .collect(),
        wall_seconds: start.elapsed().as_secs_f64(),
        label: format!("{}", model.plan.algorithm),
    })
}

/// Classical reconstructions used as reference points.
#[derive(Clone, Debug, PartialEq)]
pub struct Baselines {
    /// `A′ᵀ y`.
    pub adjoint: Vec<f64>,
    /// `A′ᵀ (A′A′ᵀ)⁻¹ y`.
    pub min_norm_ls: Vec<f64>,
}

/// Factored `A′A′ᵀ`, reused across measurement vectors.
pub struct BaselineSolver {
    op: Arc<MeasurementOperator>,
    gram: Cholesky,
}

impl BaselineSolver {
    /// Falls back to a ridge of 1e-10 when `A′A′ᵀ` is not numerically
    /// positive definite.
    pub fn new(op: Arc<MeasurementOperator>) -> Result<Self> {
        let a = op.to_dense();
        let m = op.m();
        let mut gram = vec![0.0; m * m];
        gemm(m, op.n(), m, &a.data, false, &a.data, true, &mut gram, false);
        let gram = Cholesky::factor(&gram, m, 0.0)
            .or_else(|| {
                log::warn!("A A^T is singular, solving with ridge 1e-10");
                Cholesky::factor(&gram, m, 1e-10)
            })
            .ok_or_else(|| Error::invalid("A A^T could not be factored even with a ridge"))?;
        Ok(Self { op, gram })
    }

    pub fn solve(&self, y: &[f64]) -> Result<Baselines> {
        Ok(Baselines {
            adjoint: self.op.apply_adjoint_vec(y)?,
            min_norm_ls: self.op.apply_adjoint_vec(&self.gram.solve(y))?,
        })
    }
}

pub fn baseline_reconstructions(op: &Arc<MeasurementOperator>, y: &[f64]) -> Result<Baselines> {
    BaselineSolver::new(op.clone())?.solve(y)
}

/// Mean capped PSNR of the two baselines over `split`: `(adjoint, min-norm)`.
pub fn baseline_psnr(
    op: &Arc<MeasurementOperator>,
    dataset: &Dataset,
    split: Split,
    noise: &NoiseModel,
) -> Result<(f64, f64)> {
    let range = dataset.range(split)?;
    if range.is_empty() {
        return Err(Error::Empty(format!("{split} split has no tiles")));
    }
    let solver = BaselineSolver::new(op.clone())?;
    let y = measurements(op, dataset, range.clone(), noise)?;
    let (mut adj, mut lsq) = (0.0, 0.0);
    for (b, i) in range.clone().enumerate() {
        let r = solver.solve(y.row(b))?;
        adj += capped(psnr(&r.adjoint, dataset.tile(i))?);
        lsq += capped(psnr(&r.min_norm_ls, dataset.tile(i))?);
    }
    let count = range.len() as f64;
    Ok((adj / count, lsq / count))
}
