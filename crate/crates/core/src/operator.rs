//! Forward operators `A′`, the additive noise model and the input-SNR diagnostic.
//!
//! Every operator is normalized by its maximum row ℓ2 norm so that the
//! largest row of `A′` has unit norm. Constructors are pure functions of their
//! dimensions and seed, so an [`OperatorDescriptor`] is enough to rebuild the
//! exact operator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseMatrix, LinearMap};
use crate::dct;
use crate::error::{Error, Result};
use crate::tensor::norm_sq;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Gaussian,
    Dct,
}

impl std::str::FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "dct" => Ok(Self::Dct),
            other => Err(Error::invalid(format!(
                "unknown operator kind `{other}` (expected gaussian or dct)"
            ))),
        }
    }
}

impl std::fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Dct => "dct",
        })
    }
}

#[derive(Clone, Debug)]
enum Repr {
    Dense(DenseMatrix),
    Dct {
        k: usize,
        basis: Vec<f64>,
        indices: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct MeasurementOperator {
    kind: OperatorKind,
    m: usize,
    n: usize,
    seed: u64,
    norm_factor: f64,
    repr: Repr,
}

/// Everything needed to rebuild a [`MeasurementOperator`] bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorDescriptor {
    pub kind: OperatorKind,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub norm_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
}

/// Raw `m x n` matrix with i.i.d. `N(0, 1/m)` entries.
pub fn gaussian_raw(m: usize, n: usize, seed: u64) -> Result<DenseMatrix> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "gaussian operator needs 0 < m <= n, got m={m}, n={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (1.0 / m as f64).sqrt();
    let data = (0..m * n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect();
    Ok(DenseMatrix {
        rows: m,
        cols: n,
        data,
    })
}

/// Maximum row ℓ2 norm `‖A‖_{∞,2}`.
pub fn max_row_norm(a: &DenseMatrix) -> f64 {
    a.data
        .chunks(a.cols)
        .map(|row| norm_sq(row).sqrt())
        .fold(0.0, f64::max)
}

/// `A′ = A / ‖A‖_{∞,2}`; returns the normalized matrix and the factor divided out.
pub fn normalize(a: &DenseMatrix) -> Result<(DenseMatrix, f64)> {
    let factor = max_row_norm(a);
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid("cannot normalize an all-zero matrix"));
    }
    let data = a.data.iter().map(|v| v / factor).collect();
    Ok((
        DenseMatrix {
            rows: a.rows,
            cols: a.cols,
            data,
        },
        factor,
    ))
}

/// Number of measurements for a sampling rate: `round(rate * n)`.
pub fn measurements_for_rate(rate: f64, n: usize) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid(format!("sampling rate {rate} outside (0, 1]")));
    }
    let m = (rate * n as f64).round() as usize;
    if m == 0 {
        return Err(Error::invalid(format!("sampling rate {rate} gives no measurements for n={n}")));
    }
    Ok(m)
}

/// DCT row selection: the lowest-frequency 10% block is always kept; the rest
/// of the `m` rows are drawn without replacement from the complement.
pub fn dct_indices(k: usize, m: usize, seed: u64) -> Vec<usize> {
    let n = k * k;
    let order = dct::low_frequency_order(k);
    let fixed = ((0.1 * n as f64).round() as usize).max(1).min(n);
    if m <= fixed {
        return order[..m].to_vec();
    }
    let mut indices = order[..fixed].to_vec();
    let mut rest = order[fixed..].to_vec();
    rest.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, _) = rest.partial_shuffle(&mut rng, m - fixed);
    indices.extend_from_slice(picked);
    indices
}

impl MeasurementOperator {
    pub fn gaussian(m: usize, n: usize, seed: u64) -> Result<Self> {
        let raw = gaussian_raw(m, n, seed)?;
        let (a, norm_factor) = normalize(&raw)?;
        Ok(Self {
            kind: OperatorKind::Gaussian,
            m,
            n,
            seed,
            norm_factor,
            repr: Repr::Dense(a),
        })
    }

    /// `A = S F` on `k x k` images with `m = round(rate * k²)` rows.
    pub fn dct(k: usize, rate: f64, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("dct operator needs k >= 1"));
        }
        let m = measurements_for_rate(rate, k * k)?;
        Self::dct_with_indices(k, dct_indices(k, m, seed), seed)
    }

    fn dct_with_indices(k: usize, indices: Vec<usize>, seed: u64) -> Result<Self> {
        let n = k * k;
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("bad DCT index {i} for n={n}")));
            }
        }
        let basis = dct::dct_matrix(k);
        // row (u, v) of D⊗D has norm |D_u| * |D_v|
        let row_norms: Vec<f64> = basis.chunks(k).map(|r| norm_sq(r).sqrt()).collect();
        let norm_factor = indices
            .iter()
            .map(|&i| row_norms[i / k] * row_norms[i % k])
            .fold(0.0, f64::max);
        Ok(Self {
            kind: OperatorKind::Dct,
            m: indices.len(),
            n,
            seed,
            norm_factor,
            repr: Repr::Dct { k, basis, indices },
        })
    }

    pub fn from_descriptor(desc: &OperatorDescriptor) -> Result<Self> {
        let op = match desc.kind {
            OperatorKind::Gaussian => Self::gaussian(desc.m, desc.n, desc.seed)?,
            OperatorKind::Dct => {
                let k = desc
                    .k
                    .ok_or_else(|| Error::Format("dct descriptor without k".into()))?;
                let indices = desc
                    .indices
                    .clone()
                    .ok_or_else(|| Error::Format("dct descriptor without indices".into()))?;
                Self::dct_with_indices(k, indices, desc.seed)?
            }
        };
        if op.m != desc.m || op.n != desc.n || op.norm_factor != desc.norm_factor {
            return Err(Error::Format(
                "operator rebuilt from descriptor does not match its recorded dims/norm".into(),
            ));
        }
        Ok(op)
    }

    pub fn descriptor(&self) -> OperatorDescriptor {
        let (k, indices) = match &self.repr {
            Repr::Dense(_) => (None, None),
            Repr::Dct { k, indices, .. } => (Some(*k), Some(indices.clone())),
        };
        OperatorDescriptor {
            kind: self.kind,
            m: self.m,
            n: self.n,
            seed: self.seed,
            norm_factor: self.norm_factor,
            k,
            indices,
        }
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn norm_factor(&self) -> f64 {
        self.norm_factor
    }

    /// Selected DCT coefficient indices; `None` for Gaussian operators.
    pub fn dct_indices(&self) -> Option<&[usize]> {
        match &self.repr {
            Repr::Dct { indices, .. } => Some(indices),
            Repr::Dense(_) => None,
        }
    }

    /// The normalized operator as an explicit dense matrix.
    ///
    /// For DCT operators this materializes `S (D ⊗ D)`, so it is meant for
    /// small `k`.
    pub fn to_dense(&self) -> DenseMatrix {
        match &self.repr {
            Repr::Dense(a) => a.clone(),
            Repr::Dct { k, indices, .. } => {
                let f = dct::dct_matrix_2d(*k);
                let n = self.n;
                let data = indices
                    .iter()
                    .flat_map(|&i| f[i * n..(i + 1) * n].iter().map(|v| v / self.norm_factor))
                    .collect();
                DenseMatrix {
                    rows: self.m,
                    cols: n,
                    data,
                }
            }
        }
    }

    /// `A′ x` for a single signal.
    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::shape("apply", format!("signal of length {} for n={}", x.len(), self.n)));
        }
        let mut y = vec![0.0; self.m];
        self.apply(x, &mut y);
        Ok(y)
    }

    /// `A′ᵀ r` for a single measurement vector.
    pub fn apply_adjoint_vec(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.m {
            return Err(Error::shape(
                "apply_adjoint",
                format!("measurement of length {} for m={}", r.len(), self.m),
            ));
        }
        let mut x = vec![0.0; self.n];
        self.apply_adjoint(r, &mut x);
        Ok(x)
    }
}

impl LinearMap for MeasurementOperator {
    fn input_len(&self) -> usize {
        self.n
    }

    fn output_len(&self) -> usize {
        self.m
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Dense(a) => a.apply(x, out),
            Repr::Dct { k, basis, indices } => {
                let mut scratch = vec![0.0; k * k];
                let mut coeffs = vec![0.0; k * k];
                dct::forward_2d(basis, *k, x, &mut scratch, &mut coeffs);
                for (o, &i) in out.iter_mut().zip(indices) {
                    *o = coeffs[i] / self.norm_factor;
                }
            }
        }
    }

    fn apply_adjoint(&self, r: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Dense(a) => a.apply_adjoint(r, out),
            Repr::Dct { k, basis, indices } => {
                let mut scratch = vec![0.0; k * k];
                let mut coeffs = vec![0.0; k * k];
                for (v, &i) in r.iter().zip(indices) {
                    coeffs[i] = v / self.norm_factor;
                }
                dct::inverse_2d(basis, *k, &coeffs, &mut scratch, out);
            }
        }
    }

    fn apply_rows(&self, x: &[f64], rows: usize, out: &mut [f64]) {
        match &self.repr {
            Repr::Dense(a) => a.apply_rows(x, rows, out),
            Repr::Dct { .. } => {
                for b in 0..rows {
                    self.apply(&x[b * self.n..(b + 1) * self.n], &mut out[b * self.m..(b + 1) * self.m]);
                }
            }
        }
    }

    fn apply_adjoint_rows(&self, r: &[f64], rows: usize, out: &mut [f64]) {
        match &self.repr {
            Repr::Dense(a) => a.apply_adjoint_rows(r, rows, out),
            Repr::Dct { .. } => {
                for b in 0..rows {
                    self.apply_adjoint(
                        &r[b * self.m..(b + 1) * self.m],
                        &mut out[b * self.n..(b + 1) * self.n],
                    );
                }
            }
        }
    }
}

/// I.i.d. Gaussian measurement noise `w ~ N(0, σ² I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { sigma, seed })
    }

    pub fn noiseless() -> Self {
        Self { sigma: 0.0, seed: 0 }
    }
}

/// `y + σ z` with `z` standard normal from the model seed.
pub fn add_noise(y: &[f64], model: &NoiseModel) -> Vec<f64> {
    add_noise_stream(y, model, 0)
}

/// Like [`add_noise`], drawing from an independent stream per sample.
pub fn add_noise_stream(y: &[f64], model: &NoiseModel, stream: u64) -> Vec<f64> {
    if model.sigma == 0.0 {
        return y.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    rng.set_stream(stream);
    y.iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + model.sigma * z
        })
        .collect()
}

/// `10 log10( mean_x ‖A′x‖² / (m σ²) )` in dB.
pub fn input_snr<'a>(
    op: &MeasurementOperator,
    images: impl IntoIterator<Item = &'a [f64]>,
    model: &NoiseModel,
) -> Result<f64> {
    if !(model.sigma > 0.0) {
        return Err(Error::invalid("input SNR needs sigma > 0"));
    }
    let denom = op.m() as f64 * model.sigma * model.sigma;
    let (mut total, mut count) = (0.0, 0usize);
    for x in images {
        total += norm_sq(&op.apply_vec(x)?) / denom;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("input SNR over no images".into()));
    }
    Ok(10.0 * (total / count as f64).log10())
}
