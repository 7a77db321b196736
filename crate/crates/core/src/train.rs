//! Minibatch ADAM training with best-validation checkpoint selection.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Graph, Mode, RunningStats};
use crate::container;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, measurements, MetricsReport};
use crate::operator::{MeasurementOperator, NoiseModel, OperatorDescriptor, OperatorKind};
use crate::tensor::Tensor;
use crate::unrolled::{run_unrolled, LossSpec, RunOptions, UnrollPlan, UnrolledModel};

const CHECKPOINT_MAGIC: &[u8; 8] = b"DEMUNCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// How to build the measurement operator for `k x k` tiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    /// Sampling rate `m / n`; ignored when `m` is set.
    #[serde(default)]
    pub rate: f64,
    /// Explicit measurement count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    pub seed: u64,
}

impl OperatorSpec {
    pub fn from_rate(kind: OperatorKind, rate: f64, seed: u64) -> Self {
        Self { kind, rate, m: None, seed }
    }

    pub fn measurements(&self, n: usize) -> Result<usize> {
        match self.m {
            Some(m) if m == 0 || m > n => Err(Error::invalid(format!("m = {m} outside 1..={n}"))),
            Some(m) => Ok(m),
            None => crate::operator::measurements_for_rate(self.rate, n),
        }
    }

    pub fn build(&self, k: usize) -> Result<MeasurementOperator> {
        let n = k * k;
        let m = self.measurements(n)?;
        match self.kind {
            OperatorKind::Gaussian => MeasurementOperator::gaussian(m, n, self.seed),
            // m / n rounds back to exactly m
            OperatorKind::Dct => MeasurementOperator::dct(k, m as f64 / n as f64, self.seed),
        }
    }
}

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    1e-4
}

fn default_noise() -> NoiseModel {
    NoiseModel::noiseless()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub seed: u64,
    pub loss: LossSpec,
    pub plan: UnrollPlan,
    pub operator: OperatorSpec,
    #[serde(default = "default_noise")]
    pub noise: NoiseModel,
    /// Rescale the gradient to at most this global L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be >= 0", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("clip_norm {c} must be positive")));
            }
        }
        self.plan.validate()?;
        self.loss.validate(self.plan.steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub operator: OperatorDescriptor,
    /// 1-based epoch whose parameters are stored.
    pub best_epoch: usize,
    /// Mean per-sample training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation MSE of the final estimate per epoch; empty without a
    /// validation split.
    pub val_loss: Vec<f64>,
    /// Set when training stopped early on a non-finite loss.
    pub aborted: Option<String>,
    pub model: UnrolledModel,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    operator: OperatorDescriptor,
    best_epoch: usize,
    train_loss: Vec<f64>,
    val_loss: Vec<f64>,
    aborted: Option<String>,
    params: Vec<ParamEntry>,
}

fn running_entries(model: &UnrolledModel) -> Vec<(String, &Vec<f64>)> {
    let mut out = Vec::new();
    for (i, p) in model.projectors.iter().enumerate() {
        for (j, b) in p.blocks.iter().enumerate() {
            out.push((format!("proj{i}.block{j}.running_mean"), &b.running.mean));
            out.push((format!("proj{i}.block{j}.running_var"), &b.running.var));
        }
    }
    out
}

impl Checkpoint {
    pub fn operator(&self) -> Result<Arc<MeasurementOperator>> {
        MeasurementOperator::from_descriptor(&self.operator).map(Arc::new)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = Vec::new();
        let mut blob = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            params.push(ParamEntry {
                name,
                shape,
                offset: blob.len(),
            });
            blob.extend_from_slice(data);
        };
        for (name, t) in self.model.named_params() {
            push(name, t.shape().to_vec(), t.data());
        }
        for (name, v) in running_entries(&self.model) {
            push(name, vec![v.len()], v);
        }
        let header = CheckpointHeader {
            config: self.config.clone(),
            operator: self.operator.clone(),
            best_epoch: self.best_epoch,
            train_loss: self.train_loss.clone(),
            val_loss: self.val_loss.clone(),
            aborted: self.aborted.clone(),
            params,
        };
        container::write(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &blob)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, blob): (CheckpointHeader, Vec<f64>) =
            container::read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let mut model = UnrolledModel::new(h.config.plan.clone(), 0)?;
        let lookup = |name: &str, numel: usize| -> Result<&[f64]> {
            let e = h
                .params
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            let len: usize = e.shape.iter().product();
            if len != numel || e.offset + len > blob.len() {
                return Err(Error::Format(format!("checkpoint entry `{name}` has the wrong size")));
            }
            Ok(&blob[e.offset..e.offset + len])
        };
        let names: Vec<(String, usize)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.numel()))
            .collect();
        for ((name, numel), t) in names.iter().zip(model.params_mut()) {
            t.data_mut().copy_from_slice(lookup(name, *numel)?);
        }
        for (i, p) in model.projectors.iter_mut().enumerate() {
            for (j, b) in p.blocks.iter_mut().enumerate() {
                let c = b.running.mean.len();
                b.running = RunningStats {
                    mean: lookup(&format!("proj{i}.block{j}.running_mean"), c)?.to_vec(),
                    var: lookup(&format!("proj{i}.block{j}.running_var"), c)?.to_vec(),
                };
            }
        }
        Ok(Self {
            config: h.config,
            operator: h.operator,
            best_epoch: h.best_epoch,
            train_loss: h.train_loss,
            val_loss: h.val_loss,
            aborted: h.aborted,
            model,
        })
    }

    /// Evaluates the stored model on `split` with the training noise model.
    pub fn evaluate(&self, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
        let op = self.operator()?;
        evaluate(
            &self.model,
            &op,
            dataset,
            split,
            &self.config.noise,
            self.config.batch_size,
            self.config.seed,
        )
    }
}

fn probe_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(batch as u64)
}

/// Validation MSE per pixel of the final estimate, inference mode.
fn validation_mse(
    model: &UnrolledModel,
    op: &Arc<MeasurementOperator>,
    dataset: &Dataset,
    y: &Tensor,
    config: &TrainConfig,
) -> Result<f64> {
    let range = dataset.range(Split::Val)?;
    let n = dataset.k() * dataset.k();
    let m = op.m();
    let mut total = 0.0;
    let mut at = 0;
    while at < range.len() {
        let end = (at + config.batch_size).min(range.len());
        let yb = Tensor::new(vec![end - at, m], y.data()[at * m..end * m].to_vec())?;
        let states = model.reconstruct(&yb, op, Mode::Inference, config.seed)?;
        let last = states.last().expect("at least one step");
        for (b, i) in (range.start + at..range.start + end).enumerate() {
            total += last.data()[b * n..(b + 1) * n]
                .iter()
                .zip(dataset.tile(i))
                .map(|(a, t)| (a - t) * (a - t))
                .sum::<f64>();
        }
        at = end;
    }
    Ok(total / (range.len() * n) as f64)
}

/// Trains `config.plan` on the train split, selecting the epoch with the
/// lowest validation MSE (the final epoch when there is no validation split).
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<Checkpoint> {
    config.validate()?;
    let k = dataset.k();
    if config.plan.projector.image_k != k {
        return Err(Error::shape(
            "train",
            format!("plan expects {0}x{0} tiles, dataset has {k}x{k}", config.plan.projector.image_k),
        ));
    }
    let op = Arc::new(config.operator.build(k)?);
    let train_range = dataset.range(Split::Train)?;
    if train_range.is_empty() {
        return Err(Error::Empty("train split has no tiles".into()));
    }
    let val_range = dataset.range(Split::Val)?;
    let n = k * k;
    let m = op.m();
    let y_train = measurements(&op, dataset, train_range.clone(), &config.noise)?;
    let y_val = measurements(&op, dataset, val_range.clone(), &config.noise)?;

    let mut model = UnrolledModel::new(config.plan.clone(), config.seed)?;
    let mut adam = AdamState::new(model.named_params().into_iter().map(|(_, t)| t), config.lr);
    let mut order: Vec<usize> = (0..train_range.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut ckpt = Checkpoint {
        config: config.clone(),
        operator: op.descriptor(),
        best_epoch: 0,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        aborted: None,
        model: model.clone(),
    };

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let b = batch.len();
            let mut xs = Vec::with_capacity(b * n);
            let mut ys = Vec::with_capacity(b * m);
            for &j in batch {
                xs.extend_from_slice(dataset.tile(train_range.start + j));
                ys.extend_from_slice(y_train.row(j));
            }
            let mut g = Graph::new(Mode::Training);
            let vars = model.bind(&mut g);
            let yv = g.constant(Tensor::new(vec![b, m], ys)?);
            let xv = g.constant(Tensor::new(vec![b, n], xs)?);
            let step = run_unrolled(
                &mut g,
                &model,
                &vars,
                yv,
                &op,
                &RunOptions::new(probe_seed(config.seed, epoch, bi)),
            )
            .and_then(|traj| {
                let total = config.loss.apply(&mut g, &traj.states, xv)?;
                let loss = g.scale(total, 1.0 / b as f64)?;
                g.backward(loss)?;
                Ok((traj, g.value(loss).item()))
            });
            let (traj, loss) = match step {
                Ok(v) if v.1.is_finite() => v,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    let msg = format!("non-finite loss at epoch {}, batch {}", epoch + 1, bi + 1);
                    log::warn!("{msg}; keeping the last good checkpoint");
                    ckpt.aborted = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let mut grads: Vec<Tensor> = vars.all().into_iter().map(|v| g.grad_or_zeros(v)).collect();
            if let Some(clip) = config.clip_norm {
                let norm = grads
                    .iter()
                    .map(|t| crate::tensor::norm_sq(t.data()))
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    let s = clip / norm;
                    for t in &mut grads {
                        t.data_mut().iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            adam.step(&mut model.params_mut(), &grads)?;
            model.apply_bn_updates(&traj);
            epoch_loss += loss * b as f64;
        }
        let train_loss = epoch_loss / train_range.len() as f64;
        ckpt.train_loss.push(train_loss);

        let improved = if val_range.is_empty() {
            true
        } else {
            let v = validation_mse(&model, &op, dataset, &y_val, config)?;
            let best = ckpt.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
            ckpt.val_loss.push(v);
            v < best
        };
        log::info!(
            "epoch {}/{}: train loss {train_loss:.6}{}",
            epoch + 1,
            config.epochs,
            ckpt.val_loss
                .last()
                .map(|v| format!(", val mse {v:.6}"))
                .unwrap_or_default()
        );
        if improved {
            ckpt.best_epoch = epoch + 1;
            ckpt.model = model.clone();
        }
    }
    if ckpt.best_epoch == 0 {
        return Err(Error::NonFinite {
            op: ckpt.aborted.unwrap_or_else(|| "training".into()),
        });
    }
    Ok(ckpt)
}
