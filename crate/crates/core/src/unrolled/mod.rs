//! Unrolled reconstruction networks: DeMUN and the PGD, Nesterov and AMP
//! baselines, all starting from `x^0 = 0`.

pub mod amp;
pub mod loss;
pub mod memory;
pub mod nesterov;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Coef, Graph, LinearMap, Mode, Var};
use crate::dncnn::{DnCNNConfig, ProjectorParams, ProjectorVars};
use crate::error::{Error, Result};
use crate::operator::MeasurementOperator;
use crate::tensor::Tensor;

pub use loss::{loss_intermediate, loss_last_layer, loss_skip, LossSpec};
pub use memory::{demun_combine, MemoryWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Demun,
    Pgd,
    Nesterov,
    Amp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Demun,
        Algorithm::Pgd,
        Algorithm::Nesterov,
        Algorithm::Amp,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Algorithm::Demun => "demun",
            Algorithm::Pgd => "pgd",
            Algorithm::Nesterov => "nesterov",
            Algorithm::Amp => "amp",
        }
    }

    fn has_step_sizes(self) -> bool {
        matches!(self, Algorithm::Pgd | Algorithm::Nesterov)
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown algorithm `{s}` (expected demun, pgd, nesterov or amp)"
                ))
            })
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl Serialize for Algorithm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for Algorithm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_probe_eps() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnrollPlan {
    pub algorithm: Algorithm,
    /// Number of projections `T`.
    pub steps: usize,
    pub residual: bool,
    pub projector: DnCNNConfig,
    /// One projector shared by every step instead of one per step.
    #[serde(default)]
    pub tie_weights: bool,
    /// AMP divergence probe scale, relative to the RMS of the probed input.
    #[serde(default = "default_probe_eps")]
    pub amp_probe_eps: f64,
}

impl UnrollPlan {
    pub fn new(algorithm: Algorithm, steps: usize, residual: bool, projector: DnCNNConfig) -> Self {
        Self {
            algorithm,
            steps,
            residual,
            projector,
            tie_weights: false,
            amp_probe_eps: default_probe_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("an unrolled network needs at least one step"));
        }
        if !(self.amp_probe_eps > 0.0 && self.amp_probe_eps.is_finite()) {
            return Err(Error::invalid(format!(
                "amp_probe_eps={} must be positive",
                self.amp_probe_eps
            )));
        }
        self.projector.validate()
    }
}

/// Trainable state of an unrolled network.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledModel {
    pub plan: UnrollPlan,
    pub projectors: Vec<ProjectorParams>,
    /// DeMUN only.
    pub memory: Option<MemoryWeights>,
    /// PGD and Nesterov only: `μ_i`, initialized to 1.
    pub step_sizes: Option<Tensor>,
}

/// Graph handles for one bound model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub projectors: Vec<ProjectorVars>,
    pub alpha: Option<Var>,
    pub betas: Vec<Var>,
    pub step_sizes: Option<Var>,
}

impl ModelVars {
    /// Every parameter handle, in [`UnrolledModel::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.projectors.iter().flat_map(|p| p.all().to_vec()).collect();
        out.extend(self.alpha);
        out.extend(&self.betas);
        out.extend(self.step_sizes);
        out
    }
}

impl UnrolledModel {
    /// Projector `i` is seeded with `seed + i`, so models built from the same
    /// seed share projector weights regardless of algorithm.
    pub fn new(plan: UnrollPlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        let count = if plan.tie_weights { 1 } else { plan.steps };
        let projectors = (0..count)
            .map(|i| ProjectorParams::new(plan.projector, plan.residual, seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let memory = (plan.algorithm == Algorithm::Demun).then(|| MemoryWeights::new(plan.steps));
        let step_sizes = plan
            .algorithm
            .has_step_sizes()
            .then(|| Tensor::ones(&[plan.steps]));
        Ok(Self {
            plan,
            projectors,
            memory,
            step_sizes,
        })
    }

    pub fn projector_for(&self, step: usize) -> usize {
        if self.plan.tie_weights {
            0
        } else {
            step
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.projectors.iter().enumerate() {
            for (name, t) in p.named_params() {
                out.push((format!("proj{i}.{name}"), t));
            }
        }
        if let Some(m) = &self.memory {
            out.push(("memory.alpha".to_string(), &m.alpha));
            for (i, b) in m.beta.iter().enumerate() {
                out.push((format!("memory.beta{i}"), b));
            }
        }
        if let Some(mu) = &self.step_sizes {
            out.push(("step_size".to_string(), mu));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .projectors
            .iter_mut()
            .flat_map(|p| p.params_mut())
            .collect();
        if let Some(m) = &mut self.memory {
            out.push(&mut m.alpha);
            out.extend(m.beta.iter_mut());
        }
        if let Some(mu) = &mut self.step_sizes {
            out.push(mu);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            projectors: self.projectors.iter().map(|p| p.bind(g)).collect(),
            alpha: self.memory.as_ref().map(|m| g.param(m.alpha.clone())),
            betas: self
                .memory
                .iter()
                .flat_map(|m| m.beta.iter())
                .map(|b| g.param(b.clone()))
                .collect(),
            step_sizes: self.step_sizes.as_ref().map(|mu| g.param(mu.clone())),
        }
    }

    /// Folds the BN batch statistics of a training-mode run into the running
    /// statistics, in step order.
    pub fn apply_bn_updates(&mut self, traj: &Trajectory) {
        for (proj, stats) in &traj.bn_updates {
            self.projectors[*proj].update_running(stats);
        }
    }

    /// Gradient-free reconstruction of `y` (`[B, m]`), returning the values of
    /// `x^1..x^T`.
    pub fn reconstruct(
        &self,
        y: &Tensor,
        op: &Arc<MeasurementOperator>,
        mode: Mode,
        probe_seed: u64,
    ) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(mode);
        let vars = self.bind(&mut g);
        let yv = g.constant(y.clone());
        let traj = run_unrolled(&mut g, self, &vars, yv, op, &RunOptions::new(probe_seed))?;
        Ok(traj.states.iter().map(|s| g.value(*s).clone()).collect())
    }
}

/// Per-run knobs that are not model parameters.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub probe_seed: u64,
    /// AMP: use these per-step, per-sample divergences instead of probing.
    pub fixed_divergence: Option<Vec<Vec<f64>>>,
}

impl RunOptions {
    pub fn new(probe_seed: u64) -> Self {
        Self {
            probe_seed,
            fixed_divergence: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    /// `x^1..x^T`, each `[B, n]`.
    pub states: Vec<Var>,
    /// Projector inputs `x̃^0..x̃^{T-1}`.
    pub intermediates: Vec<Var>,
    /// Nesterov: the `t` values used, `t_1..t_{T+1}`.
    pub momentum: Vec<f64>,
    /// AMP: residuals `z^1..z^T`.
    pub residuals: Vec<Var>,
    /// AMP: per-step, per-sample divergence estimates.
    pub divergences: Vec<Vec<f64>>,
    /// `(projector index, per-block batch statistics)` in the order produced.
    pub bn_updates: Vec<(usize, Vec<BatchStats>)>,
}

fn gradient_step(g: &mut Graph, x: Var, y: Var, op: &Arc<dyn LinearMap>) -> Result<Var> {
    let ax = g.linear(x, op.clone())?;
    let r = g.sub(y, ax)?;
    g.linear_adjoint(r, op.clone())
}

fn check_finite(g: &Graph, v: Var, what: &str, step: usize) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            op: format!("{what} at unrolled step {}", step + 1),
        })
    }
}

/// Runs the unrolled network on `y` (`[B, m]`) inside `g`.
///
/// In training mode the BN statistics of every projector call are returned
/// in [`Trajectory::bn_updates`]; they are not applied to `model`.
pub fn run_unrolled(
    g: &mut Graph,
    model: &UnrolledModel,
    vars: &ModelVars,
    y: Var,
    op: &Arc<MeasurementOperator>,
    opts: &RunOptions,
) -> Result<Trajectory> {
    let plan = &model.plan;
    let y_shape = g.shape(y).to_vec();
    if y_shape.len() != 2 || y_shape[1] != op.m() {
        return Err(Error::shape(
            "run_unrolled",
            format!("measurements {y_shape:?}, operator has {} rows", op.m()),
        ));
    }
    let n = plan.projector.image_k * plan.projector.image_k;
    if op.n() != n {
        return Err(Error::shape(
            "run_unrolled",
            format!("operator acts on {} pixels, projector on {n}", op.n()),
        ));
    }
    let batch = y_shape[0];
    let map: Arc<dyn LinearMap> = op.clone();
    let mut traj = Trajectory::default();
    let mut x = g.constant(Tensor::zeros(&[batch, n]));

    match plan.algorithm {
        Algorithm::Pgd | Algorithm::Demun => {
            let mut stack = Vec::with_capacity(plan.steps);
            for i in 0..plan.steps {
                let grad = gradient_step(g, x, y, &map)?;
                let x_tilde = if let Some(mu) = vars.step_sizes {
                    g.combine(&[Coef::Const(1.0), Coef::Param(mu, i)], &[x, grad])?
                } else {
                    stack.push(grad);
                    let alpha = vars.alpha.ok_or_else(|| Error::invalid("missing memory weights"))?;
                    demun_combine(g, Coef::Param(alpha, i), vars.betas[i], x, &stack)?
                };
                x = project(g, model, vars, i, x_tilde, &mut traj)?;
            }
        }
        Algorithm::Nesterov => {
            let mu = vars
                .step_sizes
                .ok_or_else(|| Error::invalid("missing step sizes"))?;
            traj.momentum = nesterov::t_sequence(plan.steps + 1);
            let coefs = nesterov::momentum_coefficients(plan.steps);
            let mut x_n = x;
            for i in 0..plan.steps {
                let grad = gradient_step(g, x_n, y, &map)?;
                let x_tilde = g.combine(&[Coef::Const(1.0), Coef::Param(mu, i)], &[x_n, grad])?;
                let x_next = project(g, model, vars, i, x_tilde, &mut traj)?;
                let c = coefs[i];
                x_n = g.combine(&[Coef::Const(1.0 + c), Coef::Const(-c)], &[x_next, x])?;
                x = x_next;
            }
        }
        Algorithm::Amp => {
            let mut z = y;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.probe_seed);
            let m = op.m() as f64;
            for i in 0..plan.steps {
                let back = g.linear_adjoint(z, map.clone())?;
                let u = g.add(x, back)?;
                let x_next = project(g, model, vars, i, u, &mut traj)?;
                let div = match &opts.fixed_divergence {
                    Some(fixed) => fixed
                        .get(i)
                        .filter(|d| d.len() == batch)
                        .cloned()
                        .ok_or_else(|| Error::invalid(format!("no fixed divergence for step {}", i + 1)))?,
                    None => probe_divergence(g, model, i, u, x_next, plan.amp_probe_eps, &mut rng)?,
                };
                if let Some(b) = div.iter().position(|d| !d.is_finite()) {
                    return Err(Error::NonFinite {
                        op: format!("divergence of sample {b} at unrolled step {}", i + 1),
                    });
                }
                let ax = g.linear(x_next, map.clone())?;
                let plain = g.sub(y, ax)?;
                let factors: Vec<f64> = div.iter().map(|d| d / m).collect();
                let onsager = g.row_scale(z, &factors)?;
                z = g.add(plain, onsager)?;
                check_finite(g, z, "residual", i)?;
                traj.residuals.push(z);
                traj.divergences.push(div);
                x = x_next;
            }
        }
    }
    Ok(traj)
}

fn project(
    g: &mut Graph,
    model: &UnrolledModel,
    vars: &ModelVars,
    step: usize,
    x_tilde: Var,
    traj: &mut Trajectory,
) -> Result<Var> {
    check_finite(g, x_tilde, "projector input", step)?;
    let p = model.projector_for(step);
    let (out, stats) = model.projectors[p].forward(g, &vars.projectors[p], x_tilde)?;
    check_finite(g, out, "state", step)?;
    traj.intermediates.push(x_tilde);
    traj.states.push(out);
    if !stats.is_empty() {
        traj.bn_updates.push((p, stats));
    }
    Ok(out)
}

/// One Rademacher probe per sample through the full projection step, in the
/// graph's mode, treated as a constant.
fn probe_divergence(
    g: &Graph,
    model: &UnrolledModel,
    step: usize,
    u: Var,
    base: Var,
    rel_eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let input = g.value(u);
    let (batch, n) = (input.shape()[0], input.shape()[1]);
    let mut shifted = input.clone();
    let mut steps = Vec::with_capacity(batch);
    for b in 0..batch {
        let z = amp::rademacher_probe(n, rng);
        let e = amp::probe_epsilon(input.row(b), rel_eps);
        let (s, d) = amp::probe_shift(input.row(b), &z, e);
        shifted.data_mut()[b * n..(b + 1) * n].copy_from_slice(&s);
        steps.push(d);
    }
    let proj = &model.projectors[model.projector_for(step)];
    let moved = proj.project(&shifted, g.mode())?;
    let base = g.value(base);
    Ok((0..batch)
        .map(|b| amp::divergence_from_response(moved.row(b), base.row(b), &steps[b]))
        .collect())
}
