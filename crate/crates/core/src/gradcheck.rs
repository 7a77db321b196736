//! Central finite differences, used as an independent oracle for autodiff.

use std::sync::Arc;

use crate::autodiff::{Graph, Mode};
use crate::error::Result;
use crate::operator::MeasurementOperator;
use crate::tensor::Tensor;
use crate::unrolled::{run_unrolled, Algorithm, LossSpec, RunOptions, UnrolledModel};

/// Default step for central differences in `f64`.
pub const FD_STEP: f64 = 1e-5;

/// Smaller steps tried for entries that disagree at [`FD_STEP`]. A ReLU
/// switching sign inside `[θ - h, θ + h]` spoils that difference; a step
/// that no longer straddles the kink recovers the one-sided slope.
pub const FD_RETRY_STEPS: [f64; 2] = [1e-6, 1e-7];

/// Relative error above which an entry is re-checked with the retry steps.
pub const FD_RETRY_THRESHOLD: f64 = 1e-6;

/// Gradient of `f` at `x` by central differences with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps gradients that are zero up to rounding from reporting a
/// huge relative error.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error over paired gradient entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| relative_error(*a, *b, floor))
        .fold(0.0, f64::max)
}

/// Worst disagreement between autodiff and finite differences for one loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub max_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Parameter index and element of flat entry `flat` of `named_params`.
fn locate(model: &UnrolledModel, flat: usize) -> (usize, usize) {
    let mut rest = flat;
    for (p, (_, t)) in model.named_params().iter().enumerate() {
        if rest < t.numel() {
            return (p, rest);
        }
        rest -= t.numel();
    }
    panic!("flat index {flat} out of range")
}

/// Worst relative error between autodiff and central-difference gradients of
/// each loss over every trainable parameter of `model`.
///
/// The denominator floor is `floor` times the largest analytic gradient
/// entry (at least 1), so entries whose true gradient is structurally zero,
/// such as a conv bias feeding batch norm, are judged against the rounding
/// noise of the loss rather than against zero.
///
/// AMP divergences are frozen at their values in the unperturbed run, the
/// same way backpropagation treats them. Entries off by more than
/// [`FD_RETRY_THRESHOLD`] are re-differenced with [`FD_RETRY_STEPS`] and
/// keep the closest estimate.
pub fn model_gradient_errors(
    model: &UnrolledModel,
    y: &Tensor,
    target: &Tensor,
    op: &Arc<MeasurementOperator>,
    losses: &[LossSpec],
    mode: Mode,
    floor: f64,
) -> Result<Vec<GradientReport>> {
    let mut opts = RunOptions::new(0);
    let mut g = Graph::new(mode);
    let vars = model.bind(&mut g);
    let yv = g.constant(y.clone());
    let traj = run_unrolled(&mut g, model, &vars, yv, op, &opts)?;
    if model.plan.algorithm == Algorithm::Amp {
        opts.fixed_divergence = Some(traj.divergences);
    }

    let mut analytic = Vec::with_capacity(losses.len());
    for spec in losses {
        let mut g = Graph::new(mode);
        let vars = model.bind(&mut g);
        let yv = g.constant(y.clone());
        let tv = g.constant(target.clone());
        let traj = run_unrolled(&mut g, model, &vars, yv, op, &opts)?;
        let loss = spec.apply(&mut g, &traj.states, tv)?;
        g.backward(loss)?;
        let flat: Vec<f64> = vars
            .all()
            .into_iter()
            .flat_map(|v| g.grad_or_zeros(v).into_data())
            .collect();
        analytic.push(flat);
    }

    let state_errors = |m: &UnrolledModel| -> Result<Vec<f64>> {
        let mut g = Graph::new(mode);
        let vars = m.bind(&mut g);
        let yv = g.constant(y.clone());
        let traj = run_unrolled(&mut g, m, &vars, yv, op, &opts)?;
        Ok(traj
            .states
            .iter()
            .map(|s| {
                g.value(*s)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect())
    };

    let mut probe = model.clone();
    let mut difference = |flat: usize, h: f64| -> Result<Vec<f64>> {
        let (p, e) = locate(&probe, flat);
        let orig = probe.params_mut()[p].data()[e];
        probe.params_mut()[p].data_mut()[e] = orig + h;
        let plus = state_errors(&probe)?;
        probe.params_mut()[p].data_mut()[e] = orig - h;
        let minus = state_errors(&probe)?;
        probe.params_mut()[p].data_mut()[e] = orig;
        losses
            .iter()
            .map(|spec| Ok((spec.evaluate(&plus)? - spec.evaluate(&minus)?) / (2.0 * h)))
            .collect()
    };

    let total: usize = model.named_params().iter().map(|(_, t)| t.numel()).sum();
    let floors: Vec<f64> = analytic
        .iter()
        .map(|a| floor * a.iter().fold(1.0f64, |m, v| m.max(v.abs())))
        .collect();
    let mut numeric = vec![vec![0.0; total]; losses.len()];
    for flat in 0..total {
        let mut best = difference(flat, FD_STEP)?;
        for h in FD_RETRY_STEPS {
            let suspect = (0..losses.len())
                .any(|l| relative_error(analytic[l][flat], best[l], floors[l]) > FD_RETRY_THRESHOLD);
            if !suspect {
                break;
            }
            let retry = difference(flat, h)?;
            for l in 0..losses.len() {
                let err = |v: f64| relative_error(analytic[l][flat], v, floors[l]);
                if err(retry[l]) < err(best[l]) {
                    best[l] = retry[l];
                }
            }
        }
        for (l, v) in best.into_iter().enumerate() {
            numeric[l][flat] = v;
        }
    }
    let names: Vec<(String, usize)> = model
        .named_params()
        .into_iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i)))
        .collect();
    Ok(analytic
        .iter()
        .zip(&numeric)
        .zip(&floors)
        .map(|((a, n), &floor)| {
            let (idx, err) = a
                .iter()
                .zip(n)
                .map(|(x, y)| relative_error(*x, *y, floor))
                .enumerate()
                .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
            GradientReport {
                max_error: err,
                worst: names[idx].clone(),
                analytic: a[idx],
                numeric: n[idx],
            }
        })
        .collect())
}
