//! Trajectory losses: last-layer, ω-weighted intermediate, and skip-L.
//!
//! Every family is a weighted sum of `‖x^i - x*‖²` over the states
//! `x^1..x^T`; [`LossSpec::weights`] gives the weights, so the identities
//! between families hold exactly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Coef, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossSpec {
    LastLayer,
    Intermediate { omega: f64 },
    Skip { every: usize },
}

impl LossSpec {
    pub fn validate(&self, steps: usize) -> Result<()> {
        match *self {
            LossSpec::LastLayer => Ok(()),
            LossSpec::Intermediate { omega } => {
                if omega > 0.0 && omega <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "intermediate loss weight omega={omega} must lie in (0, 1]"
                    )))
                }
            }
            LossSpec::Skip { every } => {
                if every >= 1 && steps % every == 0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!(
                        "skip loss spacing {every} must be a positive divisor of T={steps}"
                    )))
                }
            }
        }
    }

    /// Weight on `‖x^i - x*‖²` for `i = 1..=steps`.
    pub fn weights(&self, steps: usize) -> Result<Vec<f64>> {
        self.validate(steps)?;
        Ok(match *self {
            LossSpec::LastLayer => (1..=steps).map(|i| if i == steps { 1.0 } else { 0.0 }).collect(),
            LossSpec::Intermediate { omega } => {
                (1..=steps).map(|i| omega.powi((steps - i) as i32)).collect()
            }
            LossSpec::Skip { every } => (1..=steps)
                .map(|i| if (steps - i) % every == 0 { 1.0 } else { 0.0 })
                .collect(),
        })
    }

    /// The loss as a graph scalar, summed over every sample in the batch.
    pub fn apply(&self, g: &mut Graph, states: &[Var], target: Var) -> Result<Var> {
        let weights = self.weights(states.len())?;
        let mut coefs = Vec::new();
        let mut terms = Vec::new();
        for (w, s) in weights.iter().zip(states) {
            if *w != 0.0 {
                terms.push(g.mse(*s, target)?);
                coefs.push(Coef::Const(*w));
            }
        }
        g.combine(&coefs, &terms)
    }

    /// Same value as [`LossSpec::apply`] computed from per-state squared errors.
    pub fn evaluate(&self, squared_errors: &[f64]) -> Result<f64> {
        let weights = self.weights(squared_errors.len())?;
        Ok(weights
            .iter()
            .zip(squared_errors)
            .filter(|(w, _)| **w != 0.0)
            .fold(0.0, |acc, (w, e)| acc + w * e))
    }
}

pub fn loss_last_layer(g: &mut Graph, states: &[Var], target: Var) -> Result<Var> {
    LossSpec::LastLayer.apply(g, states, target)
}

pub fn loss_intermediate(g: &mut Graph, states: &[Var], target: Var, omega: f64) -> Result<Var> {
    LossSpec::Intermediate { omega }.apply(g, states, target)
}

pub fn loss_skip(g: &mut Graph, states: &[Var], target: Var, every: usize) -> Result<Var> {
    LossSpec::Skip { every }.apply(g, states, target)
}

impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ll" {
            return Ok(LossSpec::LastLayer);
        }
        if let Some(w) = s.strip_prefix("iw:") {
            let omega: f64 = w
                .parse()
                .map_err(|_| Error::invalid(format!("bad omega in loss id `{s}`")))?;
            let spec = LossSpec::Intermediate { omega };
            spec.validate(1)?;
            return Ok(spec);
        }
        if let Some(l) = s.strip_prefix("skip:") {
            let every: usize = l
                .parse()
                .map_err(|_| Error::invalid(format!("bad spacing in loss id `{s}`")))?;
            if every == 0 {
                return Err(Error::invalid("skip loss spacing must be positive"));
            }
            return Ok(LossSpec::Skip { every });
        }
        Err(Error::invalid(format!(
            "unknown loss id `{s}` (expected ll, iw:<omega>, skip:<L>)"
        )))
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::LastLayer => write!(f, "ll"),
            LossSpec::Intermediate { omega } => write!(f, "iw:{omega}"),
            LossSpec::Skip { every } => write!(f, "skip:{every}"),
        }
    }
}

impl TryFrom<String> for LossSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossSpec> for String {
    fn from(l: LossSpec) -> String {
        l.to_string()
    }
}
