//! Client-level differential privacy: L2 clipping of each update followed by
//! one Gaussian draw on the sum of a group.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::defense::SubModel;
use crate::error::{Error, Result};
use crate::federation::{ClientId, UpdateRecord};
use crate::model::ParameterVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    /// Clipping bound `S` on each update's L2 norm.
    pub clip: f64,
    /// Noise multiplier: the per-coordinate standard deviation is `sigma * clip`.
    pub sigma: f64,
    pub apply_to_submodels: bool,
    pub apply_to_global: bool,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::config("dp clip bound must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("dp sigma must be >= 0"));
        }
        Ok(())
    }
}

/// Scales `delta` by `1 / max(1, ||delta|| / clip)`.
pub fn clip_delta(delta: &ParameterVector, clip: f64) -> ParameterVector {
    let norm = delta.norm_l2();
    let divisor = (norm / clip).max(1.0);
    if divisor == 1.0 {
        delta.clone()
    } else {
        delta.scaled(1.0 / divisor)
    }
}

/// `(1/K) (sum clip(delta_i) + N(0, sigma^2 clip^2 I))`
pub fn dp_mean<R: Rng + ?Sized>(
    deltas: &[&ParameterVector],
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<ParameterVector> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::input("dp_mean of an empty list"))?;
    let mut sum = ParameterVector::zeros(first.dim());
    for d in deltas {
        sum.axpy(1.0, &clip_delta(d, clip))?;
    }
    add_noise(&mut sum, sigma * clip, rng)?;
    Ok(sum.scaled(1.0 / deltas.len() as f64))
}

fn add_noise<R: Rng + ?Sized>(v: &mut ParameterVector, std: f64, rng: &mut R) -> Result<()> {
    if std == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::input(e.to_string()))?;
    for x in v.as_mut_slice() {
        *x += normal.sample(rng);
    }
    Ok(())
}

/// Replaces a sub-model's mean delta with the noisy mean of its members'
/// clipped updates.
pub fn perturb_submodel<R: Rng + ?Sized>(
    sub: &SubModel,
    updates: &[UpdateRecord],
    global: &ParameterVector,
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<SubModel> {
    let deltas = sub
        .members
        .iter()
        .map(|m| {
            updates
                .iter()
                .find(|u| u.owner == *m)
                .map(|u| &u.delta)
                .ok_or_else(|| Error::input(format!("no update for sub-model member {m}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = dp_mean(&deltas, clip, sigma, rng)?;
    SubModel::new(sub.id, sub.members.clone(), global, mean)
}

/// Member sets must be pairwise disjoint before noise is drawn per group.
pub fn assert_disjoint(submodels: &[SubModel]) -> Result<()> {
    let mut seen: BTreeSet<ClientId> = BTreeSet::new();
    for s in submodels {
        for m in &s.members {
            if !seen.insert(*m) {
                return Err(Error::Protocol(format!(
                    "client {m} appears in more than one sub-model"
                )));
            }
        }
    }
    Ok(())
}

/// Adds `N(0, (sigma * clip / k)^2)` per coordinate to an aggregate built from
/// `k` clipped updates.
pub fn perturb_global<R: Rng + ?Sized>(
    global: &ParameterVector,
    k: usize,
    clip: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<ParameterVector> {
    let mut out = global.clone();
    add_noise(&mut out, sigma * clip / k as f64, rng)?;
    Ok(out)
}
