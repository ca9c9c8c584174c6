//! Poisoning behaviours available to malicious clients.
//!
//! Data poisoning (label flipping, fraction mislabelling, feature-triggered
//! backdoors) produces the dataset the attacker trains on. Update crafting then
//! turns the attacker's desired model `X` into the delta it submits, optionally
//! scaled so that it survives (or exactly replaces) the server average.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::defense::{EvaluationReport, SubmodelId};
use crate::error::{Error, Result};
use crate::federation::ClientId;
use crate::model::{Dataset, ParameterVector, Sample, TrainConfig};

/// A feature predicate: samples of `class` whose `feature` exceeds `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    pub class: usize,
    pub feature: usize,
    pub threshold: f64,
}

impl Trigger {
    pub fn matches(&self, sample: &Sample) -> bool {
        sample.label == self.class
            && sample
                .features
                .get(self.feature)
                .is_some_and(|v| *v > self.threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackKind {
    LabelFlip {
        src: usize,
        dst: usize,
    },
    Backdoor {
        trigger: Trigger,
        target: usize,
        augment_copies: usize,
        jitter_scale: f64,
    },
    /// Relabel a random fraction of the local data to `target`.
    Mislabel { fraction: f64, target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalingSpec {
    None,
    /// Submit `factor * (X - G)`.
    ScaleByFactor(f64),
    /// Submit the delta that makes a plain average over all round updates equal `X`.
    FullReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub scaling: ScalingSpec,
}

impl AttackSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let check = |c: usize, what: &str| {
            if c >= num_classes {
                Err(Error::config(format!(
                    "attack {what} class {c} outside [0, {num_classes})"
                )))
            } else {
                Ok(())
            }
        };
        match self.kind {
            AttackKind::LabelFlip { src, dst } => {
                check(src, "source")?;
                check(dst, "destination")?;
                if src == dst {
                    return Err(Error::config("label-flip source equals destination"));
                }
            }
            AttackKind::Backdoor {
                trigger,
                target,
                jitter_scale,
                ..
            } => {
                check(trigger.class, "trigger")?;
                check(target, "target")?;
                if !(jitter_scale >= 0.0) {
                    return Err(Error::config("backdoor jitter_scale must be >= 0"));
                }
            }
            AttackKind::Mislabel { fraction, target } => {
                check(target, "target")?;
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::config("mislabel fraction must be in (0, 1]"));
                }
            }
        }
        if let ScalingSpec::ScaleByFactor(f) = self.scaling {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::config("scaling factor must be positive"));
            }
        }
        Ok(())
    }

    /// Builds the attacker's training set from its clean local data.
    pub fn poison<R: Rng + ?Sized>(&self, data: &Dataset, rng: &mut R) -> Result<Dataset> {
        match self.kind {
            AttackKind::LabelFlip { src, dst } => poison_labelflip(data, src, dst),
            AttackKind::Backdoor {
                trigger,
                target,
                augment_copies,
                jitter_scale,
            } => poison_backdoor(data, &trigger, target, augment_copies, jitter_scale, rng),
            AttackKind::Mislabel { fraction, target } => poison_fraction(data, fraction, target, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReportStrategy {
    /// Never flag anything.
    AlwaysClear,
    /// Never flag poisoned sub-models; flag each class of honest ones with
    /// probability `frame_rate`.
    FrameHonest { frame_rate: f64 },
}

/// Everything a malicious client needs to run its pipeline.
#[derive(Debug, Clone)]
pub struct Attacker {
    pub attack: AttackSpec,
    pub report: ReportStrategy,
    pub poisoned: Dataset,
    /// Overrides the shared training configuration when the attacker trains on
    /// poisoned data.
    pub train: Option<TrainConfig>,
}

fn check_class(data: &Dataset, c: usize) -> Result<()> {
    if c >= data.num_classes() {
        return Err(Error::input(format!(
            "class {c} outside [0, {})",
            data.num_classes()
        )));
    }
    Ok(())
}

pub fn poison_labelflip(data: &Dataset, src: usize, dst: usize) -> Result<Dataset> {
    check_class(data, src)?;
    check_class(data, dst)?;
    if src == dst {
        return Err(Error::input("label flip requires src != dst"));
    }
    let samples = data
        .samples()
        .iter()
        .map(|s| Sample {
            features: s.features.clone(),
            label: if s.label == src { dst } else { s.label },
        })
        .collect();
    Dataset::new(samples, data.num_classes())
}

/// Relabels `ceil(fraction * |data|)` uniformly chosen samples to `target`.
pub fn poison_fraction<R: Rng + ?Sized>(
    data: &Dataset,
    fraction: f64,
    target: usize,
    rng: &mut R,
) -> Result<Dataset> {
    check_class(data, target)?;
    if data.is_empty() {
        return Err(Error::input("cannot poison an empty dataset"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::input("fraction must be in (0, 1]"));
    }
    // round before ceil so that e.g. 0.02 * 1000 gives 20, not 21
    let raw = fraction * data.len() as f64;
    let amount = ((raw * 1e9).round() / 1e9).ceil() as usize;
    let amount = amount.min(data.len());
    let mut samples = data.samples().to_vec();
    for i in index::sample(rng, data.len(), amount) {
        samples[i].label = target;
    }
    Dataset::new(samples, data.num_classes())
}

/// Relabels trigger-matching samples to `target` and appends `augment_copies`
/// jittered copies of randomly chosen matching samples.
pub fn poison_backdoor<R: Rng + ?Sized>(
    data: &Dataset,
    trigger: &Trigger,
    target: usize,
    augment_copies: usize,
    jitter_scale: f64,
    rng: &mut R,
) -> Result<Dataset> {
    check_class(data, target)?;
    if !(jitter_scale >= 0.0) {
        return Err(Error::input("jitter_scale must be >= 0"));
    }
    let matching: Vec<usize> = data
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| trigger.matches(s))
        .map(|(i, _)| i)
        .collect();
    if matching.is_empty() {
        return Err(Error::input("backdoor trigger matches no sample"));
    }
    let mut samples = data.samples().to_vec();
    for &i in &matching {
        samples[i].label = target;
    }
    let noise = Normal::new(0.0, jitter_scale).map_err(|e| Error::input(e.to_string()))?;
    for _ in 0..augment_copies {
        let src = &data.samples()[matching[rng.random_range(0..matching.len())]];
        let features = if jitter_scale == 0.0 {
            src.features.clone()
        } else {
            src.features.iter().map(|v| v + noise.sample(rng)).collect()
        };
        samples.push(Sample::new(features, target));
    }
    Dataset::new(samples, data.num_classes())
}

/// Turns the attacker's desired model `x` into the delta it submits.
///
/// For [`ScalingSpec::FullReplacement`] the estimated `n/eta` is the number of
/// aggregated updates, `others.len() + 1`, and the result is
/// `n (X - G) - sum(others)`, so that `G + mean(others ++ [delta]) == X`.
pub fn craft_update(
    scaling: ScalingSpec,
    x: &ParameterVector,
    global: &ParameterVector,
    others: Option<&[&ParameterVector]>,
) -> Result<ParameterVector> {
    let direction = x.sub(global)?;
    match scaling {
        ScalingSpec::None => Ok(direction),
        ScalingSpec::ScaleByFactor(f) => Ok(direction.scaled(f)),
        ScalingSpec::FullReplacement => {
            let others = others
                .ok_or_else(|| Error::input("full replacement needs the other updates"))?;
            let n = (others.len() + 1) as f64;
            let mut delta = direction.scaled(n);
            for o in others {
                delta.axpy(-1.0, o)?;
            }
            Ok(delta)
        }
    }
}

/// Reports filed by a colluding evaluator.
///
/// `assignments` lists `(sub-model, classes)` pairs from the delegation plan,
/// and `is_poisoned` tells the attacker which sub-models carry a poisoned
/// update (colluders know which updates are their own).
pub fn malicious_report<R, F>(
    evaluator: ClientId,
    assignments: &[(SubmodelId, Vec<usize>)],
    is_poisoned: F,
    strategy: ReportStrategy,
    rng: &mut R,
) -> Vec<EvaluationReport>
where
    R: Rng + ?Sized,
    F: Fn(SubmodelId) -> bool,
{
    assignments
        .iter()
        .map(|(sub, classes)| {
            let flags = match strategy {
                ReportStrategy::AlwaysClear => classes.iter().map(|&c| (c, false)).collect(),
                ReportStrategy::FrameHonest { frame_rate } => {
                    let poisoned = is_poisoned(*sub);
                    classes
                        .iter()
                        .map(|&c| (c, !poisoned && rng.random_bool(frame_rate.clamp(0.0, 1.0))))
                        .collect()
                }
            };
            EvaluationReport {
                evaluator,
                submodel: *sub,
                flags,
            }
        })
        .collect()
}
