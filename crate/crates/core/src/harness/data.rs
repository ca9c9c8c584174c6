//! Synthetic Gaussian-cluster datasets.
//!
//! Each class has its own mean; pairwise distances between class means are at
//! least `separation`. Every class is further split into `subclusters` groups
//! offset along a class-specific axis, so that "class c with feature a above
//! a threshold" picks out one group. Those predicates serve as semantic
//! backdoor triggers.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::attacks::Trigger;
use crate::error::{Error, Result};
use crate::model::{Dataset, Sample};
use crate::rng::Streams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub spread: f64,
    pub subclusters: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 32,
            separation: 6.0,
            spread: 1.0,
            subclusters: 2,
        }
    }
}

/// Class layout shared by the train and test sets of one experiment.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub means: Vec<Vec<f64>>,
    /// Axis along which each class's sub-clusters are spread.
    pub sub_axes: Vec<usize>,
    sub_step: f64,
}

const MEAN_ATTEMPTS: usize = 10_000;

impl SyntheticData {
    pub fn new<R: Rng + ?Sized>(spec: SyntheticSpec, rng: &mut R) -> Result<Self> {
        let SyntheticSpec {
            num_classes: c,
            input_dim: d,
            separation,
            spread,
            subclusters,
        } = spec;
        if c < 2 || d == 0 {
            return Err(Error::config("synthetic data needs >= 2 classes and >= 1 feature"));
        }
        if !(separation > 0.0) || !(spread >= 0.0) || subclusters == 0 {
            return Err(Error::config(
                "synthetic separation must be > 0, spread >= 0, subclusters >= 1",
            ));
        }
        let mut axes: Vec<usize> = (0..d).collect();
        axes.shuffle(rng);
        // a hair above sep / sqrt(2) so rounding never puts a pair below `separation`
        let radius = separation / std::f64::consts::SQRT_2 * (1.0 + 1e-12);
        let (means, sub_axes) = if d >= c {
            let means = (0..c)
                .map(|k| {
                    let mut m = vec![0.0; d];
                    m[axes[k]] = radius;
                    m
                })
                .collect();
            let spare = d - c;
            let sub_axes = (0..c)
                .map(|k| if spare > 0 { axes[c + k % spare] } else { axes[(k + 1) % c] })
                .collect();
            (means, sub_axes)
        } else {
            (random_means(c, d, separation, rng)?, (0..c).map(|k| axes[k % d]).collect())
        };
        Ok(Self {
            spec,
            means,
            sub_axes,
            sub_step: 3.0 * spread.max(f64::MIN_POSITIVE),
        })
    }

    fn sub_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.spec.subclusters as f64 - 1.0) / 2.0) * self.sub_step
    }

    /// `per_class` samples of every class, interleaved by class, sub-clusters
    /// assigned round-robin.
    pub fn sample<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Result<Dataset> {
        let c = self.spec.num_classes;
        let noise = Normal::new(0.0, self.spec.spread).map_err(|e| Error::config(e.to_string()))?;
        let mut samples = Vec::with_capacity(per_class * c);
        for i in 0..per_class {
            for class in 0..c {
                let j = i % self.spec.subclusters;
                let mut x: Vec<f64> = self.means[class].iter().map(|m| m + noise.sample(rng)).collect();
                x[self.sub_axes[class]] += self.sub_offset(j);
                samples.push(Sample::new(x, class));
            }
        }
        Dataset::new(samples, c)
    }

    /// Predicate selecting the last sub-cluster of `class`.
    pub fn trigger(&self, class: usize) -> Result<Trigger> {
        if class >= self.spec.num_classes {
            return Err(Error::config(format!("trigger class {class} out of range")));
        }
        if self.spec.subclusters < 2 {
            return Err(Error::config("backdoor triggers need at least 2 sub-clusters"));
        }
        let axis = self.sub_axes[class];
        let s = self.spec.subclusters;
        let mid = (self.sub_offset(s - 2) + self.sub_offset(s - 1)) / 2.0;
        Ok(Trigger {
            class,
            feature: axis,
            threshold: self.means[class][axis] + mid,
        })
    }
}

fn random_means<R: Rng + ?Sized>(c: usize, d: usize, separation: f64, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let scale = separation * (c as f64).sqrt();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0;
    while means.len() < c {
        attempts += 1;
        if attempts > MEAN_ATTEMPTS {
            return Err(Error::config(format!(
                "could not place {c} class means at separation {separation} in {d} dimensions"
            )));
        }
        let cand: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect();
        let far = means.iter().all(|m| {
            m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= separation
        });
        if far {
            means.push(cand);
        }
    }
    Ok(means)
}

/// One-shot synthetic dataset: class layout from stream `data/[0]`, samples
/// from `data/[1]` of `seed`.
pub fn synth_dataset(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    separation: f64,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let streams = Streams::new(seed);
    let layout = SyntheticData::new(
        SyntheticSpec {
            num_classes,
            input_dim,
            separation,
            spread: cluster_spread,
            subclusters: 2,
        },
        &mut streams.stream("data", &[0]),
    )?;
    layout.sample(per_class, &mut streams.stream("data", &[1]))
}
