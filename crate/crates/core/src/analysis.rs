//! Probability that a poisoned sub-model lands with colluding evaluators.
//!
//! Setting: `K` clients per round, `M = K p` of them malicious. A sub-model
//! averages `u` updates drawn without replacement; it is then evaluated by `e`
//! clients drawn from the `K - u` non-members. With `i` malicious members the
//! evaluator pool holds `M - i` malicious clients, so
//!
//! ```text
//! P(i members malicious)         = C(K-M, u-i) C(M, i) / C(K, u)
//! P(t evaluators malicious | i)  = C(M-i, t) C(K-M-u+i, e-t) / C(K-u, e)
//! joint(t)                       = sum_{i=1..u} P(i) P(t | i)
//! ```
//!
//! [`p_evade_exact`] conditions the joint on the sub-model holding at least one
//! poisoned update. [`Reading`] exposes the unconditioned sum and the
//! exactly-one-poisoned variant as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::defense::penalty;
use crate::error::{Error, Result};
use crate::rng::Streams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvasionParams {
    /// clients per round
    pub k: u64,
    /// malicious clients among them (`K p`)
    pub malicious: u64,
    /// updates per sub-model
    pub u: u64,
    /// evaluators per sub-model
    pub e: u64,
    /// malicious evaluators
    pub t: u64,
}

impl EvasionParams {
    pub fn new(k: u64, malicious: u64, u: u64, e: u64, t: u64) -> Result<Self> {
        let p = Self {
            k,
            malicious,
            u,
            e,
            t,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters from a malicious proportion; `k * p` must be whole.
    pub fn from_proportion(k: u64, p: f64, u: u64, e: u64, t: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::input(format!("malicious proportion {p} outside [0, 1)")));
        }
        let kp = k as f64 * p;
        let rounded = kp.round();
        if (kp - rounded).abs() > 1e-9 {
            return Err(Error::input(format!("K p = {kp} is not a whole number of clients")));
        }
        Self::new(k, rounded as u64, u, e, t)
    }

    pub fn proportion(&self) -> f64 {
        self.malicious as f64 / self.k as f64
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::input("K must be positive"));
        }
        if self.malicious > self.k {
            return Err(Error::input("more malicious clients than clients"));
        }
        if self.u == 0 || self.u > self.k {
            return Err(Error::input(format!("sub-model size u = {} outside [1, K]", self.u)));
        }
        if self.e > self.k - self.u {
            return Err(Error::input(format!(
                "e = {} exceeds the K - u = {} non-members",
                self.e,
                self.k - self.u
            )));
        }
        if self.t > self.e {
            return Err(Error::input(format!("t = {} exceeds e = {}", self.t, self.e)));
        }
        Ok(())
    }

    pub fn with_t(self, t: u64) -> Result<Self> {
        Self::new(self.k, self.malicious, self.u, self.e, t)
    }
}

/// `ln C(n, k)`, or `None` when the coefficient is zero (k < 0 or k > n).
pub fn ln_choose(n: i64, k: i64) -> Option<f64> {
    if n < 0 || k < 0 || k > n {
        return None;
    }
    if k == 0 || k == n {
        return Some(0.0);
    }
    Some(ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0))
}

/// Ratio of products of binomials, evaluated in log space; zero if any
/// numerator coefficient vanishes.
fn hyper_ratio(num: [(i64, i64); 2], den: (i64, i64)) -> f64 {
    let (Some(a), Some(b), Some(c)) = (
        ln_choose(num[0].0, num[0].1),
        ln_choose(num[1].0, num[1].1),
        ln_choose(den.0, den.1),
    ) else {
        return 0.0;
    };
    (a + b - c).exp()
}

fn members_pmf(p: &EvasionParams, i: u64) -> f64 {
    let (k, m, u) = (p.k as i64, p.malicious as i64, p.u as i64);
    let i = i as i64;
    hyper_ratio([(k - m, u - i), (m, i)], (k, u))
}

fn evaluators_pmf(p: &EvasionParams, i: u64) -> f64 {
    let (k, m, u, e, t) = (
        p.k as i64,
        p.malicious as i64,
        p.u as i64,
        p.e as i64,
        p.t as i64,
    );
    let i = i as i64;
    hyper_ratio([(m - i, t), (k - m - u + i, e - t)], (k - u, e))
}

/// Which conditioning the evasion probability uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reading {
    /// The bare sum over `i = 1..u`: `P(sub-model poisoned and t malicious evaluators)`.
    Joint,
    /// `P(t malicious evaluators | at least one poisoned member)`.
    GivenPoisoned,
    /// `P(t malicious evaluators | exactly one poisoned member)`.
    GivenExactlyOne,
}

impl Reading {
    pub const ALL: [Reading; 3] = [Reading::Joint, Reading::GivenPoisoned, Reading::GivenExactlyOne];

    pub fn name(&self) -> &'static str {
        match self {
            Reading::Joint => "joint",
            Reading::GivenPoisoned => "given_poisoned",
            Reading::GivenExactlyOne => "given_exactly_one",
        }
    }
}

pub fn p_evade(params: &EvasionParams, reading: Reading) -> Result<f64> {
    params.validate()?;
    let joint: f64 = (1..=params.u)
        .map(|i| members_pmf(params, i) * evaluators_pmf(params, i))
        .sum();
    let value = match reading {
        Reading::Joint => joint,
        Reading::GivenPoisoned => {
            let poisoned = 1.0 - members_pmf(params, 0);
            if poisoned <= 0.0 {
                0.0
            } else {
                joint / poisoned
            }
        }
        Reading::GivenExactlyOne => {
            if params.malicious == 0 {
                0.0
            } else {
                evaluators_pmf(params, 1)
            }
        }
    };
    Ok(value.clamp(0.0, 1.0))
}

/// Probability that a sub-model containing at least one poisoned update is
/// evaluated by exactly `t` malicious clients.
pub fn p_evade_exact(params: &EvasionParams) -> Result<f64> {
    p_evade(params, Reading::GivenPoisoned)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Trials in which the sub-model held at least one malicious member.
    pub accepted: u64,
    pub trials: u64,
}

const MC_CHUNK: u64 = 1 << 16;

/// Literal simulation of the sampling process behind [`p_evade_exact`].
///
/// Each trial draws `u` members and then `e` evaluators among the remaining
/// clients by a partial Fisher-Yates shuffle, and is kept only when at least
/// one member is malicious. Chunks of trials run in parallel on their own
/// streams and are reduced in chunk order.
pub fn p_evade_montecarlo(params: &EvasionParams, trials: u64, seed: u64) -> Result<MonteCarloEstimate> {
    params.validate()?;
    if trials == 0 {
        return Err(Error::input("Monte Carlo needs at least one trial"));
    }
    let streams = Streams::new(seed);
    let chunks = trials.div_ceil(MC_CHUNK);
    let (k, m, u, e, t) = (
        params.k as usize,
        params.malicious as usize,
        params.u as usize,
        params.e as usize,
        params.t as usize,
    );
    let counts: Vec<(u64, u64)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::from_seed(streams.seed_bytes("montecarlo", &[chunk]));
            let n = MC_CHUNK.min(trials - chunk * MC_CHUNK);
            // client j is malicious iff j < m
            let mut pop: Vec<usize> = (0..k).collect();
            let (mut accepted, mut hits) = (0u64, 0u64);
            for _ in 0..n {
                for pos in 0..u + e {
                    let j = rng.random_range(pos..k);
                    pop.swap(pos, j);
                }
                let in_members = pop[..u].iter().filter(|&&c| c < m).count();
                if in_members == 0 {
                    continue;
                }
                accepted += 1;
                let in_evaluators = pop[u..u + e].iter().filter(|&&c| c < m).count();
                if in_evaluators == t {
                    hits += 1;
                }
            }
            (accepted, hits)
        })
        .collect();
    let (accepted, hits) = counts
        .iter()
        .fold((0u64, 0u64), |(a, h), (ca, ch)| (a + ca, h + ch));
    if accepted == 0 {
        return Ok(MonteCarloEstimate {
            estimate: 0.0,
            std_error: 0.0,
            accepted,
            trials,
        });
    }
    let p = hits as f64 / accepted as f64;
    Ok(MonteCarloEstimate {
        estimate: p,
        std_error: (p * (1.0 - p) / accepted as f64).sqrt(),
        accepted,
        trials,
    })
}

/// `(r, c)` rows for `r = 0..=r_max`.
pub fn penalty_curve(e: usize, v: f64, r_max: usize) -> Result<Vec<(usize, f64)>> {
    (0..=r_max).map(|r| Ok((r, penalty(r, e, v)?))).collect()
}
