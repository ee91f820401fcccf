//! Differential-privacy primitives.
//!
//! Noise, the exponential mechanism, a stability-based histogram and the
//! deviating private algorithm built on top of it. All randomness comes from
//! the caller's stream.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::query::StatisticalQuery;
use crate::seeding::Rng;
use crate::Symbol;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBudget")]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Deserialize)]
struct RawBudget {
    epsilon: f64,
    delta: f64,
}

impl TryFrom<RawBudget> for PrivacyBudget {
    type Error = Error;
    fn try_from(raw: RawBudget) -> Result<Self> {
        PrivacyBudget::new(raw.epsilon, raw.delta)
    }
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(validation(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(validation(format!("delta must lie in [0,1), got {delta}")));
        }
        Ok(PrivacyBudget { epsilon, delta })
    }

    fn require_positive_delta(&self, what: &str) -> Result<()> {
        if self.delta <= 0.0 {
            return Err(validation(format!("{what} needs delta > 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Laplace,
    Gaussian,
}

/// Laplace noise with the given scale `b`, or Gaussian noise with standard deviation `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub scale: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(validation(format!("noise scale must be positive, got {scale}")));
        }
        Ok(NoiseSpec { kind, scale })
    }

    pub fn draw(&self, rng: &mut Rng) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                self.scale * z
            }
            NoiseKind::Laplace => {
                let e: f64 = Exp1.sample(rng);
                if rng.random::<bool>() {
                    self.scale * e
                } else {
                    -self.scale * e
                }
            }
        }
    }
}

pub fn add_noise(value: f64, spec: &NoiseSpec, rng: &mut Rng) -> f64 {
    value + spec.draw(rng)
}

/// Per-query Gaussian standard deviation for `k` statistical queries on `n`
/// samples:
///
/// ```text
/// sigma = sqrt(2 k ln(1.25 / delta)) / (n * epsilon)
/// ```
///
/// Each statistical query has sensitivity `1/n`. This is the Gaussian-mechanism
/// calibration `sqrt(2 ln(1.25/delta)) * Δ / epsilon` with the `sqrt(k)`
/// scaling of advanced composition folded in.
pub fn calibrate_gaussian(k: usize, n: usize, budget: &PrivacyBudget) -> Result<NoiseSpec> {
    if k == 0 || n == 0 {
        return Err(validation("k and n must be at least 1"));
    }
    budget.require_positive_delta("Gaussian calibration")?;
    let sigma = (2.0 * k as f64 * (1.25 / budget.delta).ln()).sqrt() / (n as f64 * budget.epsilon);
    NoiseSpec::new(NoiseKind::Gaussian, sigma)
}

/// Normalized selection weights `exp(scale * score_i)` with max-subtraction.
pub fn exponential_weights(scores: &[f64], scale: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(validation("exponential mechanism needs at least one candidate"));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(validation(format!("scale must be positive, got {scale}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| (scale * (s - max)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Samples index `i` with probability proportional to `exp(scale * scores[i])`
/// by inverting the cumulative weights with one uniform draw.
pub fn exponential_mechanism(scores: &[f64], scale: f64, rng: &mut Rng) -> Result<usize> {
    let w = exponential_weights(scores, scale)?;
    Ok(crate::measures::draw_weighted(&w, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramItem {
    pub symbol: Symbol,
    /// Released for audit only.
    pub noisy_count: f64,
}

/// Release threshold `2 + (2/epsilon) ln(2/(beta delta))` of [`stable_histogram`].
pub fn histogram_release_threshold(budget: &PrivacyBudget, beta: f64) -> f64 {
    2.0 + (2.0 / budget.epsilon) * (2.0 / (beta * budget.delta)).ln()
}

/// Multiplicity `4 + (4/epsilon) ln(2/(beta delta))` above which a symbol is
/// listed with probability at least `1 - beta`.
pub fn histogram_completeness_threshold(budget: &PrivacyBudget, beta: f64) -> f64 {
    4.0 + (4.0 / budget.epsilon) * (2.0 / (beta * budget.delta)).ln()
}

/// Stability-based private histogram.
///
/// Symbols occurring at least twice get their count perturbed by
/// `Laplace(2/epsilon)`; those whose noisy count exceeds
/// [`histogram_release_threshold`] are listed in increasing symbol order.
/// Symbols occurring once are never listed.
pub fn stable_histogram(
    sample: &[Symbol],
    budget: &PrivacyBudget,
    beta: f64,
    rng: &mut Rng,
) -> Result<Vec<HistogramItem>> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(validation(format!("beta must lie in (0,1), got {beta}")));
    }
    budget.require_positive_delta("stable histogram")?;
    let mut counts: BTreeMap<Symbol, usize> = BTreeMap::new();
    for &x in sample {
        *counts.entry(x).or_default() += 1;
    }
    let noise = NoiseSpec::new(NoiseKind::Laplace, 2.0 / budget.epsilon)?;
    let tau = histogram_release_threshold(budget, beta);
    let mut out = Vec::new();
    for (symbol, count) in counts {
        if count < 2 {
            continue;
        }
        let noisy_count = add_noise(count as f64, &noise, rng);
        if noisy_count > tau {
            out.push(HistogramItem { symbol, noisy_count });
        }
    }
    Ok(out)
}

/// The single channel through which the deviating algorithm sees its input.
pub trait HistogramRelease {
    fn release(&mut self, sample: &[Symbol]) -> Result<Vec<HistogramItem>>;
}

/// [`stable_histogram`] bound to a budget and a random stream.
pub struct StableHistogram<'a> {
    pub budget: PrivacyBudget,
    pub beta: f64,
    pub rng: &'a mut Rng,
}

impl HistogramRelease for StableHistogram<'_> {
    fn release(&mut self, sample: &[Symbol]) -> Result<Vec<HistogramItem>> {
        stable_histogram(sample, &self.budget, self.beta, self.rng)
    }
}

/// Post-processing step of the deviating algorithm: `h ≡ 0` for an empty list,
/// otherwise the indicator of the first listed symbol.
pub fn query_from_histogram(list: &[HistogramItem]) -> StatisticalQuery {
    match list.first() {
        None => StatisticalQuery::constant(0.0),
        Some(item) => StatisticalQuery::Singleton { symbol: item.symbol },
    }
}

/// Deviating private algorithm: one histogram release, then post-processing.
pub fn deviating_algorithm_with<H: HistogramRelease>(histogram: &mut H, sample: &[Symbol]) -> Result<StatisticalQuery> {
    let list = histogram.release(sample)?;
    Ok(query_from_histogram(&list))
}

pub fn deviating_algorithm(
    sample: &[Symbol],
    budget: &PrivacyBudget,
    beta: f64,
    rng: &mut Rng,
) -> Result<StatisticalQuery> {
    deviating_algorithm_with(&mut StableHistogram { budget: *budget, beta, rng }, sample)
}

/// Sample size `ceil((16/(psi epsilon)) ln(2/(beta delta)))` at which the
/// planted point is released with the stated probability.
pub fn negative_example_sample_size(psi: f64, budget: &PrivacyBudget, beta: f64) -> usize {
    ((16.0 / (psi * budget.epsilon)) * (2.0 / (beta * budget.delta)).ln()).ceil() as usize
}
