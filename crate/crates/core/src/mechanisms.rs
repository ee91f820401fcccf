//! Mechanisms: the naive empirical answerer, the Gaussian mechanism and the
//! rounding mechanism whose transcripts compress.

use std::collections::BTreeSet;
use std::sync::Arc;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::game::{Analyst, Mechanism};
use crate::measures::Measure;
use crate::privacy::{add_noise, NoiseSpec};
use crate::query::{Query, StatisticalQuery};
use crate::seeding::Rng;
use crate::Symbol;

/// Range the Gaussian mechanism clamps its answers to.
pub const GAUSSIAN_CLAMP: (f64, f64) = (-0.25, 1.25);

/// Slack allowed when checking that `q(S)` lies in `[0, 1]`.
const UNIT_SLACK: f64 = 1e-12;

pub fn answer_naive(sample: &[Symbol], q: &StatisticalQuery) -> f64 {
    q.empirical(sample)
}

pub fn answer_gaussian(sample: &[Symbol], q: &StatisticalQuery, spec: &NoiseSpec, rng: &mut Rng) -> f64 {
    add_noise(q.empirical(sample), spec, rng).clamp(GAUSSIAN_CLAMP.0, GAUSSIAN_CLAMP.1)
}

/// Rounding grid with spacing `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCompression")]
pub struct CompressionSpec {
    alpha: f64,
}

#[derive(Deserialize)]
struct RawCompression {
    alpha: f64,
}

impl TryFrom<RawCompression> for CompressionSpec {
    type Error = Error;
    fn try_from(raw: RawCompression) -> Result<Self> {
        CompressionSpec::new(raw.alpha)
    }
}

impl CompressionSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(validation(format!("alpha must lie in (0,1], got {alpha}")));
        }
        Ok(CompressionSpec { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `ceil(1 / alpha)`, robust to `1/alpha` landing a hair above an integer.
    pub fn grid_size(&self) -> usize {
        ((1.0 / self.alpha) - 1e-9).ceil().max(1.0) as usize
    }

    /// `c_j = min((j + 1/2) alpha, 1)`.
    pub fn center(&self, j: usize) -> f64 {
        ((j as f64 + 0.5) * self.alpha).min(1.0)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.grid_size()).map(|j| self.center(j)).collect()
    }

    /// Index of the nearest center; ties go to the lower one.
    pub fn nearest(&self, v: f64) -> usize {
        let n = self.grid_size();
        let guess = ((v / self.alpha).floor().max(0.0) as usize).min(n - 1);
        let lo = guess.saturating_sub(1);
        let hi = (guess + 1).min(n - 1);
        let mut best = lo;
        let mut best_d = (v - self.center(lo)).abs();
        for j in lo + 1..=hi {
            let d = (v - self.center(j)).abs();
            if d < best_d - 1e-12 {
                best = j;
                best_d = d;
            }
        }
        best
    }

    pub fn round(&self, v: f64) -> f64 {
        self.center(self.nearest(v))
    }
}

pub fn answer_rounded(sample: &[Symbol], q: &Query, spec: &CompressionSpec) -> Result<f64> {
    let v = q.eval_tuple(sample);
    if !(-UNIT_SLACK..=1.0 + UNIT_SLACK).contains(&v) {
        return Err(Error::Domain(format!("query value {v} outside [0,1]")));
    }
    Ok(spec.round(v.clamp(0.0, 1.0)))
}

/// `ceil(1/alpha)^k`.
pub fn transcript_bound(spec: &CompressionSpec, k: usize) -> Result<BigUint> {
    if k == 0 {
        return Err(validation("transcript bound needs k >= 1"));
    }
    let k = u32::try_from(k).map_err(|_| validation("k too large"))?;
    Ok(BigUint::from(spec.grid_size()).pow(k))
}

#[derive(Debug, Clone, Default)]
pub struct NaiveMechanism {
    sample: Vec<Symbol>,
}

impl Mechanism for NaiveMechanism {
    fn receive_dataset(&mut self, sample: &[Symbol]) {
        self.sample = sample.to_vec();
    }

    fn answer(&mut self, query: &Query) -> Result<f64> {
        Ok(query.eval_tuple(&self.sample))
    }
}

/// Adds calibrated Gaussian noise to statistical queries.
#[derive(Debug, Clone)]
pub struct GaussianMechanism {
    spec: NoiseSpec,
    rng: Rng,
    sample: Vec<Symbol>,
    draws: usize,
}

impl GaussianMechanism {
    pub fn new(spec: NoiseSpec, rng: Rng) -> Self {
        GaussianMechanism { spec, rng, sample: Vec::new(), draws: 0 }
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    /// Noise draws made so far.
    pub fn draws(&self) -> usize {
        self.draws
    }
}

impl Mechanism for GaussianMechanism {
    fn receive_dataset(&mut self, sample: &[Symbol]) {
        self.sample = sample.to_vec();
    }

    fn answer(&mut self, query: &Query) -> Result<f64> {
        let q = query
            .as_statistical()
            .ok_or_else(|| Error::Unsupported("the Gaussian mechanism answers statistical queries only".into()))?;
        self.draws += 1;
        Ok(answer_gaussian(&self.sample, q, &self.spec, &mut self.rng))
    }
}

/// Rounds `q(S)` to the nearest grid center. Uses no randomness.
#[derive(Debug, Clone)]
pub struct RoundedMechanism {
    spec: CompressionSpec,
    sample: Vec<Symbol>,
}

impl RoundedMechanism {
    pub fn new(spec: CompressionSpec) -> Self {
        RoundedMechanism { spec, sample: Vec::new() }
    }
}

impl Mechanism for RoundedMechanism {
    fn receive_dataset(&mut self, sample: &[Symbol]) {
        self.sample = sample.to_vec();
    }

    fn answer(&mut self, query: &Query) -> Result<f64> {
        answer_rounded(&self.sample, query, &self.spec)
    }
}

/// Answers with the exact population value `q(mu)`.
#[derive(Debug, Clone)]
pub struct PopulationOracle {
    measure: Arc<Measure>,
}

impl PopulationOracle {
    pub fn new(measure: Arc<Measure>) -> Self {
        PopulationOracle { measure }
    }
}

impl Mechanism for PopulationOracle {
    fn receive_dataset(&mut self, _: &[Symbol]) {}

    fn answer(&mut self, query: &Query) -> Result<f64> {
        self.measure.tuple_query_mean(query)
    }
}

/// A transcript reduced to its `(query, answer)` pairs, serialized for set
/// membership.
pub type TranscriptKey = Vec<String>;

fn key_of(pairs: &[(Query, f64)]) -> TranscriptKey {
    pairs.iter().map(|p| serde_json::to_string(p).expect("query serializes")).collect()
}

/// Key of a played transcript, comparable with [`answer_tree`] entries.
pub fn transcript_key(t: &crate::game::Transcript) -> TranscriptKey {
    let pairs: Vec<(Query, f64)> = t.rounds.iter().map(|r| (r.query.clone(), r.answer)).collect();
    key_of(&pairs)
}

/// Every transcript a fresh analyst can produce against any sequence of grid
/// answers. The analyst is rebuilt and replayed for each answer prefix.
pub fn answer_tree<F>(make_analyst: &mut F, spec: &CompressionSpec, k: usize) -> Result<BTreeSet<TranscriptKey>>
where
    F: FnMut() -> Box<dyn Analyst>,
{
    let centers = spec.centers();
    let mut out = BTreeSet::new();
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        let mut analyst = make_analyst();
        let mut pairs = Vec::with_capacity(prefix.len() + 1);
        for &j in &prefix {
            let q = analyst.next_query()?;
            analyst.observe(centers[j])?;
            pairs.push((q, centers[j]));
        }
        let q = analyst.next_query()?;
        for (j, &c) in centers.iter().enumerate() {
            if prefix.len() + 1 == k {
                let mut full = pairs.clone();
                full.push((q.clone(), c));
                out.insert(key_of(&full));
            } else {
                let mut next = prefix.clone();
                next.push(j);
                stack.push(next);
            }
        }
    }
    Ok(out)
}

/// Distinct transcripts the rounded mechanism produces over `datasets`, plus
/// the largest per-round empirical error seen.
pub fn reachable_transcripts<F>(
    datasets: &[Vec<Symbol>],
    make_analyst: &mut F,
    spec: &CompressionSpec,
    k: usize,
) -> Result<(BTreeSet<TranscriptKey>, f64)>
where
    F: FnMut() -> Box<dyn Analyst>,
{
    let mut out = BTreeSet::new();
    let mut worst: f64 = 0.0;
    for sample in datasets {
        let mut mech = RoundedMechanism::new(*spec);
        let mut analyst = make_analyst();
        let t = crate::game::run_game(&mut mech, analyst.as_mut(), sample, k, Default::default())?;
        if !t.valid {
            return Err(Error::Domain(t.abort_reason.unwrap_or_default()));
        }
        worst = worst.max(crate::game::empirical_error(&t, sample).max_error);
        out.insert(transcript_key(&t));
    }
    Ok((out, worst))
}

/// All tuples in `{0..alphabet}^n`.
pub fn all_datasets(alphabet: usize, n: usize) -> Result<Vec<Vec<Symbol>>> {
    let total = crate::measures::table_entries(alphabet, n)
        .filter(|&t| t <= 1 << 20)
        .ok_or_else(|| validation("dataset universe too large to enumerate"))? as usize;
    Ok((0..total)
        .map(|i| {
            let mut t = vec![0; n];
            crate::measures::decode_tuple(i, alphabet, n, &mut t);
            t
        })
        .collect())
}
