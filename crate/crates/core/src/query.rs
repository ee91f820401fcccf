//! Query descriptors.
//!
//! Queries are plain data so that transcripts can be serialized, compared and
//! replayed. A [`StatisticalQuery`] maps one symbol to `[0, 1]`; its value on a
//! tuple is the per-coordinate average. A [`Query`] is anything the game can
//! ask about a whole tuple.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::seeding::mix64;
use crate::Symbol;

/// A map from alphabet symbols into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StatisticalQuery {
    /// Explicit value per symbol; symbols past the end evaluate to 0.
    Table { values: Vec<f64> },
    /// `1` when the symbol index is at least `cut`.
    Threshold { cut: Symbol },
    /// Pseudo-random `{0,1}` labelling fixed by `seed` (see [`random_sign_bit`]).
    RandomSign { seed: u64 },
    /// Indicator of a single symbol.
    Singleton { symbol: Symbol },
    Constant { value: f64 },
    /// `1 - q`.
    Complement { of: Box<StatisticalQuery> },
}

/// The pinned labelling behind [`StatisticalQuery::RandomSign`]: the top bit of
/// `mix64(seed ^ mix64(symbol))`.
#[inline]
pub fn random_sign_bit(seed: u64, symbol: Symbol) -> bool {
    mix64(seed ^ mix64(u64::from(symbol))) >> 63 == 1
}

impl StatisticalQuery {
    pub fn constant(value: f64) -> Self {
        StatisticalQuery::Constant { value }
    }

    pub fn complement(self) -> Self {
        StatisticalQuery::Complement { of: Box::new(self) }
    }

    /// Checks that the query evaluates into `[0, 1]` everywhere.
    pub fn validate(&self) -> Result<()> {
        match self {
            StatisticalQuery::Table { values } => {
                if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(validation(format!("query table value {v} outside [0,1]")));
                }
                Ok(())
            }
            StatisticalQuery::Constant { value } if !(0.0..=1.0).contains(value) => Err(validation(
                format!("constant query value {value} outside [0,1]"),
            )),
            StatisticalQuery::Complement { of } => of.validate(),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, x: Symbol) -> f64 {
        match self {
            StatisticalQuery::Table { values } => values.get(x as usize).copied().unwrap_or(0.0),
            StatisticalQuery::Threshold { cut } => f64::from(u8::from(x >= *cut)),
            StatisticalQuery::RandomSign { seed } => f64::from(u8::from(random_sign_bit(*seed, x))),
            StatisticalQuery::Singleton { symbol } => f64::from(u8::from(x == *symbol)),
            StatisticalQuery::Constant { value } => *value,
            StatisticalQuery::Complement { of } => 1.0 - of.eval(x),
        }
    }

    /// Empirical value `q(S) = (1/|S|) * sum_x q(x)`. Zero on an empty sample.
    pub fn empirical(&self, sample: &[Symbol]) -> f64 {
        if sample.is_empty() {
            return 0.0;
        }
        sample.iter().map(|&x| self.eval(x)).sum::<f64>() / sample.len() as f64
    }

    /// `E_{x ~ dist}[q(x)]` for a distribution over symbols `0..dist.len()`.
    pub fn expect(&self, dist: &[f64]) -> f64 {
        dist.iter()
            .enumerate()
            .map(|(x, p)| if *p == 0.0 { 0.0 } else { p * self.eval(x as Symbol) })
            .sum()
    }

    /// `E[q(x)]` for `x` uniform on `0..size`, using closed forms where they exist.
    pub fn uniform_mean(&self, size: usize) -> f64 {
        let m = size as f64;
        match self {
            StatisticalQuery::Singleton { symbol } => {
                if (*symbol as usize) < size {
                    1.0 / m
                } else {
                    0.0
                }
            }
            StatisticalQuery::Threshold { cut } => size.saturating_sub(*cut as usize) as f64 / m,
            StatisticalQuery::Constant { value } => *value,
            StatisticalQuery::Complement { of } => 1.0 - of.uniform_mean(size),
            StatisticalQuery::Table { values } => {
                values.iter().take(size).sum::<f64>() / m
            }
            StatisticalQuery::RandomSign { seed } => {
                let ones = (0..size as Symbol).filter(|&x| random_sign_bit(*seed, x)).count();
                ones as f64 / m
            }
        }
    }

    /// True when the query only takes values in `{0, 1}`.
    pub fn is_predicate(&self) -> bool {
        match self {
            StatisticalQuery::Table { values } => values.iter().all(|v| *v == 0.0 || *v == 1.0),
            StatisticalQuery::Constant { value } => *value == 0.0 || *value == 1.0,
            StatisticalQuery::Complement { of } => of.is_predicate(),
            _ => true,
        }
    }
}

/// A query over whole `n`-tuples, the unit of one game round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Query {
    /// Per-coordinate average of a statistical query.
    Statistical(StatisticalQuery),
    /// Average over adjacent pairs of `values[a * alphabet + b]`, not a
    /// statistical query: its value depends on the order of the tuple.
    AdjacentPair { alphabet: usize, values: Vec<f64> },
}

impl From<StatisticalQuery> for Query {
    fn from(q: StatisticalQuery) -> Self {
        Query::Statistical(q)
    }
}

impl Query {
    pub fn validate(&self) -> Result<()> {
        match self {
            Query::Statistical(q) => q.validate(),
            Query::AdjacentPair { alphabet, values } => {
                if values.len() != alphabet * alphabet {
                    return Err(validation(format!(
                        "pair query needs {} values, got {}",
                        alphabet * alphabet,
                        values.len()
                    )));
                }
                if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(validation("pair query value outside [0,1]"));
                }
                Ok(())
            }
        }
    }

    pub fn as_statistical(&self) -> Option<&StatisticalQuery> {
        match self {
            Query::Statistical(q) => Some(q),
            Query::AdjacentPair { .. } => None,
        }
    }

    /// The query's value on a tuple. A pair query on a tuple shorter than 2 is 0.
    pub fn eval_tuple(&self, sample: &[Symbol]) -> f64 {
        match self {
            Query::Statistical(q) => q.empirical(sample),
            Query::AdjacentPair { alphabet, values } => {
                if sample.len() < 2 {
                    return 0.0;
                }
                let total: f64 = sample
                    .windows(2)
                    .map(|w| {
                        let (a, b) = (w[0] as usize, w[1] as usize);
                        if a < *alphabet && b < *alphabet {
                            values[a * alphabet + b]
                        } else {
                            0.0
                        }
                    })
                    .sum();
                total / (sample.len() - 1) as f64
            }
        }
    }
}
