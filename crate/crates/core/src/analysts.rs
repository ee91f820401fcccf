//! Analysts: a scripted baseline, the sign-aggregation attacker and a small
//! adaptive analyst for transcript counting.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::game::Analyst;
use crate::measures::Measure;
use crate::query::{Query, StatisticalQuery};
use crate::seeding::{derive_seed, mix64};
use crate::Symbol;

/// Emits a fixed list of queries and ignores the answers.
#[derive(Debug, Clone)]
pub struct ScriptedAnalyst {
    queries: Vec<Query>,
    next: usize,
}

impl ScriptedAnalyst {
    pub fn new(queries: Vec<Query>) -> Self {
        ScriptedAnalyst { queries, next: 0 }
    }
}

impl Analyst for ScriptedAnalyst {
    fn next_query(&mut self) -> Result<Query> {
        let q = self
            .queries
            .get(self.next)
            .cloned()
            .ok_or_else(|| validation(format!("script exhausted after {} queries", self.queries.len())))?;
        self.next += 1;
        Ok(q)
    }

    fn observe(&mut self, _: f64) -> Result<()> {
        Ok(())
    }
}

/// Where the attacker gets its estimate of `q_j(mu)`.
#[derive(Debug, Clone)]
pub enum SignReference {
    Exact(Arc<Measure>),
    /// Always `1/2`.
    Agnostic,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackState {
    pub issued: Vec<StatisticalQuery>,
    pub answers: Vec<f64>,
    pub round: usize,
}

/// Asks `k - 1` seeded random-sign queries, then one query that scores each
/// symbol by how often its label agreed with the direction of the answer's
/// deviation from the reference:
/// `q_k(x) = 1[sum_j sign(a_j - r_j) (q_j(x) - 1/2) > 0]`.
#[derive(Debug, Clone)]
pub struct RandomSignAttacker {
    k: usize,
    seed: u64,
    reference: SignReference,
    hashed: Vec<u64>,
    scores: Vec<i64>,
    state: AttackState,
}

impl RandomSignAttacker {
    pub fn new(k: usize, seed: u64, alphabet: usize, reference: SignReference) -> Result<Self> {
        if k < 2 {
            return Err(validation("the attacker needs k >= 2"));
        }
        if let SignReference::Exact(m) = &reference {
            if m.alphabet().size() != alphabet {
                return Err(validation("reference measure alphabet differs from the attack alphabet"));
            }
        }
        let hashed = (0..alphabet as u64).map(mix64).collect();
        Ok(RandomSignAttacker { k, seed, reference, hashed, scores: vec![0; alphabet], state: AttackState::default() })
    }

    pub fn state(&self) -> &AttackState {
        &self.state
    }

    /// Seed of the `j`-th (0-based) sign query.
    pub fn query_seed(&self, j: usize) -> u64 {
        derive_seed(self.seed, j as u64)
    }

    fn final_query(&self) -> StatisticalQuery {
        StatisticalQuery::Table { values: self.scores.iter().map(|&s| if s > 0 { 1.0 } else { 0.0 }).collect() }
    }
}

impl Analyst for RandomSignAttacker {
    fn next_query(&mut self) -> Result<Query> {
        let j = self.state.round;
        if j >= self.k {
            return Err(validation(format!("attacker already issued all {} queries", self.k)));
        }
        if self.state.answers.len() != j {
            return Err(validation("attacker asked for a query before observing the last answer"));
        }
        let q = if j + 1 < self.k {
            StatisticalQuery::RandomSign { seed: self.query_seed(j) }
        } else {
            self.final_query()
        };
        self.state.issued.push(q.clone());
        self.state.round += 1;
        Ok(q.into())
    }

    fn observe(&mut self, answer: f64) -> Result<()> {
        let j = self.state.answers.len();
        if j + 1 != self.state.round {
            return Err(validation("attacker received an answer without a pending query"));
        }
        self.state.answers.push(answer);
        if j + 1 == self.k {
            return Ok(());
        }
        let reference = match &self.reference {
            SignReference::Exact(m) => m.query_mean(&self.state.issued[j]),
            SignReference::Agnostic => 0.5,
        };
        let sign: i64 = if answer > reference {
            1
        } else if answer < reference {
            -1
        } else {
            0
        };
        if sign != 0 {
            let seed = self.query_seed(j);
            for (score, &h) in self.scores.iter_mut().zip(&self.hashed) {
                // same labelling as `random_sign_bit`
                let bit = (mix64(seed ^ h) >> 63) as i64;
                *score += sign * (2 * bit - 1);
            }
        }
        Ok(())
    }
}

/// Deterministic adaptive analyst: a threshold query first, then tables
/// built from the previous answer.
#[derive(Debug, Clone)]
pub struct FeedbackAnalyst {
    alphabet: usize,
    k: usize,
    round: usize,
    last: Option<f64>,
}

impl FeedbackAnalyst {
    pub fn new(alphabet: usize, k: usize) -> Self {
        FeedbackAnalyst { alphabet: alphabet.max(1), k, round: 0, last: None }
    }
}

impl Analyst for FeedbackAnalyst {
    fn next_query(&mut self) -> Result<Query> {
        if self.round >= self.k {
            return Err(validation(format!("analyst already issued all {} queries", self.k)));
        }
        self.round += 1;
        let q = match self.last {
            None => StatisticalQuery::Threshold { cut: (self.alphabet / 2).max(1) as Symbol },
            Some(a) => {
                let values = (0..self.alphabet)
                    .map(|x| (a * (x + 1) as f64 + 0.25 * self.round as f64).fract().clamp(0.0, 1.0))
                    .collect();
                StatisticalQuery::Table { values }
            }
        };
        Ok(q.into())
    }

    fn observe(&mut self, answer: f64) -> Result<()> {
        self.last = Some(answer);
        Ok(())
    }
}
