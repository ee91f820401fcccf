//! The adaptive query game and the tools that score it.
//!
//! A game hands the dataset to a [`Mechanism`] once, then for `k` rounds asks
//! the [`Analyst`] for a query, gives it to the mechanism and returns the
//! answer to the analyst. Analysts never receive a handle to the data; the only
//! information flowing back to them is the sequence of answers.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::measures::Measure;
use crate::privacy::{exponential_mechanism, PrivacyBudget};
use crate::query::{Query, StatisticalQuery};
use crate::seeding::Rng;
use crate::Symbol;

/// Answers queries about a dataset it receives once per game.
pub trait Mechanism {
    fn receive_dataset(&mut self, sample: &[Symbol]);
    fn answer(&mut self, query: &Query) -> Result<f64>;
}

/// Picks queries and observes answers. Deterministic given its seed.
pub trait Analyst {
    fn next_query(&mut self) -> Result<Query>;
    fn observe(&mut self, answer: f64) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    /// 1-based round number.
    pub round: usize,
    pub query: Query,
    pub answer: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptSeeds {
    pub dataset: Option<u64>,
    pub mechanism: Option<u64>,
    pub analyst: Option<u64>,
}

/// Header line of the JSON-lines transcript format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TranscriptHeader {
    k: usize,
    seeds: TranscriptSeeds,
    valid: bool,
    abort_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub k: usize,
    pub seeds: TranscriptSeeds,
    pub rounds: Vec<Round>,
    /// False when a role failed and the game stopped early.
    pub valid: bool,
    pub abort_reason: Option<String>,
}

impl Transcript {
    /// One header line, then one line per round.
    pub fn to_jsonl(&self) -> String {
        let header = TranscriptHeader {
            k: self.k,
            seeds: self.seeds,
            valid: self.valid,
            abort_reason: self.abort_reason.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r).expect("round serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: TranscriptHeader = serde_json::from_str(lines.next().ok_or_else(|| validation("empty transcript"))?)
            .map_err(|e| validation(format!("transcript header: {e}")))?;
        let rounds = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| validation(format!("transcript line {}: {e}", i + 2))))
            .collect::<Result<Vec<Round>>>()?;
        Ok(Transcript { k: header.k, seeds: header.seeds, rounds, valid: header.valid, abort_reason: header.abort_reason })
    }

    pub fn answers(&self) -> impl Iterator<Item = f64> + '_ {
        self.rounds.iter().map(|r| r.answer)
    }
}

/// Plays `k` rounds. A failing role ends the game with a partial transcript
/// marked invalid; only `k = 0` is an error.
pub fn run_game(
    mechanism: &mut dyn Mechanism,
    analyst: &mut dyn Analyst,
    sample: &[Symbol],
    k: usize,
    seeds: TranscriptSeeds,
) -> Result<Transcript> {
    if k == 0 {
        return Err(validation("a game needs at least one round"));
    }
    mechanism.receive_dataset(sample);
    let mut rounds = Vec::with_capacity(k);
    let mut abort = None;
    for round in 1..=k {
        let step = analyst.next_query().and_then(|query| {
            let answer = mechanism.answer(&query)?;
            Ok((query, answer))
        });
        match step {
            Ok((query, answer)) => {
                rounds.push(Round { round, query, answer });
                if let Err(e) = analyst.observe(answer) {
                    abort = Some(format!("round {round}: analyst failed: {e}"));
                    break;
                }
            }
            Err(e) => {
                abort = Some(format!("round {round}: {e}"));
                break;
            }
        }
    }
    Ok(Transcript { k, seeds, rounds, valid: abort.is_none(), abort_reason: abort })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AccuracyReference {
    Empirical,
    Statistical,
    QueryAccurate { gammas: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub max_error: f64,
    pub per_round_errors: Vec<f64>,
    pub reference: AccuracyReference,
}

impl AccuracyResult {
    fn new(per_round_errors: Vec<f64>, reference: AccuracyReference) -> Self {
        let max_error = per_round_errors.iter().copied().fold(0.0, f64::max);
        AccuracyResult { max_error, per_round_errors, reference }
    }

    pub fn final_round_error(&self) -> Option<f64> {
        self.per_round_errors.last().copied()
    }
}

/// Per-round `|q_i(S) - a_i|`.
pub fn empirical_error(transcript: &Transcript, sample: &[Symbol]) -> AccuracyResult {
    let errs = transcript.rounds.iter().map(|r| (r.query.eval_tuple(sample) - r.answer).abs()).collect();
    AccuracyResult::new(errs, AccuracyReference::Empirical)
}

/// Per-round `|q_i(mu) - a_i|` with exact population values.
pub fn statistical_error(transcript: &Transcript, measure: &Measure) -> Result<AccuracyResult> {
    let errs = transcript
        .rounds
        .iter()
        .map(|r| Ok((measure.tuple_query_mean(&r.query)? - r.answer).abs()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(AccuracyResult::new(errs, AccuracyReference::Statistical))
}

/// Per-round `|q_i(mu) - a_i|`, carrying the concentration widths the errors
/// are to be judged against.
pub fn query_accuracy(transcript: &Transcript, measure: &Measure, gammas: Vec<f64>) -> Result<AccuracyResult> {
    if gammas.len() != transcript.rounds.len() {
        return Err(validation("one gamma per round is required"));
    }
    let mut r = statistical_error(transcript, measure)?;
    r.reference = AccuracyReference::QueryAccurate { gammas };
    Ok(r)
}

/// Minimum number of draws accepted by [`gamma_estimate`].
pub fn gamma_min_trials(delta: f64) -> usize {
    (20.0 / delta).ceil() as usize
}

/// Empirical `(1 - delta)`-quantile of `|q(T) - q(mu)|` over fresh `T ~ mu`.
///
/// `q(mu)` is exact. The quantile is the order statistic at position
/// `ceil((trials - 1)(1 - delta))` of the sorted deviations.
pub fn gamma_estimate(q: &Query, measure: &Measure, delta: f64, trials: usize, rng: &mut Rng) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(validation(format!("delta must lie in (0,1), got {delta}")));
    }
    let needed = gamma_min_trials(delta);
    if trials < needed {
        return Err(Error::InsufficientTrials { needed, got: trials });
    }
    let center = measure.tuple_query_mean(q)?;
    let mut buf = vec![0 as Symbol; measure.n()];
    let mut devs: Vec<f64> = (0..trials)
        .map(|_| {
            measure.sample_into(rng, &mut buf);
            (q.eval_tuple(&buf) - center).abs()
        })
        .collect();
    devs.sort_by(f64::total_cmp);
    let pos = ((trials - 1) as f64 * (1.0 - delta)).ceil() as usize;
    Ok(devs[pos.min(trials - 1)])
}

/// `T = ceil(epsilon / delta)`; `None` when `delta = 0` or the value overflows.
pub fn monitor_rounds(budget: &PrivacyBudget) -> Option<usize> {
    if budget.delta <= 0.0 {
        return None;
    }
    let t = (budget.epsilon / budget.delta).ceil();
    (t < usize::MAX as f64).then_some(t as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorConfig {
    pub budget: PrivacyBudget,
    /// Replaces `ceil(epsilon / delta)`.
    pub rounds_override: Option<usize>,
    /// Largest number of datasets the monitor will draw.
    pub cap: usize,
}

impl MonitorConfig {
    pub fn new(budget: PrivacyBudget) -> Self {
        MonitorConfig { budget, rounds_override: None, cap: 10_000 }
    }

    pub fn rounds(&self) -> Result<usize> {
        let natural = monitor_rounds(&self.budget);
        let t = match self.rounds_override {
            Some(t) => {
                if natural != Some(t) {
                    log::warn!("monitor rounds overridden to {t} (natural value {natural:?})");
                }
                t
            }
            None => natural.ok_or_else(|| validation("ceil(epsilon/delta) is unbounded; set an override"))?,
        };
        if t == 0 {
            return Err(validation("monitor needs at least one dataset"));
        }
        if t > self.cap {
            return Err(validation(format!("monitor rounds {t} exceed cap {}", self.cap)));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorOutcome {
    pub predicate: StatisticalQuery,
    /// 0-based index `t*` of the dataset the predicate is scored on.
    pub index: usize,
    /// `h*(S_{t*})`.
    pub empirical: f64,
    /// `h*(mu)`.
    pub population: f64,
    pub family_size: usize,
    /// Audit: number of algorithm invocations (always `T`).
    pub invocations: usize,
    /// Audit: number of exponential-mechanism draws (always 1).
    pub selections: usize,
}

impl MonitorOutcome {
    /// `h*(mu) - h*(S_{t*})`.
    pub fn gap(&self) -> f64 {
        self.population - self.empirical
    }
}

/// Runs `algorithm` on `T` fresh datasets, collects every returned predicate
/// and its complement, and selects one pair `(h, t)` with the exponential
/// mechanism using weights `exp((epsilon n / 2)(h(S_t) - h(mu)))`.
pub fn monitor<A>(algorithm: &mut A, measure: &Measure, cfg: &MonitorConfig, rng: &mut Rng) -> Result<MonitorOutcome>
where
    A: FnMut(&[Symbol], &mut Rng) -> Result<Vec<StatisticalQuery>>,
{
    let rounds = cfg.rounds()?;
    let mut family: Vec<(StatisticalQuery, usize, f64, f64)> = Vec::new();
    let mut invocations = 0;
    for t in 0..rounds {
        let sample = measure.sample(rng);
        let predicates = algorithm(&sample, rng)?;
        invocations += 1;
        let mut negations = Vec::with_capacity(predicates.len());
        for h in predicates {
            if !h.is_predicate() {
                return Err(Error::Unsupported("monitor needs {0,1}-valued predicates".into()));
            }
            let emp = h.empirical(&sample);
            let pop = measure.query_mean(&h);
            negations.push((h.clone().complement(), t, 1.0 - emp, 1.0 - pop));
            family.push((h, t, emp, pop));
        }
        family.extend(negations);
    }
    if family.is_empty() {
        return Err(validation("algorithm returned no predicates"));
    }
    let scores: Vec<f64> = family.iter().map(|(_, _, emp, pop)| emp - pop).collect();
    let scale = cfg.budget.epsilon * measure.n() as f64 / 2.0;
    let pick = exponential_mechanism(&scores, scale, rng)?;
    let family_size = family.len();
    let (predicate, index, empirical, population) = family.swap_remove(pick);
    Ok(MonitorOutcome { predicate, index, empirical, population, family_size, invocations, selections: 1 })
}

/// The expectation bound `e^epsilon + T delta + psi - 1`.
pub fn expectation_bound(epsilon: f64, rounds: usize, delta: f64, psi: f64) -> f64 {
    epsilon.exp() + rounds as f64 * delta + psi - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// Monte Carlo mean of `h*(mu) - h*(S_{t*})`.
    pub mean_gap: f64,
    pub std_error: f64,
    pub trials: usize,
}

impl GapEstimate {
    pub fn abs_gap(&self) -> f64 {
        self.mean_gap.abs()
    }

    pub fn from_gaps(gaps: &[f64]) -> Self {
        let trials = gaps.len();
        let mean = gaps.iter().sum::<f64>() / trials as f64;
        let var = if trials > 1 {
            gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (trials - 1) as f64
        } else {
            0.0
        };
        GapEstimate { mean_gap: mean, std_error: (var / trials as f64).sqrt(), trials }
    }
}

/// Monte Carlo estimate of `E[h(mu) - h(S_t)]` for the monitor's output.
pub fn expectation_gap<A>(
    algorithm: &mut A,
    measure: &Measure,
    cfg: &MonitorConfig,
    trials: usize,
    rng: &mut Rng,
) -> Result<GapEstimate>
where
    A: FnMut(&[Symbol], &mut Rng) -> Result<Vec<StatisticalQuery>>,
{
    if trials < 100 {
        return Err(Error::InsufficientTrials { needed: 100, got: trials });
    }
    let gaps = (0..trials)
        .map(|_| monitor(algorithm, measure, cfg, rng).map(|o| o.gap()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(GapEstimate::from_gaps(&gaps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysts::ScriptedAnalyst;
    use crate::mechanisms::{NaiveMechanism, PopulationOracle};
    use crate::seeding::rng_from_seed;
    use std::sync::Arc;

    struct Constant(f64);
    impl Mechanism for Constant {
        fn receive_dataset(&mut self, _: &[Symbol]) {}
        fn answer(&mut self, _: &Query) -> Result<f64> {
            Ok(self.0)
        }
    }

    struct FailsAt(usize, usize);
    impl Mechanism for FailsAt {
        fn receive_dataset(&mut self, _: &[Symbol]) {}
        fn answer(&mut self, _: &Query) -> Result<f64> {
            self.1 += 1;
            if self.1 == self.0 {
                Err(Error::Domain("boom".into()))
            } else {
                Ok(0.5)
            }
        }
    }

    fn singleton(s: Symbol) -> Query {
        StatisticalQuery::Singleton { symbol: s }.into()
    }

    #[test]
    fn exact_mechanism_answers_empirical_values() {
        let sample = vec![0, 1, 1, 2];
        let mut analyst = ScriptedAnalyst::new(vec![singleton(1); 3]);
        let t = run_game(&mut NaiveMechanism::default(), &mut analyst, &sample, 3, TranscriptSeeds::default()).unwrap();
        assert!(t.valid);
        assert_eq!(t.answers().collect::<Vec<_>>(), vec![0.5; 3]);
        assert_eq!(empirical_error(&t, &sample).max_error, 0.0);
    }

    #[test]
    fn zero_rounds_rejected() {
        let mut analyst = ScriptedAnalyst::new(vec![]);
        assert!(run_game(&mut NaiveMechanism::default(), &mut analyst, &[0], 0, TranscriptSeeds::default()).is_err());
    }

    #[test]
    fn failing_role_yields_invalid_partial_transcript() {
        let mut analyst = ScriptedAnalyst::new(vec![singleton(0); 5]);
        let t = run_game(&mut FailsAt(3, 0), &mut analyst, &[0], 5, TranscriptSeeds::default()).unwrap();
        assert!(!t.valid);
        assert_eq!(t.rounds.len(), 2);
        assert!(t.abort_reason.unwrap().contains("round 3"));
        let mut short = ScriptedAnalyst::new(vec![singleton(0)]);
        let t = run_game(&mut Constant(0.1), &mut short, &[0], 2, TranscriptSeeds::default()).unwrap();
        assert!(!t.valid && t.rounds.len() == 1);
    }

    #[test]
    fn constant_answers_error() {
        let sample = vec![3, 4];
        let mut analyst = ScriptedAnalyst::new(vec![StatisticalQuery::constant(1.0).into()]);
        let t = run_game(&mut Constant(0.5), &mut analyst, &sample, 1, TranscriptSeeds::default()).unwrap();
        assert_eq!(empirical_error(&t, &sample).max_error, 0.5);
    }

    #[test]
    fn oracle_mechanism_has_zero_statistical_error() {
        let m = Arc::new(Measure::chain(2, vec![vec![2.0, 1.0, 1.0, 2.0]; 4]).unwrap());
        let mut rng = rng_from_seed(1);
        let sample = m.sample(&mut rng);
        let mut analyst = ScriptedAnalyst::new(vec![singleton(0), singleton(1)]);
        let t = run_game(&mut PopulationOracle::new(m.clone()), &mut analyst, &sample, 2, TranscriptSeeds::default())
            .unwrap();
        assert!(statistical_error(&t, &m).unwrap().max_error < 1e-15);
    }

    #[test]
    fn transcript_jsonl_round_trip_is_byte_identical() {
        let sample = vec![0, 1, 1];
        let mut analyst = ScriptedAnalyst::new(vec![singleton(1), StatisticalQuery::RandomSign { seed: 9 }.into()]);
        let seeds = TranscriptSeeds { dataset: Some(1), mechanism: None, analyst: Some(3) };
        let t = run_game(&mut NaiveMechanism::default(), &mut analyst, &sample, 2, seeds).unwrap();
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        let back = Transcript::from_jsonl(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn gamma_requires_enough_trials() {
        let m = Measure::uniform_product(2, 10).unwrap();
        let q: Query = singleton(1);
        let mut rng = rng_from_seed(2);
        assert!(matches!(gamma_estimate(&q, &m, 0.05, 399, &mut rng), Err(Error::InsufficientTrials { needed: 400, .. })));
        assert!(gamma_estimate(&StatisticalQuery::constant(0.3).into(), &m, 0.05, 400, &mut rng).unwrap() < 1e-15);
    }

    #[test]
    fn gamma_of_mean_query_below_hoeffding() {
        let n = 100;
        let delta = 0.05;
        let m = Measure::uniform_product(2, n).unwrap();
        let q: Query = singleton(1);
        let mut rng = rng_from_seed(3);
        let g = gamma_estimate(&q, &m, delta, 4000, &mut rng).unwrap();
        let hoeffding = ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt();
        assert!(g <= 1.1 * hoeffding, "{g} vs {hoeffding}");

        let planted = Measure::planted(0.5, 2, n).unwrap();
        let gp = gamma_estimate(&q, &planted, delta, 4000, &mut rng).unwrap();
        assert!(gp > g, "{gp} vs {g}");
    }

    #[test]
    fn monitor_two_candidate_case() {
        let m = Measure::uniform_product(2, 5).unwrap();
        let cfg = MonitorConfig { budget: PrivacyBudget::new(1.0, 0.5).unwrap(), rounds_override: Some(1), cap: 10 };
        let mut rng = rng_from_seed(4);
        let mut alg = |_: &[Symbol], _: &mut Rng| Ok(vec![StatisticalQuery::constant(0.0)]);
        let mut zero_picks = 0;
        for _ in 0..2000 {
            let o = monitor(&mut alg, &m, &cfg, &mut rng).unwrap();
            assert_eq!(o.family_size, 2);
            assert_eq!((o.invocations, o.selections), (1, 1));
            assert_eq!(o.gap(), 0.0);
            zero_picks += usize::from(o.empirical == 0.0);
        }
        // equal scores: uniform over {h, 1-h}
        assert!((zero_picks as f64 / 2000.0 - 0.5).abs() < 5.0 * (0.25f64 / 2000.0).sqrt());
    }

    #[test]
    fn monitor_rounds_and_cap() {
        let b = PrivacyBudget::new(1.0, 0.1).unwrap();
        assert_eq!(MonitorConfig::new(b).rounds().unwrap(), 10);
        let tiny = PrivacyBudget::new(1.0, 1e-9).unwrap();
        assert!(MonitorConfig::new(tiny).rounds().is_err());
        let cfg = MonitorConfig { rounds_override: Some(20), ..MonitorConfig::new(tiny) };
        assert_eq!(cfg.rounds().unwrap(), 20);
    }

    #[test]
    fn monitor_runs_algorithm_exactly_t_times() {
        let m = Measure::uniform_product(3, 6).unwrap();
        let cfg = MonitorConfig { budget: PrivacyBudget::new(0.5, 0.01).unwrap(), rounds_override: Some(7), cap: 10 };
        let mut calls = 0;
        let mut alg = |_: &[Symbol], _: &mut Rng| {
            calls += 1;
            Ok(vec![StatisticalQuery::Singleton { symbol: 0 }, StatisticalQuery::Threshold { cut: 1 }])
        };
        let o = monitor(&mut alg, &m, &cfg, &mut rng_from_seed(5)).unwrap();
        assert_eq!(calls, 7);
        assert_eq!(o.family_size, 2 * 2 * 7);
        assert!(o.index < 7);
    }

    #[test]
    fn data_independent_algorithm_has_no_gap() {
        let m = Measure::uniform_product(2, 8).unwrap();
        let cfg = MonitorConfig { budget: PrivacyBudget::new(0.5, 0.01).unwrap(), rounds_override: Some(5), cap: 10 };
        let mut alg = |_: &[Symbol], _: &mut Rng| Ok(vec![StatisticalQuery::constant(1.0)]);
        let g = expectation_gap(&mut alg, &m, &cfg, 100, &mut rng_from_seed(6)).unwrap();
        assert!(g.abs_gap() <= 3.0 * g.std_error);
        assert!(expectation_gap(&mut alg, &m, &cfg, 99, &mut rng_from_seed(6)).is_err());
    }

    #[test]
    fn non_private_algorithm_exceeds_expectation_bound() {
        // Indicator of the symbols present in S: h(S) = 1 while h(mu) is tiny.
        let grid = 10_000;
        let m = Measure::planted(0.05, grid, 100).unwrap();
        let budget = PrivacyBudget::new(0.1, 1e-6).unwrap();
        let cfg = MonitorConfig { budget, rounds_override: Some(5), cap: 10 };
        let mut alg = |s: &[Symbol], _: &mut Rng| {
            let mut values = vec![0.0; grid];
            s.iter().for_each(|&x| values[x as usize] = 1.0);
            Ok(vec![StatisticalQuery::Table { values }])
        };
        let g = expectation_gap(&mut alg, &m, &cfg, 100, &mut rng_from_seed(7)).unwrap();
        let bound = expectation_bound(0.1, 5, 1e-6, 0.05);
        assert!(g.abs_gap() > bound + 3.0 * g.std_error, "{g:?} vs {bound}");
    }
}
