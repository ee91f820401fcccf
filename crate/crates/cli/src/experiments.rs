//! The named experiments. Each trial is seeded with
//! `derive_seed(master_seed, trial)` and trials run in parallel with results
//! kept in trial order.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use adagibbs_core::analysts::{FeedbackAnalyst, RandomSignAttacker, ScriptedAnalyst, SignReference};
use adagibbs_core::dependence::{gibbs_dependence, is_product, markov_psi_bound};
use adagibbs_core::game::{
    empirical_error, expectation_bound, monitor, run_game, statistical_error, Analyst, GapEstimate, Mechanism,
    MonitorConfig, Transcript, TranscriptSeeds,
};
use adagibbs_core::mechanisms::{
    all_datasets, answer_tree, transcript_bound, transcript_key, CompressionSpec, GaussianMechanism,
    NaiveMechanism, RoundedMechanism,
};
use adagibbs_core::privacy::{
    calibrate_gaussian, deviating_algorithm, histogram_completeness_threshold, negative_example_sample_size,
    stable_histogram, NoiseSpec, PrivacyBudget,
};
use adagibbs_core::query::{Query, StatisticalQuery};
use adagibbs_core::seeding::{derive_seed, fnv1a, rng_from_seed, Rng};
use adagibbs_core::{game::gamma_estimate, Measure, Symbol};
use rand::Rng as _;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::config::{self, AnalystSpec, ChainSource, Experiment, ExperimentConfig, MechanismSpec, ReferenceMode};
use crate::error::CliError;
use crate::report::{ExperimentReport, NamedRows, RowStats, Summary, TrialRow};

/// Stream index reserved for drawing an experiment's random measure.
const MEASURE_STREAM: u64 = u64::MAX;
/// Stream index reserved for concentration-width estimates.
const GAMMA_STREAM: u64 = u64::MAX - 1;

/// Slack for comparing accumulated floating-point errors against bounds.
const FLOAT_SLACK: f64 = 1e-12;

/// Runs on a dedicated pool of `workers` threads. Outputs do not depend on
/// the worker count.
pub fn run_experiment_with(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentReport, CliError> {
    match workers {
        None => run_experiment(cfg),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(|| run_experiment(cfg)),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, CliError> {
    cfg.validate()?;
    let ctx = Ctx { seed: cfg.seed, trials: cfg.trials(), timing: cfg.record_timing };
    match &cfg.experiment {
        Experiment::PsiProduct(p) => psi_product(&ctx, p),
        Experiment::ChainBound(c) => chain_bound(&ctx, c),
        Experiment::SkipCheck(s) => skip_check(&ctx, s),
        Experiment::NegativeExample(e) => negative_example(&ctx, e),
        Experiment::Histogram(h) => histogram(&ctx, h),
        Experiment::Attack(a) => attack(&ctx, a),
        Experiment::Game(g) => game(&ctx, g),
        Experiment::Compress(c) => compress(&ctx, c),
        Experiment::Monitor(m) => monitor_experiment(&ctx, m),
        Experiment::QueryAccuracy(q) => query_accuracy(&ctx, q),
    }
}

struct Ctx {
    seed: u64,
    trials: usize,
    timing: bool,
}

impl Ctx {
    fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, trial as u64)
    }

    /// Runs `f(trial, seed)` for every trial, filling `trial`, `seed` and
    /// `wall_ms`.
    fn rows<T, F>(&self, f: F) -> Result<Vec<(TrialRow, T)>, CliError>
    where
        T: Send,
        F: Fn(usize, u64) -> Result<(TrialRow, T), CliError> + Sync,
    {
        (0..self.trials)
            .into_par_iter()
            .map(|trial| {
                let seed = self.trial_seed(trial);
                let start = Instant::now();
                let (mut row, extra) = f(trial, seed)?;
                row.trial = trial;
                row.seed = seed;
                row.wall_ms = if self.timing { start.elapsed().as_millis() as u64 } else { 0 };
                Ok((row, extra))
            })
            .collect()
    }

    fn plain_rows<F>(&self, f: F) -> Result<Vec<TrialRow>, CliError>
    where
        F: Fn(usize, u64) -> Result<TrialRow, CliError> + Sync,
    {
        Ok(self.rows(|t, s| f(t, s).map(|r| (r, ())))?.into_iter().map(|(r, _)| r).collect())
    }

    fn summary(&self, name: &str, rows: &[TrialRow], required: Option<f64>, passed: bool, details: Value) -> Summary {
        let details = match details {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        Summary {
            experiment: name.to_string(),
            master_seed: self.seed,
            stats: RowStats::from_rows(rows),
            required_fraction: required,
            passed,
            details,
        }
    }
}

fn row(k: usize, n: usize, emp: f64, stat: f64, gamma: Option<f64>, success: bool) -> TrialRow {
    TrialRow { trial: 0, seed: 0, k, n, max_emp_err: emp, max_stat_err: stat, gamma_max: gamma, success, wall_ms: 0 }
}

fn report(rows: Vec<TrialRow>, summary: Summary) -> ExperimentReport {
    ExperimentReport { rows, extra: Vec::new(), summary, transcript: None }
}

fn random_dist(rng: &mut Rng, size: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..size).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

pub fn random_chain(rng: &mut Rng, n: usize, size: usize, range: [f64; 2]) -> Result<Measure, CliError> {
    let potentials = (0..n - 1)
        .map(|_| (0..size * size).map(|_| rng.random_range(range[0]..=range[1])).collect())
        .collect();
    Ok(Measure::chain(size, potentials)?)
}

fn chain_from(source: &ChainSource, master: u64) -> Result<Measure, CliError> {
    match source {
        ChainSource::Explicit { measure } => Ok(Measure::try_from(measure.clone())?),
        ChainSource::Random { n, alphabet, potential_range } => {
            random_chain(&mut rng_from_seed(derive_seed(master, MEASURE_STREAM)), *n, *alphabet, *potential_range)
        }
    }
}

fn fraction(count: usize, total: usize) -> f64 {
    count as f64 / total.max(1) as f64
}

/// Columns: `k` = alphabet size, `max_emp_err` = psi of the product measure,
/// `max_stat_err` = psi of the paired random table.
fn psi_product(ctx: &Ctx, p: &config::PsiProduct) -> Result<ExperimentReport, CliError> {
    let results = ctx.rows(|_, seed| {
        let mut rng = rng_from_seed(seed);
        let n = rng.random_range(1..=p.max_n);
        let size = rng.random_range(1..=p.max_alphabet);
        let product = Measure::product((0..n).map(|_| random_dist(&mut rng, size)).collect())?;
        let psi_product = gibbs_dependence(&product)?.psi;
        let product_ok = psi_product <= p.tolerance && is_product(&product, p.tolerance)?;
        let (tn, ts) = (n.max(2), size.max(2));
        let table = Measure::table(ts, tn, random_dist(&mut rng, ts.pow(tn as u32)))?;
        let psi_table = gibbs_dependence(&table)?.psi;
        let counterexample = psi_table <= p.tolerance && !is_product(&table, p.tolerance)?;
        Ok((row(size, n, psi_product, psi_table, None, product_ok && !counterexample), counterexample))
    })?;
    let counterexamples = results.iter().filter(|r| r.1).count();
    let rows: Vec<TrialRow> = results.into_iter().map(|r| r.0).collect();
    let max_psi = rows.iter().map(|r| r.max_emp_err).fold(0.0, f64::max);
    let min_table_psi = rows.iter().map(|r| r.max_stat_err).fold(f64::INFINITY, f64::min);
    let passed = rows.iter().all(|r| r.success);
    let details = json!({
        "max_psi_product": max_psi,
        "min_psi_table": min_table_psi,
        "table_counterexamples": counterexamples,
        "tolerance": p.tolerance,
    });
    let summary = ctx.summary("psi-product", &rows, Some(1.0), passed, details);
    Ok(report(rows, summary))
}

/// Columns: `k` = alphabet size, `max_emp_err` = psi, `max_stat_err` = the
/// chain bound.
fn chain_bound(ctx: &Ctx, c: &config::ChainBound) -> Result<ExperimentReport, CliError> {
    let rows = ctx.plain_rows(|_, seed| {
        let mut rng = rng_from_seed(seed);
        let n = rng.random_range(2..=c.max_n);
        let size = rng.random_range(c.max_alphabet.min(2)..=c.max_alphabet);
        let m = random_chain(&mut rng, n, size, c.potential_range)?;
        let psi = gibbs_dependence(&m)?.psi;
        let bound = markov_psi_bound(&m)?.r_bar;
        Ok(row(size, n, psi, bound, None, psi <= bound + c.tolerance))
    })?;
    let violations = rows.iter().filter(|r| !r.success).count();
    let max_excess = rows.iter().map(|r| r.max_emp_err - r.max_stat_err).fold(f64::NEG_INFINITY, f64::max);
    let details = json!({ "violations": violations, "max_psi_minus_bound": max_excess, "tolerance": c.tolerance });
    let summary = ctx.summary("chain-bound", &rows, Some(1.0), violations == 0, details);
    Ok(report(rows, summary))
}

/// Trial `i` checks chain `i / steps.len()` at step `steps[i % steps.len()]`.
/// Columns: `k` = step, `max_emp_err` = psi of the skipped measure,
/// `max_stat_err` = psi of the chain raised to the step.
fn skip_check(ctx: &Ctx, s: &config::SkipCheck) -> Result<ExperimentReport, CliError> {
    let steps = s.steps.len();
    let mut rows = ctx.plain_rows(|trial, _| {
        let chain_seed = derive_seed(ctx.seed, (trial / steps) as u64);
        let t = s.steps[trial % steps];
        let m = random_chain(&mut rng_from_seed(chain_seed), s.n, s.alphabet, s.potential_range)?;
        let psi = gibbs_dependence(&m)?.psi;
        let skipped = gibbs_dependence(&m.skip(t)?)?.psi;
        let power = psi.powi(t as i32);
        Ok(row(t, s.n, skipped, power, None, skipped <= power + s.tolerance))
    })?;
    for r in &mut rows {
        r.seed = derive_seed(ctx.seed, (r.trial / steps) as u64);
    }
    let violations = rows.iter().filter(|r| !r.success).count();
    let max_excess = rows.iter().map(|r| r.max_emp_err - r.max_stat_err).fold(f64::NEG_INFINITY, f64::max);
    let details = json!({
        "violations": violations,
        "chains": ctx.trials.div_ceil(steps),
        "max_excess": max_excess,
        "tolerance": s.tolerance,
    });
    let summary = ctx.summary("skip-check", &rows, Some(1.0), violations == 0, details);
    Ok(report(rows, summary))
}

/// Columns: `max_emp_err` = h(S), `max_stat_err` = h(mu).
fn negative_example(ctx: &Ctx, e: &config::NegativeExample) -> Result<ExperimentReport, CliError> {
    let budget = PrivacyBudget::new(e.epsilon, e.delta)?;
    let n = e.n.unwrap_or_else(|| negative_example_sample_size(e.psi, &budget, e.beta));
    let measure = Measure::planted(e.psi, e.grid_size, n)?;
    let cell_mass = 1.0 / e.grid_size as f64;
    let results = ctx.rows(|_, seed| {
        let mut rng = rng_from_seed(seed);
        let draw = measure.sample_planted(&mut rng).expect("planted measure");
        let h = deviating_algorithm(&draw.tuple, &budget, e.beta, &mut rng)?;
        let emp = h.empirical(&draw.tuple);
        let pop = measure.query_mean(&h);
        let success = emp >= e.psi / 2.0 && (pop - cell_mass).abs() <= 1e-15;
        let released_star = h == StatisticalQuery::Singleton { symbol: draw.star };
        Ok((row(1, n, emp, pop, None, success), released_star))
    })?;
    let released = results.iter().filter(|r| r.1).count();
    let rows: Vec<TrialRow> = results.into_iter().map(|r| r.0).collect();
    let required = 1.0 - e.beta - (-(n as f64) / 8.0).exp() - e.slack;
    let stats = RowStats::from_rows(&rows);
    let details = json!({
        "n": n,
        "psi": e.psi,
        "grid_size": e.grid_size,
        "latent_cell_released_fraction": fraction(released, rows.len()),
    });
    let summary = ctx.summary("negative-example", &rows, Some(required), stats.success_fraction >= required, details);
    Ok(report(rows, summary))
}

/// Columns: `k` = released list length, `n` = dataset size, `max_emp_err` =
/// listed symbols with multiplicity below 2, `max_stat_err` = 1 when the heavy
/// symbol was missed.
fn histogram(ctx: &Ctx, h: &config::Histogram) -> Result<ExperimentReport, CliError> {
    let budget = PrivacyBudget::new(h.epsilon, h.delta)?;
    let heavy_count = histogram_completeness_threshold(&budget, h.beta).ceil() as usize;
    const UNIVERSE: u32 = 1_000_000;
    let rows = ctx.plain_rows(|_, seed| {
        let mut rng = rng_from_seed(seed);
        let heavy: Symbol = rng.random_range(0..UNIVERSE);
        let mut sample = vec![heavy; heavy_count];
        for _ in 0..h.light_symbols {
            let s = rng.random_range(0..UNIVERSE);
            let copies = rng.random_range(2..=3);
            sample.extend(std::iter::repeat_n(s, copies));
        }
        sample.extend((0..h.fillers).map(|_| rng.random_range(0..UNIVERSE)));
        let listed = stable_histogram(&sample, &budget, h.beta, &mut rng)?;
        let mut counts: HashMap<Symbol, usize> = HashMap::new();
        sample.iter().for_each(|&s| *counts.entry(s).or_default() += 1);
        let unsound = listed.iter().filter(|i| counts[&i.symbol] < 2).count();
        let found = listed.iter().any(|i| i.symbol == heavy);
        Ok(row(listed.len(), sample.len(), unsound as f64, if found { 0.0 } else { 1.0 }, None, found && unsound == 0))
    })?;
    let violations: f64 = rows.iter().map(|r| r.max_emp_err).sum();
    let completeness = fraction(rows.iter().filter(|r| r.max_stat_err == 0.0).count(), rows.len());
    let required = 1.0 - h.beta - h.slack;
    let stats = RowStats::from_rows(&rows);
    let details = json!({
        "soundness_violations": violations,
        "completeness_fraction": completeness,
        "heavy_count": heavy_count,
    });
    let passed = violations == 0.0 && stats.success_fraction >= required;
    let summary = ctx.summary("histogram", &rows, Some(required), passed, details);
    Ok(report(rows, summary))
}

fn reference(mode: ReferenceMode, measure: &Arc<Measure>) -> SignReference {
    match mode {
        ReferenceMode::Exact => SignReference::Exact(measure.clone()),
        ReferenceMode::Agnostic => SignReference::Agnostic,
    }
}

fn final_round(t: &Transcript, sample: &[Symbol], measure: &Measure) -> Result<(f64, f64), CliError> {
    if !t.valid {
        return Err(CliError::Usage(format!("game aborted: {}", t.abort_reason.clone().unwrap_or_default())));
    }
    let emp = empirical_error(t, sample).final_round_error().unwrap_or(0.0);
    let stat = statistical_error(t, measure)?.final_round_error().unwrap_or(0.0);
    Ok((emp, stat))
}

/// Paired naive and Gaussian arms on the same dataset and attacker seed.
/// Main rows are the naive arm (`success` = final-round statistical error
/// above `factor` times the Hoeffding value in `gamma_max`); `rows-gaussian`
/// holds the Gaussian arm (`success` = at most half the paired naive error).
fn attack(ctx: &Ctx, a: &config::Attack) -> Result<ExperimentReport, CliError> {
    let measure = Arc::new(Measure::uniform_product(a.alphabet, a.n)?);
    let budget = PrivacyBudget::new(a.epsilon, a.delta)?;
    let noise = calibrate_gaussian(a.k, a.n, &budget)?;
    let hoeffding = ((2.0 / a.hoeffding_delta).ln() / (2.0 * a.n as f64)).sqrt();
    let results = ctx.rows(|_, seed| {
        let sample = measure.sample(&mut rng_from_seed(derive_seed(seed, 0)));
        let play = |mech: &mut dyn Mechanism| -> Result<(f64, f64), CliError> {
            let mut analyst =
                RandomSignAttacker::new(a.k, derive_seed(seed, 1), a.alphabet, reference(a.reference, &measure))?;
            let t = run_game(mech, &mut analyst, &sample, a.k, TranscriptSeeds::default())?;
            final_round(&t, &sample, &measure)
        };
        let (naive_emp, naive_stat) = play(&mut NaiveMechanism::default())?;
        let mut gauss = GaussianMechanism::new(noise, rng_from_seed(derive_seed(seed, 2)));
        let (gauss_emp, gauss_stat) = play(&mut gauss)?;
        let naive = row(a.k, a.n, naive_emp, naive_stat, Some(hoeffding), naive_stat > a.factor * hoeffding);
        let gaussian = row(a.k, a.n, gauss_emp, gauss_stat, Some(hoeffding), gauss_stat <= 0.5 * naive_stat);
        Ok((naive, gaussian))
    })?;
    let (rows, gaussian): (Vec<TrialRow>, Vec<TrialRow>) = results.into_iter().unzip();
    let gaussian: Vec<TrialRow> = gaussian
        .into_iter()
        .zip(&rows)
        .map(|(mut g, r)| {
            g.trial = r.trial;
            g.seed = r.seed;
            g.wall_ms = r.wall_ms;
            g
        })
        .collect();
    let naive_stats = RowStats::from_rows(&rows);
    let gauss_stats = RowStats::from_rows(&gaussian);
    let passed = naive_stats.success_fraction >= a.required_fraction && gauss_stats.success_fraction >= a.required_fraction;
    let details = json!({
        "hoeffding": hoeffding,
        "sigma": noise.scale,
        "naive_success_fraction": naive_stats.success_fraction,
        "gaussian_success_fraction": gauss_stats.success_fraction,
        "gaussian": serde_json::to_value(&gauss_stats)?,
    });
    let summary = ctx.summary("attack", &rows, Some(a.required_fraction), passed, details);
    Ok(ExperimentReport {
        rows,
        extra: vec![NamedRows { label: "gaussian".into(), rows: gaussian }],
        summary,
        transcript: None,
    })
}

fn build_mechanism(spec: &MechanismSpec, k: usize, n: usize, seed: u64) -> Result<Box<dyn Mechanism>, CliError> {
    Ok(match spec {
        MechanismSpec::Naive => Box::new(NaiveMechanism::default()),
        MechanismSpec::Gaussian { epsilon, delta } => {
            let noise: NoiseSpec = calibrate_gaussian(k, n, &PrivacyBudget::new(*epsilon, *delta)?)?;
            Box::new(GaussianMechanism::new(noise, rng_from_seed(seed)))
        }
        MechanismSpec::Rounded { alpha } => Box::new(RoundedMechanism::new(CompressionSpec::new(*alpha)?)),
    })
}

fn build_analyst(spec: &AnalystSpec, k: usize, measure: &Arc<Measure>, seed: u64) -> Result<Box<dyn Analyst>, CliError> {
    let alphabet = measure.alphabet().size();
    Ok(match spec {
        AnalystSpec::RandomSign { reference: mode } => {
            Box::new(RandomSignAttacker::new(k, seed, alphabet, reference(*mode, measure))?)
        }
        AnalystSpec::Scripted { queries } => {
            for q in queries {
                q.validate()?;
            }
            Box::new(ScriptedAnalyst::new(queries.clone()))
        }
        AnalystSpec::Feedback => Box::new(FeedbackAnalyst::new(alphabet, k)),
    })
}

/// One game per trial. `success` = the game completed all rounds. The first
/// trial's transcript is kept.
fn game(ctx: &Ctx, g: &config::Game) -> Result<ExperimentReport, CliError> {
    let measure = Arc::new(g.measure.clone());
    let n = measure.n();
    let results = ctx.rows(|trial, seed| {
        let seeds = TranscriptSeeds {
            dataset: Some(derive_seed(seed, 0)),
            mechanism: Some(derive_seed(seed, 1)),
            analyst: Some(derive_seed(seed, 2)),
        };
        let sample = measure.sample(&mut rng_from_seed(derive_seed(seed, 0)));
        let mut mech = build_mechanism(&g.mechanism, g.k, n, derive_seed(seed, 1))?;
        let mut analyst = build_analyst(&g.analyst, g.k, &measure, derive_seed(seed, 2))?;
        let t = run_game(mech.as_mut(), analyst.as_mut(), &sample, g.k, seeds)?;
        let emp = empirical_error(&t, &sample).max_error;
        let stat = statistical_error(&t, &measure)?.max_error;
        let keep = (trial == 0).then(|| t.to_jsonl());
        Ok((row(g.k, n, emp, stat, None, t.valid), keep))
    })?;
    let transcript = results.first().and_then(|r| r.1.clone());
    let rows: Vec<TrialRow> = results.into_iter().map(|r| r.0).collect();
    let passed = rows.iter().all(|r| r.success);
    let details = json!({ "measure": measure.kind_name() });
    let summary = ctx.summary("game", &rows, Some(1.0), passed, details);
    Ok(ExperimentReport { rows, extra: Vec::new(), summary, transcript })
}

/// One row per dataset of the universe (the trial count is ignored).
/// `max_emp_err` = largest per-round empirical error, `max_stat_err` = 0,
/// `success` = that error is at most `alpha/2`.
fn compress(ctx: &Ctx, c: &config::Compress) -> Result<ExperimentReport, CliError> {
    let spec = CompressionSpec::new(c.alpha)?;
    let datasets = all_datasets(c.alphabet, c.n)?;
    let mut make = || Box::new(FeedbackAnalyst::new(c.alphabet, c.k)) as Box<dyn Analyst>;
    let mut keys = BTreeSet::new();
    let mut rows = Vec::with_capacity(datasets.len());
    for (i, sample) in datasets.iter().enumerate() {
        let start = Instant::now();
        let mut analyst = make();
        let t = run_game(&mut RoundedMechanism::new(spec), analyst.as_mut(), sample, c.k, TranscriptSeeds::default())?;
        let emp = empirical_error(&t, sample).max_error;
        keys.insert(transcript_key(&t));
        let mut r = row(c.k, c.n, emp, 0.0, None, t.valid && emp <= c.alpha / 2.0 + FLOAT_SLACK);
        r.trial = i;
        r.seed = ctx.trial_seed(i);
        r.wall_ms = if ctx.timing { start.elapsed().as_millis() as u64 } else { 0 };
        rows.push(r);
    }
    let bound = transcript_bound(&spec, c.k)?;
    let tree = if bound <= 1_000_000u32.into() { Some(answer_tree(&mut make, &spec, c.k)?) } else { None };
    let subset = tree.as_ref().map(|t| keys.is_subset(t));
    let passed = rows.iter().all(|r| r.success) && num_bigint::BigUint::from(keys.len()) <= bound && subset != Some(false);
    let details = json!({
        "distinct_transcripts": keys.len(),
        "transcript_bound": bound.to_string(),
        "answer_tree_size": tree.as_ref().map(BTreeSet::len),
        "reachable_within_tree": subset,
        "datasets": datasets.len(),
        "alpha": c.alpha,
    });
    let summary = ctx.summary("compress", &rows, Some(1.0), passed, details);
    Ok(report(rows, summary))
}

/// `k` queries of the random-sign attacker against the Gaussian mechanism,
/// returned as predicates.
fn attack_pipeline(
    measure: Arc<Measure>,
    k: usize,
    noise: NoiseSpec,
) -> impl FnMut(&[Symbol], &mut Rng) -> adagibbs_core::Result<Vec<StatisticalQuery>> {
    move |sample: &[Symbol], rng: &mut Rng| {
        let mut mech = GaussianMechanism::new(noise, rng_from_seed(rng.random()));
        let alphabet = measure.alphabet().size();
        let mut analyst = RandomSignAttacker::new(k, rng.random(), alphabet, SignReference::Exact(measure.clone()))?;
        let t = run_game(&mut mech, &mut analyst, sample, k, TranscriptSeeds::default())?;
        Ok(t.rounds.into_iter().filter_map(|r| r.query.as_statistical().cloned()).collect())
    }
}

/// One monitor run per trial. `max_emp_err` = h*(S_t*), `max_stat_err` =
/// h*(mu), `success` = the single-run gap is within the bound. The verdict
/// uses the mean gap.
fn monitor_experiment(ctx: &Ctx, m: &config::Monitor) -> Result<ExperimentReport, CliError> {
    let measure = Arc::new(chain_from(&m.chain, ctx.seed)?);
    let psi = gibbs_dependence(&measure)?.psi;
    let budget = PrivacyBudget::new(m.epsilon, m.delta)?;
    let noise = calibrate_gaussian(m.k, measure.n(), &budget)?;
    let cfg = MonitorConfig { budget, rounds_override: Some(m.rounds), cap: m.cap };
    let bound = expectation_bound(m.epsilon, m.rounds, m.delta, psi);
    let rows = ctx.plain_rows(|_, seed| {
        let mut alg = attack_pipeline(measure.clone(), m.k, noise);
        let o = monitor(&mut alg, &measure, &cfg, &mut rng_from_seed(seed))?;
        Ok(row(m.k, measure.n(), o.empirical, o.population, None, o.gap().abs() <= bound))
    })?;
    let gaps: Vec<f64> = rows.iter().map(|r| r.max_stat_err - r.max_emp_err).collect();
    let g = GapEstimate::from_gaps(&gaps);
    let passed = g.abs_gap() <= bound + 3.0 * g.std_error;
    let details = json!({
        "psi": psi,
        "bound": bound,
        "mean_gap": g.mean_gap,
        "abs_gap": g.abs_gap(),
        "std_error": g.std_error,
        "rounds": m.rounds,
        "sigma": noise.scale,
    });
    let summary = ctx.summary("monitor", &rows, None, passed, details);
    Ok(report(rows, summary))
}

/// Rounded mechanism with the feedback analyst on a chain. `gamma_max` =
/// largest estimated width among the run's queries; `success` = no violation
/// of `max |a_i - q_i(mu)| <= alpha/2 + max gamma` on runs where every query
/// concentrated within its width.
fn query_accuracy(ctx: &Ctx, q: &config::QueryAccuracy) -> Result<ExperimentReport, CliError> {
    let measure = Arc::new(chain_from(&q.chain, ctx.seed)?);
    let spec = CompressionSpec::new(q.alpha)?;
    let gamma_master = derive_seed(ctx.seed, GAMMA_STREAM);
    let cache: Mutex<HashMap<u64, f64>> = Mutex::new(HashMap::new());
    let gamma = |query: &Query| -> Result<f64, CliError> {
        let key = fnv1a(serde_json::to_string(query)?.as_bytes());
        if let Some(&g) = cache.lock().expect("gamma cache").get(&key) {
            return Ok(g);
        }
        let mut rng = rng_from_seed(derive_seed(gamma_master, key));
        let g = gamma_estimate(query, &measure, q.delta, q.gamma_trials, &mut rng)?;
        cache.lock().expect("gamma cache").insert(key, g);
        Ok(g)
    };
    let alphabet = measure.alphabet().size();
    let results = ctx.rows(|_, seed| {
        let sample = measure.sample(&mut rng_from_seed(seed));
        let mut analyst = FeedbackAnalyst::new(alphabet, q.k);
        let t = run_game(&mut RoundedMechanism::new(spec), &mut analyst, &sample, q.k, TranscriptSeeds::default())?;
        let stat = statistical_error(&t, &measure)?;
        let mut concentrated = true;
        let mut gamma_max: f64 = 0.0;
        for r in &t.rounds {
            let g = gamma(&r.query)?;
            gamma_max = gamma_max.max(g);
            let deviation = (r.query.eval_tuple(&sample) - measure.tuple_query_mean(&r.query)?).abs();
            concentrated &= deviation <= g;
        }
        let violated = concentrated && stat.max_error > q.alpha / 2.0 + gamma_max + FLOAT_SLACK;
        let emp = empirical_error(&t, &sample).max_error;
        Ok((row(q.k, measure.n(), emp, stat.max_error, Some(gamma_max), t.valid && !violated), concentrated))
    })?;
    let conditioned = results.iter().filter(|r| r.1).count();
    let rows: Vec<TrialRow> = results.into_iter().map(|r| r.0).collect();
    let violations = rows.iter().filter(|r| !r.success).count();
    let details = json!({
        "concentrated_runs": conditioned,
        "violations": violations,
        "alpha": q.alpha,
        "delta": q.delta,
        "distinct_queries": cache.lock().expect("gamma cache").len(),
    });
    let summary = ctx.summary("query-accuracy", &rows, Some(1.0), violations == 0, details);
    Ok(report(rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::*;

    fn small(experiment: Experiment, trials: usize) -> ExperimentConfig {
        ExperimentConfig { trials: Some(trials), ..ExperimentConfig::new(11, experiment) }
    }

    #[test]
    fn summary_matches_rows_for_every_experiment() {
        let configs = vec![
            small(Experiment::PsiProduct(PsiProduct::default()), 5),
            small(Experiment::ChainBound(ChainBound::default()), 5),
            small(Experiment::SkipCheck(SkipCheck { n: 6, ..SkipCheck::default() }), 4),
            small(Experiment::NegativeExample(NegativeExample::default()), 3),
            small(Experiment::Histogram(Histogram::default()), 5),
            small(Experiment::Attack(Attack { alphabet: 200, n: 20, k: 30, ..Attack::default() }), 3),
            small(Experiment::Game(Game::default()), 2),
            small(Experiment::Compress(Compress::default()), 1),
            small(Experiment::Monitor(Monitor { rounds: 3, k: 4, ..Monitor::default() }), 4),
            small(Experiment::QueryAccuracy(QueryAccuracy { k: 3, ..QueryAccuracy::default() }), 4),
        ];
        for cfg in configs {
            let r = run_experiment(&cfg).unwrap();
            assert!(RowStats::from_rows(&r.rows).matches(&r.summary.stats, 1e-12), "{}", cfg.experiment.name());
            assert_eq!(r.summary.experiment, cfg.experiment.name());
            if !matches!(cfg.experiment, Experiment::Compress(_)) {
                assert_eq!(r.rows.len(), cfg.trials());
            }
            assert!(r.rows.iter().enumerate().all(|(i, row)| row.trial == i && row.wall_ms == 0));
        }
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let cfg = small(Experiment::ChainBound(ChainBound::default()), 12);
        let one = run_experiment_with(&cfg, Some(1)).unwrap();
        let four = run_experiment_with(&cfg, Some(4)).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn compress_counts_transcripts() {
        let r = run_experiment(&small(Experiment::Compress(Compress::default()), 1)).unwrap();
        assert_eq!(r.rows.len(), 16);
        assert!(r.summary.passed);
        assert_eq!(r.summary.details["transcript_bound"], "64");
        assert!(r.summary.details["distinct_transcripts"].as_u64().unwrap() <= 64);
    }

    #[test]
    fn game_keeps_first_transcript() {
        let r = run_experiment(&small(Experiment::Game(Game::default()), 2)).unwrap();
        let t = Transcript::from_jsonl(r.transcript.as_ref().unwrap()).unwrap();
        assert_eq!(t.rounds.len(), 20);
        assert_eq!(t.seeds.dataset, Some(derive_seed(r.rows[0].seed, 0)));
    }
}
