//! Experiment configuration files.
//!
//! A config is one JSON object with a mandatory master `seed` and an
//! `experiment` object tagged by `name`. Every experiment parameter has a
//! default, so `{"seed": 1, "experiment": {"name": "attack"}}` is complete.

use std::path::Path;

use adagibbs_core::{Measure, MeasureSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Falls back to the experiment's own default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    /// Fill the `wall_ms` column. Off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
    pub experiment: Experiment,
}

impl ExperimentConfig {
    pub fn new(seed: u64, experiment: Experiment) -> Self {
        ExperimentConfig { seed, trials: None, record_timing: false, experiment }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        // The tagged experiment body is checked on its own first: serde
        // buffers tagged content, which hides paths inside it.
        if let Ok(serde_json::Value::Object(top)) = serde_json::from_str::<serde_json::Value>(text) {
            if let Some(serde_json::Value::Object(body)) = top.get("experiment") {
                Experiment::check_body(body)?;
            }
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn trials(&self) -> usize {
        self.trials.unwrap_or_else(|| self.experiment.default_trials())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.trials == Some(0) {
            return Err(CliError::config("trials", "must be at least 1"));
        }
        self.experiment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Experiment {
    PsiProduct(PsiProduct),
    ChainBound(ChainBound),
    SkipCheck(SkipCheck),
    NegativeExample(NegativeExample),
    Histogram(Histogram),
    Attack(Attack),
    Game(Game),
    Compress(Compress),
    Monitor(Monitor),
    QueryAccuracy(QueryAccuracy),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::PsiProduct(_) => "psi-product",
            Experiment::ChainBound(_) => "chain-bound",
            Experiment::SkipCheck(_) => "skip-check",
            Experiment::NegativeExample(_) => "negative-example",
            Experiment::Histogram(_) => "histogram",
            Experiment::Attack(_) => "attack",
            Experiment::Game(_) => "game",
            Experiment::Compress(_) => "compress",
            Experiment::Monitor(_) => "monitor",
            Experiment::QueryAccuracy(_) => "query-accuracy",
        }
    }

    /// Default experiment for a name, as used by the named subcommands.
    pub fn default_for(name: &str) -> Option<Self> {
        Some(match name {
            "psi-product" => Experiment::PsiProduct(Default::default()),
            "chain-bound" => Experiment::ChainBound(Default::default()),
            "skip-check" => Experiment::SkipCheck(Default::default()),
            "negative-example" => Experiment::NegativeExample(Default::default()),
            "histogram" => Experiment::Histogram(Default::default()),
            "attack" => Experiment::Attack(Default::default()),
            "game" => Experiment::Game(Default::default()),
            "compress" => Experiment::Compress(Default::default()),
            "monitor" => Experiment::Monitor(Default::default()),
            "query-accuracy" => Experiment::QueryAccuracy(Default::default()),
            _ => return None,
        })
    }

    fn check_body(body: &serde_json::Map<String, serde_json::Value>) -> Result<(), CliError> {
        fn parse<T: serde::de::DeserializeOwned>(body: serde_json::Value) -> Result<(), CliError> {
            serde_path_to_error::deserialize::<_, T>(body).map(drop).map_err(|e| {
                let at = e.path().to_string();
                let path = if at == "." { "experiment".to_string() } else { format!("experiment.{at}") };
                CliError::Config { path, message: e.inner().to_string() }
            })
        }
        let Some(serde_json::Value::String(name)) = body.get("name") else {
            return Err(CliError::config("experiment.name", "missing experiment name"));
        };
        let mut rest = body.clone();
        rest.remove("name");
        let rest = serde_json::Value::Object(rest);
        match name.as_str() {
            "psi-product" => parse::<PsiProduct>(rest),
            "chain-bound" => parse::<ChainBound>(rest),
            "skip-check" => parse::<SkipCheck>(rest),
            "negative-example" => parse::<NegativeExample>(rest),
            "histogram" => parse::<Histogram>(rest),
            "attack" => parse::<Attack>(rest),
            "game" => parse::<Game>(rest),
            "compress" => parse::<Compress>(rest),
            "monitor" => parse::<Monitor>(rest),
            "query-accuracy" => parse::<QueryAccuracy>(rest),
            other => Err(CliError::config("experiment.name", format!("unknown experiment `{other}`"))),
        }
    }

    pub fn default_trials(&self) -> usize {
        match self {
            Experiment::PsiProduct(_) => 100,
            Experiment::ChainBound(_) => 200,
            Experiment::SkipCheck(s) => 100 * s.steps.len(),
            Experiment::NegativeExample(_) => 200,
            Experiment::Histogram(_) => 1000,
            Experiment::Attack(_) => 50,
            Experiment::Game(_) => 1,
            // one row per dataset in the universe; the trial count is ignored
            Experiment::Compress(_) => 1,
            Experiment::Monitor(_) => 100,
            Experiment::QueryAccuracy(_) => 500,
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let at = |field: &str| format!("experiment.{field}");
        let unit = |field: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(CliError::config(at(field), format!("must lie in (0,1), got {v}")))
            }
        };
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::config(at(field), format!("must be positive, got {v}")))
            }
        };
        let range = |field: &str, r: [f64; 2]| {
            if r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite() {
                Ok(())
            } else {
                Err(CliError::config(at(field), "needs 0 < low <= high"))
            }
        };
        match self {
            Experiment::PsiProduct(p) => {
                if p.max_n == 0 || p.max_alphabet == 0 {
                    return Err(CliError::config(at("max_n"), "sizes must be at least 1"));
                }
            }
            Experiment::ChainBound(c) => {
                range("potential_range", c.potential_range)?;
                if c.max_n < 2 || c.max_alphabet < 1 {
                    return Err(CliError::config(at("max_n"), "chains need n >= 2"));
                }
            }
            Experiment::SkipCheck(s) => {
                range("potential_range", s.potential_range)?;
                if s.steps.is_empty() || s.steps.iter().any(|&t| t < 1 || s.n % t != 0 || s.n / t < 2) {
                    return Err(CliError::config(at("steps"), "each step must divide n and keep at least 2 coordinates"));
                }
            }
            Experiment::NegativeExample(e) => {
                unit("psi", e.psi)?;
                positive("epsilon", e.epsilon)?;
                unit("delta", e.delta)?;
                unit("beta", e.beta)?;
                if e.grid_size < 2 {
                    return Err(CliError::config(at("grid_size"), "must be at least 2"));
                }
            }
            Experiment::Histogram(h) => {
                positive("epsilon", h.epsilon)?;
                unit("delta", h.delta)?;
                unit("beta", h.beta)?;
            }
            Experiment::Attack(a) => {
                positive("epsilon", a.epsilon)?;
                unit("delta", a.delta)?;
                unit("hoeffding_delta", a.hoeffding_delta)?;
                if a.k < 2 || a.n == 0 || a.alphabet == 0 {
                    return Err(CliError::config(at("k"), "needs k >= 2, n >= 1 and a nonempty alphabet"));
                }
            }
            Experiment::Game(g) => {
                if g.k == 0 {
                    return Err(CliError::config(at("k"), "must be at least 1"));
                }
                g.mechanism.validate(&at("mechanism"))?;
            }
            Experiment::Compress(c) => {
                if !(c.alpha > 0.0 && c.alpha <= 1.0) {
                    return Err(CliError::config(at("alpha"), "must lie in (0,1]"));
                }
                if c.k == 0 {
                    return Err(CliError::config(at("k"), "must be at least 1"));
                }
            }
            Experiment::Monitor(m) => {
                positive("epsilon", m.epsilon)?;
                unit("delta", m.delta)?;
                m.chain.validate(&at("chain"))?;
                if m.k == 0 {
                    return Err(CliError::config(at("k"), "must be at least 1"));
                }
            }
            Experiment::QueryAccuracy(q) => {
                unit("delta", q.delta)?;
                q.chain.validate(&at("chain"))?;
                if !(q.alpha > 0.0 && q.alpha <= 1.0) {
                    return Err(CliError::config(at("alpha"), "must lie in (0,1]"));
                }
                if q.k == 0 {
                    return Err(CliError::config(at("k"), "must be at least 1"));
                }
                let needed = adagibbs_core::game::gamma_min_trials(q.delta);
                if q.gamma_trials < needed {
                    return Err(CliError::config(at("gamma_trials"), format!("needs at least {needed} trials")));
                }
            }
        }
        Ok(())
    }
}

/// Random product measures, each paired with a random full table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsiProduct {
    pub max_n: usize,
    pub max_alphabet: usize,
    pub tolerance: f64,
}

impl Default for PsiProduct {
    fn default() -> Self {
        PsiProduct { max_n: 6, max_alphabet: 3, tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainBound {
    pub max_n: usize,
    pub max_alphabet: usize,
    pub potential_range: [f64; 2],
    pub tolerance: f64,
}

impl Default for ChainBound {
    fn default() -> Self {
        ChainBound { max_n: 6, max_alphabet: 3, potential_range: [1.0, 3.0], tolerance: 1e-12 }
    }
}

/// Each chain is checked once per step in `steps`; trial `i` uses chain
/// `i / steps.len()` and step `steps[i % steps.len()]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipCheck {
    pub n: usize,
    pub alphabet: usize,
    pub steps: Vec<usize>,
    pub potential_range: [f64; 2],
    pub tolerance: f64,
}

impl Default for SkipCheck {
    fn default() -> Self {
        SkipCheck { n: 12, alphabet: 2, steps: vec![2, 3], potential_range: [1.0, 3.0], tolerance: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegativeExample {
    pub psi: f64,
    pub grid_size: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub beta: f64,
    /// Defaults to `ceil((16/(psi epsilon)) ln(2/(beta delta)))`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub slack: f64,
}

impl Default for NegativeExample {
    fn default() -> Self {
        NegativeExample { psi: 0.2, grid_size: 1_000_000, epsilon: 1.0, delta: 1e-6, beta: 0.1, n: None, slack: 0.05 }
    }
}

/// Datasets with one symbol at the completeness threshold, a few symbols of
/// multiplicity 2 or 3, and uniform fillers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Histogram {
    pub epsilon: f64,
    pub delta: f64,
    pub beta: f64,
    pub fillers: usize,
    pub light_symbols: usize,
    pub slack: f64,
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram { epsilon: 1.0, delta: 1e-6, beta: 0.1, fillers: 200, light_symbols: 5, slack: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    Exact,
    Agnostic,
}

/// Random-sign attack on a uniform product measure, naive against Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Attack {
    pub alphabet: usize,
    pub n: usize,
    pub k: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub reference: ReferenceMode,
    /// Failure probability in the Hoeffding reference `sqrt(ln(2/d)/(2n))`.
    pub hoeffding_delta: f64,
    pub factor: f64,
    pub required_fraction: f64,
}

impl Default for Attack {
    fn default() -> Self {
        Attack {
            alphabet: 10_000,
            n: 100,
            k: 5000,
            epsilon: 1.0,
            delta: 1e-6,
            reference: ReferenceMode::Exact,
            hoeffding_delta: 0.05,
            factor: 2.0,
            required_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismSpec {
    Naive,
    /// Noise calibrated to the game's `k` and `n`.
    Gaussian { epsilon: f64, delta: f64 },
    Rounded { alpha: f64 },
}

impl MechanismSpec {
    fn validate(&self, at: &str) -> Result<(), CliError> {
        match self {
            MechanismSpec::Naive => Ok(()),
            MechanismSpec::Gaussian { epsilon, delta } => {
                if !(*epsilon > 0.0 && *delta > 0.0 && *delta < 1.0) {
                    return Err(CliError::config(at, "gaussian needs epsilon > 0 and delta in (0,1)"));
                }
                Ok(())
            }
            MechanismSpec::Rounded { alpha } => {
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return Err(CliError::config(format!("{at}.alpha"), "must lie in (0,1]"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalystSpec {
    RandomSign { reference: ReferenceMode },
    Scripted { queries: Vec<adagibbs_core::Query> },
    Feedback,
}

/// One seeded game per trial; the first trial's transcript is written out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Game {
    pub measure: Measure,
    pub mechanism: MechanismSpec,
    pub analyst: AnalystSpec,
    pub k: usize,
}

impl Default for Game {
    fn default() -> Self {
        Game {
            measure: Measure::uniform_product(16, 50).expect("valid default"),
            mechanism: MechanismSpec::Naive,
            analyst: AnalystSpec::RandomSign { reference: ReferenceMode::Exact },
            k: 20,
        }
    }
}

/// Rounded mechanism over every dataset of a tiny universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Compress {
    pub alpha: f64,
    pub k: usize,
    pub alphabet: usize,
    pub n: usize,
}

impl Default for Compress {
    fn default() -> Self {
        Compress { alpha: 0.25, k: 3, alphabet: 2, n: 4 }
    }
}

/// A fixed chain measure, or a random one drawn from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChainSource {
    Explicit { measure: MeasureSpec },
    Random { n: usize, alphabet: usize, potential_range: [f64; 2] },
}

impl ChainSource {
    fn validate(&self, at: &str) -> Result<(), CliError> {
        match self {
            ChainSource::Explicit { measure } => Measure::try_from(measure.clone())
                .map(|_| ())
                .map_err(|e| CliError::config(format!("{at}.measure"), e.to_string())),
            ChainSource::Random { n, alphabet, potential_range } => {
                if *n < 2 || *alphabet == 0 || !(potential_range[0] > 0.0 && potential_range[0] <= potential_range[1]) {
                    return Err(CliError::config(at, "random chain needs n >= 2, alphabet >= 1, 0 < low <= high"));
                }
                Ok(())
            }
        }
    }
}

/// Monitor over the Gaussian mechanism attacked by the random-sign analyst.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Monitor {
    pub chain: ChainSource,
    pub k: usize,
    pub epsilon: f64,
    pub delta: f64,
    /// Datasets per monitor run, replacing `ceil(epsilon/delta)`.
    pub rounds: usize,
    pub cap: usize,
}

impl Default for Monitor {
    fn default() -> Self {
        Monitor {
            chain: ChainSource::Random { n: 8, alphabet: 2, potential_range: [1.0, 3.0] },
            k: 10,
            epsilon: 0.5,
            delta: 1e-6,
            rounds: 20,
            cap: 20,
        }
    }
}

/// Rounded mechanism with the feedback analyst on a chain, checked against
/// estimated concentration widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryAccuracy {
    pub chain: ChainSource,
    pub alpha: f64,
    pub k: usize,
    pub delta: f64,
    /// Draws per concentration estimate; at least `ceil(20/delta)`.
    pub gamma_trials: usize,
}

impl Default for QueryAccuracy {
    fn default() -> Self {
        QueryAccuracy {
            chain: ChainSource::Random { n: 10, alphabet: 3, potential_range: [1.0, 3.0] },
            alpha: 0.25,
            k: 5,
            delta: 0.05,
            gamma_trials: 400,
        }
    }
}
