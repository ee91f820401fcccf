//! Joint measures over `n`-tuples of a finite alphabet.
//!
//! Four representations are supported:
//!
//! * **Product**: independent coordinates with explicit marginals.
//! * **Table**: an explicit dense probability table indexed by tuple.
//! * **Chain**: an undirected Markov chain `mu(x) ∝ prod_i g_i(x_i, x_{i+1})`
//!   with strictly positive potentials.
//! * **Planted**: a latent cell `x*` uniform on `m` grid cells; each coordinate
//!   independently equals `x*` with probability `psi` and is otherwise a fresh
//!   uniform cell.
//!
//! Tables are indexed in lexicographic order with coordinate 0 most
//! significant, so a lower index is a lexicographically smaller tuple.
//!
//! Chain inference never expands the table. Forward and backward messages are
//! transfer-matrix products renormalized after every step, computed on
//! potentials rescaled to a unit maximum, so they neither under- nor overflow
//! for long chains.

use std::sync::OnceLock;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::query::{Query, StatisticalQuery};
use crate::seeding::Rng;
use crate::Symbol;

/// Default cap on explicit table entries.
pub const DEFAULT_TABLE_CAP: usize = 10_000_000;

/// Tolerance on the total mass of user-supplied distributions.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Tolerance used when validating a chain representation of a skipped chain.
pub const SKIP_CHECK_TOL: f64 = 1e-12;

/// Finite alphabet `{0, .., size-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Alphabet(usize);

impl Alphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(validation("alphabet size must be at least 1"));
        }
        if size > Symbol::MAX as usize {
            return Err(validation(format!("alphabet size {size} does not fit a symbol")));
        }
        Ok(Alphabet(size))
    }

    pub fn size(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for Alphabet {
    type Error = Error;
    fn try_from(size: usize) -> Result<Self> {
        Alphabet::new(size)
    }
}

impl From<Alphabet> for usize {
    fn from(a: Alphabet) -> usize {
        a.0
    }
}

/// Compensated (Neumaier) summation.
pub(crate) fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_distribution(dist: &[f64], what: &str) -> Result<()> {
    if let Some(p) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(validation(format!("{what}: invalid probability {p}")));
    }
    let total = stable_sum(dist.iter().copied());
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(validation(format!("{what}: total mass {total} is not 1")));
    }
    Ok(())
}

fn normalize_in_place(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
}

/// Number of entries of an `alphabet^n` table, or `None` past `u128`.
pub fn table_entries(alphabet: usize, n: usize) -> Option<u128> {
    let mut acc: u128 = 1;
    for _ in 0..n {
        acc = acc.checked_mul(alphabet as u128)?;
    }
    Some(acc)
}

fn check_cap(alphabet: usize, n: usize, cap: usize, hint: &'static str) -> Result<usize> {
    match table_entries(alphabet, n) {
        Some(e) if e <= cap as u128 => Ok(e as usize),
        e => Err(Error::TableTooLarge { entries: e.unwrap_or(u128::MAX), cap, hint }),
    }
}

/// Decodes a table index into a tuple (coordinate 0 most significant).
pub fn decode_tuple(mut index: usize, alphabet: usize, n: usize, out: &mut [Symbol]) {
    for slot in out[..n].iter_mut().rev() {
        *slot = (index % alphabet) as Symbol;
        index /= alphabet;
    }
}

pub fn encode_tuple(tuple: &[Symbol], alphabet: usize) -> usize {
    tuple.iter().fold(0usize, |acc, &x| acc * alphabet + x as usize)
}

/// Draws an index with probability proportional to `weights` by walking the
/// cumulative sum.
pub(crate) fn draw_weighted(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave u == total; fall back to the last positive weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn draw_cumulative(cumulative: &[f64], rng: &mut Rng) -> usize {
    let total = *cumulative.last().expect("non-empty cumulative");
    let u = rng.random::<f64>() * total;
    let i = cumulative.partition_point(|c| *c <= u);
    i.min(cumulative.len() - 1)
}

fn cumulative(dist: &[f64]) -> Vec<f64> {
    dist.iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ProductPayload {
    marginals: Vec<Vec<f64>>,
    cumulative: Vec<Vec<f64>>,
}

impl ProductPayload {
    pub fn marginals(&self) -> &[Vec<f64>] {
        &self.marginals
    }
}

#[derive(Debug, Clone)]
pub struct TablePayload {
    probs: Vec<f64>,
    cumulative: OnceLock<Vec<f64>>,
}

impl TablePayload {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Potentials stored row-major, `g[a * size + b] = g_i(a, b)`.
#[derive(Debug, Clone)]
pub struct ChainPayload {
    potentials: Vec<Vec<f64>>,
    /// Potentials divided by their own maximum entry.
    scaled: Vec<Vec<f64>>,
    /// `forward[i](a) ∝ sum over x_0..x_{i-1} of prod_{j<i} g_j`.
    forward: Vec<Vec<f64>>,
    /// `backward[i](a) ∝ sum over x_{i+1}..x_{n-1} of prod_{j>=i} g_j`.
    backward: Vec<Vec<f64>>,
}

impl ChainPayload {
    pub fn potentials(&self) -> &[Vec<f64>] {
        &self.potentials
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedPayload {
    pub psi: f64,
    pub grid_size: usize,
}

#[derive(Debug, Clone)]
pub enum MeasureKind {
    Product(ProductPayload),
    Table(TablePayload),
    Chain(ChainPayload),
    Planted(PlantedPayload),
}

/// A probability measure over `n`-tuples. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Measure {
    n: usize,
    alphabet: Alphabet,
    kind: MeasureKind,
    mean_marginal: OnceLock<Vec<f64>>,
}

/// Serialized form of a [`Measure`]: a kind tag plus its payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureSpec {
    Product { marginals: Vec<Vec<f64>> },
    Table { alphabet: usize, n: usize, probs: Vec<f64> },
    Chain { potentials: Vec<Vec<Vec<f64>>> },
    Planted { psi: f64, grid_size: usize, n: usize },
}

impl TryFrom<MeasureSpec> for Measure {
    type Error = Error;
    fn try_from(spec: MeasureSpec) -> Result<Self> {
        match spec {
            MeasureSpec::Product { marginals } => Measure::product(marginals),
            MeasureSpec::Table { alphabet, n, probs } => Measure::table(alphabet, n, probs),
            MeasureSpec::Chain { potentials } => {
                let size = potentials.first().map_or(0, |g| g.len());
                let mut flat = Vec::with_capacity(potentials.len());
                for (i, g) in potentials.iter().enumerate() {
                    if g.len() != size || g.iter().any(|row| row.len() != size) {
                        return Err(validation(format!(
                            "potential {i} is not a {size}x{size} matrix"
                        )));
                    }
                    flat.push(g.iter().flatten().copied().collect());
                }
                Measure::chain(size, flat)
            }
            MeasureSpec::Planted { psi, grid_size, n } => Measure::planted(psi, grid_size, n),
        }
    }
}

impl From<&Measure> for MeasureSpec {
    fn from(m: &Measure) -> Self {
        let size = m.alphabet.size();
        match &m.kind {
            MeasureKind::Product(p) => MeasureSpec::Product { marginals: p.marginals.clone() },
            MeasureKind::Table(t) => MeasureSpec::Table { alphabet: size, n: m.n, probs: t.probs.clone() },
            MeasureKind::Chain(c) => MeasureSpec::Chain {
                potentials: c
                    .potentials
                    .iter()
                    .map(|g| g.chunks(size).map(<[f64]>::to_vec).collect())
                    .collect(),
            },
            MeasureKind::Planted(p) => MeasureSpec::Planted { psi: p.psi, grid_size: p.grid_size, n: m.n },
        }
    }
}

impl From<Measure> for MeasureSpec {
    fn from(m: Measure) -> Self {
        MeasureSpec::from(&m)
    }
}

/// Equality of the serialized forms.
impl PartialEq for Measure {
    fn eq(&self, other: &Self) -> bool {
        MeasureSpec::from(self) == MeasureSpec::from(other)
    }
}

impl Serialize for Measure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MeasureSpec::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Measure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = MeasureSpec::deserialize(d)?;
        Measure::try_from(spec).map_err(serde::de::Error::custom)
    }
}

impl Measure {
    fn from_kind(n: usize, alphabet: Alphabet, kind: MeasureKind) -> Self {
        Measure { n, alphabet, kind, mean_marginal: OnceLock::new() }
    }

    /// Product of the given per-coordinate marginals.
    pub fn product(marginals: Vec<Vec<f64>>) -> Result<Self> {
        let first = marginals.first().ok_or_else(|| validation("product needs at least one marginal"))?;
        let alphabet = Alphabet::new(first.len())?;
        for (i, m) in marginals.iter().enumerate() {
            if m.len() != alphabet.size() {
                return Err(validation(format!("marginal {i} has {} entries, expected {}", m.len(), alphabet.size())));
            }
            check_distribution(m, &format!("marginal {i}"))?;
        }
        let cumulative = marginals.iter().map(|m| cumulative(m)).collect();
        let n = marginals.len();
        Ok(Self::from_kind(n, alphabet, MeasureKind::Product(ProductPayload { marginals, cumulative })))
    }

    /// `n` i.i.d. coordinates, each uniform on the alphabet.
    pub fn uniform_product(alphabet: usize, n: usize) -> Result<Self> {
        Alphabet::new(alphabet)?;
        if n == 0 {
            return Err(validation("n must be at least 1"));
        }
        Self::product(vec![vec![1.0 / alphabet as f64; alphabet]; n])
    }

    /// Explicit table over `alphabet^n` tuples.
    pub fn table(alphabet: usize, n: usize, probs: Vec<f64>) -> Result<Self> {
        Self::table_with_cap(alphabet, n, probs, DEFAULT_TABLE_CAP)
    }

    pub fn table_with_cap(alphabet: usize, n: usize, probs: Vec<f64>, cap: usize) -> Result<Self> {
        let alphabet = Alphabet::new(alphabet)?;
        if n == 0 {
            return Err(validation("n must be at least 1"));
        }
        let entries = check_cap(alphabet.size(), n, cap, "")?;
        if probs.len() != entries {
            return Err(validation(format!("table has {} entries, expected {entries}", probs.len())));
        }
        check_distribution(&probs, "table")?;
        Ok(Self::table_unchecked(alphabet, n, probs))
    }

    fn table_unchecked(alphabet: Alphabet, n: usize, probs: Vec<f64>) -> Self {
        Self::from_kind(n, alphabet, MeasureKind::Table(TablePayload { probs, cumulative: OnceLock::new() }))
    }

    /// Undirected chain from `n-1` row-major `size x size` potential matrices.
    pub fn chain(size: usize, potentials: Vec<Vec<f64>>) -> Result<Self> {
        let alphabet = Alphabet::new(size)?;
        if potentials.is_empty() {
            return Err(validation("a chain needs at least one potential (n >= 2)"));
        }
        for (i, g) in potentials.iter().enumerate() {
            if g.len() != size * size {
                return Err(validation(format!("potential {i} has {} entries, expected {}", g.len(), size * size)));
            }
            if let Some(v) = g.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(validation(format!("potential {i} has non-positive entry {v}")));
            }
        }
        let scaled: Vec<Vec<f64>> = potentials
            .iter()
            .map(|g| {
                let max = g.iter().copied().fold(f64::MIN, f64::max);
                g.iter().map(|v| v / max).collect()
            })
            .collect();
        let n = potentials.len() + 1;
        let uniform = vec![1.0 / size as f64; size];

        let mut forward = Vec::with_capacity(n);
        forward.push(uniform.clone());
        for g in &scaled {
            let prev = forward.last().unwrap();
            let mut next = vec![0.0; size];
            for (a, pa) in prev.iter().enumerate() {
                for (b, nb) in next.iter_mut().enumerate() {
                    *nb += pa * g[a * size + b];
                }
            }
            normalize_in_place(&mut next);
            forward.push(next);
        }

        let mut backward = vec![uniform; n];
        for i in (0..n - 1).rev() {
            let g = &scaled[i];
            let mut cur = vec![0.0; size];
            for (a, ca) in cur.iter_mut().enumerate() {
                *ca = (0..size).map(|b| g[a * size + b] * backward[i + 1][b]).sum();
            }
            normalize_in_place(&mut cur);
            backward[i] = cur;
        }

        Ok(Self::from_kind(n, alphabet, MeasureKind::Chain(ChainPayload { potentials, scaled, forward, backward })))
    }

    /// Planted-point measure on a grid of `grid_size` cells.
    pub fn planted(psi: f64, grid_size: usize, n: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&psi) {
            return Err(validation(format!("psi {psi} outside [0,1]")));
        }
        if grid_size < 2 {
            return Err(validation("grid size must be at least 2"));
        }
        if n == 0 {
            return Err(validation("n must be at least 1"));
        }
        let alphabet = Alphabet::new(grid_size)?;
        Ok(Self::from_kind(n, alphabet, MeasureKind::Planted(PlantedPayload { psi, grid_size })))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            MeasureKind::Product(_) => "product",
            MeasureKind::Table(_) => "table",
            MeasureKind::Chain(_) => "chain",
            MeasureKind::Planted(_) => "planted",
        }
    }

    pub fn as_chain(&self) -> Option<&ChainPayload> {
        match &self.kind {
            MeasureKind::Chain(c) => Some(c),
            _ => None,
        }
    }

    pub fn table_probs(&self) -> Option<&[f64]> {
        match &self.kind {
            MeasureKind::Table(t) => Some(&t.probs),
            _ => None,
        }
    }

    pub fn to_table(&self) -> Result<Measure> {
        self.to_table_with_cap(DEFAULT_TABLE_CAP)
    }

    /// Expands the measure into an explicit table with the same distribution.
    pub fn to_table_with_cap(&self, cap: usize) -> Result<Measure> {
        let size = self.alphabet.size();
        let n = self.n;
        if let MeasureKind::Table(t) = &self.kind {
            check_cap(size, n, cap, "")?;
            return Ok(Self::table_unchecked(self.alphabet, n, t.probs.clone()));
        }
        let entries = check_cap(size, n, cap, "")?;
        let mut probs = vec![0.0; entries];
        let mut tuple = vec![0 as Symbol; n];
        match &self.kind {
            MeasureKind::Table(_) => unreachable!(),
            MeasureKind::Product(p) => {
                for (idx, slot) in probs.iter_mut().enumerate() {
                    decode_tuple(idx, size, n, &mut tuple);
                    *slot = tuple.iter().enumerate().map(|(i, &x)| p.marginals[i][x as usize]).product();
                }
            }
            MeasureKind::Chain(c) => {
                for (idx, slot) in probs.iter_mut().enumerate() {
                    decode_tuple(idx, size, n, &mut tuple);
                    *slot = tuple
                        .windows(2)
                        .zip(&c.scaled)
                        .map(|(w, g)| g[w[0] as usize * size + w[1] as usize])
                        .product();
                }
            }
            MeasureKind::Planted(p) => {
                let base = (1.0 - p.psi) / p.grid_size as f64;
                let hit = base + p.psi;
                let mut counts = vec![0usize; size];
                for (idx, slot) in probs.iter_mut().enumerate() {
                    decode_tuple(idx, size, n, &mut tuple);
                    counts.iter_mut().for_each(|c| *c = 0);
                    for &x in &tuple {
                        counts[x as usize] += 1;
                    }
                    // mu(x) = (1/m) * sum_c prod_i (psi 1{x_i = c} + (1 - psi)/m)
                    let mut total = 0.0;
                    for &cnt in &counts {
                        total += hit.powi(cnt as i32) * base.powi((n - cnt) as i32);
                    }
                    *slot = total / p.grid_size as f64;
                }
            }
        }
        let total = stable_sum(probs.iter().copied());
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(Self::table_unchecked(self.alphabet, n, probs))
    }

    /// Draws one tuple.
    pub fn sample(&self, rng: &mut Rng) -> Vec<Symbol> {
        let mut out = vec![0 as Symbol; self.n];
        self.sample_into(rng, &mut out);
        out
    }

    pub fn sample_into(&self, rng: &mut Rng, out: &mut [Symbol]) {
        let size = self.alphabet.size();
        let n = self.n;
        match &self.kind {
            MeasureKind::Product(p) => {
                for (slot, cum) in out.iter_mut().zip(&p.cumulative) {
                    *slot = draw_cumulative(cum, rng) as Symbol;
                }
            }
            MeasureKind::Table(t) => {
                let cum = t.cumulative.get_or_init(|| cumulative(&t.probs));
                let idx = draw_cumulative(cum, rng);
                decode_tuple(idx, size, n, out);
            }
            MeasureKind::Chain(c) => {
                out[0] = draw_weighted(&c.backward[0], rng) as Symbol;
                let mut weights = vec![0.0; size];
                for i in 0..n - 1 {
                    let a = out[i] as usize;
                    let g = &c.scaled[i];
                    for (b, w) in weights.iter_mut().enumerate() {
                        *w = g[a * size + b] * c.backward[i + 1][b];
                    }
                    out[i + 1] = draw_weighted(&weights, rng) as Symbol;
                }
            }
            MeasureKind::Planted(p) => {
                planted_draw(p, rng, out);
            }
        }
    }

    /// Planted-measure draw that also reports the latent cell and how many
    /// coordinates were planted. Consumes the stream exactly like
    /// [`Measure::sample`]. `None` for other kinds.
    pub fn sample_planted(&self, rng: &mut Rng) -> Option<PlantedDraw> {
        let MeasureKind::Planted(p) = &self.kind else { return None };
        let mut tuple = vec![0; self.n];
        let (star, planted) = planted_draw(p, rng, &mut tuple);
        Some(PlantedDraw { tuple, star, planted })
    }

    fn check_coordinate(&self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange { index: i, len: self.n });
        }
        Ok(())
    }

    /// Exact marginal distribution of coordinate `i`.
    pub fn marginal(&self, i: usize) -> Result<Vec<f64>> {
        self.check_coordinate(i)?;
        let size = self.alphabet.size();
        Ok(match &self.kind {
            MeasureKind::Product(p) => p.marginals[i].clone(),
            MeasureKind::Table(t) => {
                let stride = size.pow((self.n - 1 - i) as u32);
                let mut out = vec![0.0; size];
                for (idx, p) in t.probs.iter().enumerate() {
                    out[(idx / stride) % size] += p;
                }
                out
            }
            MeasureKind::Chain(c) => {
                let mut out: Vec<f64> = c.forward[i].iter().zip(&c.backward[i]).map(|(f, b)| f * b).collect();
                normalize_in_place(&mut out);
                out
            }
            MeasureKind::Planted(p) => vec![1.0 / p.grid_size as f64; size],
        })
    }

    pub fn marginals(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.n).map(|i| self.marginal(i)).collect()
    }

    /// `(1/n) sum_i mu_i`, cached.
    pub fn mean_marginal(&self) -> &[f64] {
        self.mean_marginal.get_or_init(|| {
            let size = self.alphabet.size();
            if let MeasureKind::Planted(p) = &self.kind {
                return vec![1.0 / p.grid_size as f64; size];
            }
            let mut acc = vec![0.0; size];
            for i in 0..self.n {
                let m = self.marginal(i).expect("coordinate in range");
                acc.iter_mut().zip(m).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= self.n as f64);
            acc
        })
    }

    /// Law of coordinate `i` given the other `n-1` coordinates, passed in order
    /// with coordinate `i` removed.
    pub fn conditional_marginal(&self, i: usize, rest: &[Symbol]) -> Result<Vec<f64>> {
        self.check_coordinate(i)?;
        if rest.len() != self.n - 1 {
            return Err(validation(format!("expected {} conditioning symbols, got {}", self.n - 1, rest.len())));
        }
        let mut full = Vec::with_capacity(self.n);
        full.extend_from_slice(&rest[..i]);
        full.push(0);
        full.extend_from_slice(&rest[i..]);
        self.conditional_given(i, &full)
    }

    /// Same as [`Measure::conditional_marginal`] but takes the full tuple and
    /// ignores its `i`-th entry.
    pub fn conditional_given(&self, i: usize, tuple: &[Symbol]) -> Result<Vec<f64>> {
        self.check_coordinate(i)?;
        let size = self.alphabet.size();
        if tuple.len() != self.n {
            return Err(validation(format!("expected a {}-tuple, got length {}", self.n, tuple.len())));
        }
        if let Some(x) = tuple.iter().enumerate().find(|(j, x)| *j != i && **x as usize >= size) {
            return Err(validation(format!("symbol {} outside alphabet of size {size}", x.1)));
        }
        let zero_mass = || Error::Domain(format!("conditioning event for coordinate {i} has zero probability"));
        match &self.kind {
            MeasureKind::Product(p) => Ok(p.marginals[i].clone()),
            MeasureKind::Table(t) => {
                let stride = size.pow((self.n - 1 - i) as u32);
                let mut base_tuple = tuple.to_vec();
                base_tuple[i] = 0;
                let base = encode_tuple(&base_tuple, size);
                let mut out: Vec<f64> = (0..size).map(|a| t.probs[base + a * stride]).collect();
                let total: f64 = out.iter().sum();
                if total <= 0.0 {
                    return Err(zero_mass());
                }
                out.iter_mut().for_each(|v| *v /= total);
                Ok(out)
            }
            MeasureKind::Chain(c) => {
                let mut out = vec![1.0; size];
                if i > 0 {
                    let g = &c.scaled[i - 1];
                    let left = tuple[i - 1] as usize;
                    out.iter_mut().enumerate().for_each(|(a, v)| *v *= g[left * size + a]);
                }
                if i + 1 < self.n {
                    let g = &c.scaled[i];
                    let right = tuple[i + 1] as usize;
                    out.iter_mut().enumerate().for_each(|(a, v)| *v *= g[a * size + right]);
                }
                normalize_in_place(&mut out);
                Ok(out)
            }
            MeasureKind::Planted(p) => planted_conditional(p, i, tuple).ok_or_else(zero_mass),
        }
    }

    /// Marginal of the chain on coordinates `{0, t, 2t, .., n-t}`.
    ///
    /// The result is a chain whose potentials are products of `t` consecutive
    /// transfer matrices, with the summed-out tail after coordinate `n-t`
    /// folded into the columns of the last potential. When the original table
    /// is within the default cap the representation is checked against direct
    /// marginalization and replaced by an explicit table if they differ by more
    /// than [`SKIP_CHECK_TOL`].
    pub fn skip(&self, t: usize) -> Result<Measure> {
        let c = self.as_chain().ok_or_else(|| Error::Unsupported(format!("skip is defined for chains, got {}", self.kind_name())))?;
        if t == 0 {
            return Err(validation("skip step t must be at least 1"));
        }
        if !self.n.is_multiple_of(t) {
            return Err(validation(format!("skip step {t} does not divide n = {}", self.n)));
        }
        let kept = self.n / t;
        if kept < 2 {
            return Err(validation(format!("skip step {t} leaves fewer than 2 coordinates")));
        }
        if t == 1 {
            return Ok(self.clone());
        }
        let size = self.alphabet.size();
        let mut blocks = Vec::with_capacity(kept - 1);
        for j in 0..kept - 1 {
            let mut acc = c.scaled[j * t].clone();
            for g in &c.scaled[j * t + 1..(j + 1) * t] {
                acc = rescale(matmul(&acc, g, size));
            }
            blocks.push(acc);
        }
        // Tail weight v(b) = sum over x_{n-t+1}..x_{n-1} of the trailing potentials.
        let mut tail = vec![1.0; size];
        for g in c.scaled[self.n - t..].iter().rev() {
            let mut next = vec![0.0; size];
            for (a, na) in next.iter_mut().enumerate() {
                *na = (0..size).map(|b| g[a * size + b] * tail[b]).sum();
            }
            let max = next.iter().copied().fold(f64::MIN, f64::max);
            next.iter_mut().for_each(|v| *v /= max);
            tail = next;
        }
        let last = blocks.last_mut().unwrap();
        for a in 0..size {
            for b in 0..size {
                last[a * size + b] *= tail[b];
            }
        }
        let blocks = blocks.into_iter().map(rescale).collect();
        let skipped = Measure::chain(size, blocks)?;

        if table_entries(size, self.n).is_some_and(|e| e <= DEFAULT_TABLE_CAP as u128) {
            let oracle = marginalize_table(&self.to_table()?, &(0..kept).map(|j| j * t).collect::<Vec<_>>())?;
            let candidate = skipped.to_table()?;
            let max_diff = oracle
                .table_probs()
                .unwrap()
                .iter()
                .zip(candidate.table_probs().unwrap())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if max_diff > SKIP_CHECK_TOL {
                log::warn!("chain form of skipped measure deviates by {max_diff:e}; using table");
                return Ok(oracle);
            }
        }
        Ok(skipped)
    }

    /// `q(mu) = (1/n) sum_i E_{x ~ mu_i} q(x)`.
    pub fn query_mean(&self, q: &StatisticalQuery) -> f64 {
        match &self.kind {
            MeasureKind::Planted(p) => q.uniform_mean(p.grid_size),
            _ => q.expect(self.mean_marginal()),
        }
    }

    /// Exact expectation of a tuple-level query.
    pub fn tuple_query_mean(&self, q: &Query) -> Result<f64> {
        match q {
            Query::Statistical(sq) => Ok(self.query_mean(sq)),
            Query::AdjacentPair { alphabet, values } => {
                if self.n < 2 {
                    return Ok(0.0);
                }
                let size = self.alphabet.size();
                if *alphabet != size {
                    return Err(validation(format!("pair query alphabet {alphabet} does not match measure alphabet {size}")));
                }
                let mut total = 0.0;
                for i in 0..self.n - 1 {
                    let joint = self.pair_marginal(i)?;
                    total += joint.iter().zip(values).map(|(p, v)| p * v).sum::<f64>();
                }
                Ok(total / (self.n - 1) as f64)
            }
        }
    }

    /// Joint law of coordinates `(i, i+1)`, row-major.
    pub fn pair_marginal(&self, i: usize) -> Result<Vec<f64>> {
        if i + 1 >= self.n {
            return Err(Error::IndexOutOfRange { index: i + 1, len: self.n });
        }
        let size = self.alphabet.size();
        let mut out = vec![0.0; size * size];
        match &self.kind {
            MeasureKind::Product(p) => {
                for a in 0..size {
                    for b in 0..size {
                        out[a * size + b] = p.marginals[i][a] * p.marginals[i + 1][b];
                    }
                }
            }
            MeasureKind::Table(t) => {
                let stride = size.pow((self.n - 2 - i) as u32);
                for (idx, p) in t.probs.iter().enumerate() {
                    out[(idx / stride) % (size * size)] += p;
                }
            }
            MeasureKind::Chain(c) => {
                let g = &c.scaled[i];
                for a in 0..size {
                    for b in 0..size {
                        out[a * size + b] = c.forward[i][a] * g[a * size + b] * c.backward[i + 1][b];
                    }
                }
                normalize_in_place(&mut out);
            }
            MeasureKind::Planted(p) => {
                let m = p.grid_size as f64;
                let off = (1.0 - p.psi * p.psi) / (m * m);
                out.iter_mut().for_each(|v| *v = off);
                for a in 0..size {
                    out[a * size + a] += p.psi * p.psi / m;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedDraw {
    pub tuple: Vec<Symbol>,
    pub star: Symbol,
    /// Coordinates set to `star` by the planting step (accidental hits excluded).
    pub planted: usize,
}

fn planted_draw(p: &PlantedPayload, rng: &mut Rng, out: &mut [Symbol]) -> (Symbol, usize) {
    let m = p.grid_size as Symbol;
    let star = rng.random_range(0..m);
    let mut planted = 0;
    for slot in out.iter_mut() {
        *slot = if rng.random::<f64>() < p.psi {
            planted += 1;
            star
        } else {
            rng.random_range(0..m)
        };
    }
    (star, planted)
}

/// Posterior over the latent cell given `x^{-i}`, pushed through the planting
/// step. `None` when the conditioning event is null (psi = 1 with disagreeing
/// coordinates).
fn planted_conditional(p: &PlantedPayload, i: usize, tuple: &[Symbol]) -> Option<Vec<f64>> {
    let m = p.grid_size;
    let base = (1.0 - p.psi) / m as f64;
    let hit = base + p.psi;
    let others = tuple.len() - 1;
    let mut counts: std::collections::BTreeMap<Symbol, usize> = std::collections::BTreeMap::new();
    for (j, &x) in tuple.iter().enumerate() {
        if j != i {
            *counts.entry(x).or_default() += 1;
        }
    }
    let mut out = vec![base; m];
    if others == 0 {
        return Some(vec![1.0 / m as f64; m]);
    }
    // log weight of latent cell c: cnt_c ln(hit) + (others - cnt_c) ln(base)
    let log_w = |cnt: usize| -> f64 {
        let lh = if cnt > 0 { cnt as f64 * hit.ln() } else { 0.0 };
        let lb = if others - cnt > 0 { (others - cnt) as f64 * base.ln() } else { 0.0 };
        lh + lb
    };
    let unseen = m - counts.len();
    let mut logs: Vec<(Option<Symbol>, f64, f64)> = counts.iter().map(|(s, c)| (Some(*s), log_w(*c), 1.0)).collect();
    if unseen > 0 {
        logs.push((None, log_w(0), unseen as f64));
    }
    let max = logs.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let z: f64 = logs.iter().map(|(_, l, mult)| mult * (l - max).exp()).sum();
    let unseen_post = logs.iter().find(|l| l.0.is_none()).map_or(0.0, |l| (l.1 - max).exp() / z);
    for (c, v) in out.iter_mut().enumerate() {
        if !counts.contains_key(&(c as Symbol)) {
            *v += p.psi * unseen_post;
        }
    }
    for (s, l, _) in &logs {
        if let Some(s) = s {
            out[*s as usize] += p.psi * (l - max).exp() / z;
        }
    }
    Some(out)
}

fn matmul(a: &[f64], b: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for i in 0..size {
        for k in 0..size {
            let aik = a[i * size + k];
            for j in 0..size {
                out[i * size + j] += aik * b[k * size + j];
            }
        }
    }
    out
}

fn rescale(mut g: Vec<f64>) -> Vec<f64> {
    let max = g.iter().copied().fold(f64::MIN, f64::max);
    g.iter_mut().for_each(|v| *v /= max);
    g
}

/// Sums a table measure onto the given increasing coordinate list.
pub fn marginalize_table(table: &Measure, coords: &[usize]) -> Result<Measure> {
    let probs = table
        .table_probs()
        .ok_or_else(|| Error::Unsupported("marginalize_table needs a table measure".into()))?;
    if coords.is_empty() || coords.windows(2).any(|w| w[0] >= w[1]) || *coords.last().unwrap() >= table.n {
        return Err(validation("coordinates must be non-empty, increasing and in range"));
    }
    let size = table.alphabet.size();
    let n = table.n;
    let mut out = vec![0.0; size.pow(coords.len() as u32)];
    let mut tuple = vec![0 as Symbol; n];
    let mut sub = vec![0 as Symbol; coords.len()];
    for (idx, p) in probs.iter().enumerate() {
        decode_tuple(idx, size, n, &mut tuple);
        for (s, &c) in sub.iter_mut().zip(coords) {
            *s = tuple[c];
        }
        out[encode_tuple(&sub, size)] += p;
    }
    Ok(Measure::table_unchecked(table.alphabet, coords.len(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn example_chain3() -> Measure {
        Measure::chain(2, vec![vec![2.0, 1.0, 1.0, 2.0], vec![3.0, 1.0, 1.0, 3.0]]).unwrap()
    }

    /// Brute-force table of an explicit chain, independent of the transfer-matrix path.
    fn brute_chain_table(size: usize, pots: &[Vec<f64>]) -> Vec<f64> {
        let n = pots.len() + 1;
        let entries = size.pow(n as u32);
        let mut t = vec![0.0; entries];
        let mut x = vec![0; n];
        for (idx, slot) in t.iter_mut().enumerate() {
            decode_tuple(idx, size, n, &mut x);
            *slot = (0..n - 1).map(|i| pots[i][x[i] as usize * size + x[i + 1] as usize]).product();
        }
        let z: f64 = t.iter().sum();
        t.iter_mut().for_each(|v| *v /= z);
        t
    }

    #[test]
    fn product_two_uniform_bits() {
        let m = Measure::product(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(m.to_table().unwrap().table_probs().unwrap(), &[0.25; 4]);
    }

    #[test]
    fn product_point_mass_and_entry_product() {
        let m = Measure::product(vec![vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.to_table().unwrap().table_probs().unwrap(), &[1.0, 0.0]);
        let m = Measure::product(vec![vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        assert!(close(m.to_table().unwrap().table_probs().unwrap()[0], 0.15, 1e-15));
    }

    #[test]
    fn product_rejects_unnormalized_marginal() {
        assert!(matches!(Measure::product(vec![vec![0.5, 0.6]]), Err(Error::Validation(_))));
    }

    #[test]
    fn chain_constant_potentials_is_uniform() {
        let m = Measure::chain(2, vec![vec![1.0; 4]; 2]).unwrap();
        for p in m.to_table().unwrap().table_probs().unwrap() {
            assert!(close(*p, 1.0 / 8.0, 1e-15));
        }
        assert!(m.marginal(1).unwrap().iter().all(|p| close(*p, 0.5, 1e-15)));
    }

    #[test]
    fn chain_two_coordinates() {
        let m = Measure::chain(2, vec![vec![2.0, 1.0, 1.0, 2.0]]).unwrap();
        let t = m.to_table().unwrap();
        let expect = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0];
        for (a, b) in t.table_probs().unwrap().iter().zip(expect) {
            assert!(close(*a, b, 1e-15));
        }
    }

    #[test]
    fn chain_three_coordinates_matches_brute_force() {
        let pots = vec![vec![2.0, 1.0, 1.0, 2.0], vec![3.0, 1.0, 1.0, 3.0]];
        let oracle = brute_chain_table(2, &pots);
        // Z = sum_b (sum_a g1(a,b)) (sum_c g2(b,c)) = 2 * 3 * 4 = 24
        assert!(close(oracle[0], 6.0 / 24.0, 1e-15));
        let m = Measure::chain(2, pots).unwrap();
        let t = m.to_table().unwrap();
        for (a, b) in t.table_probs().unwrap().iter().zip(&oracle) {
            assert!(close(*a, *b, 1e-15));
        }
    }

    #[test]
    fn chain_rejects_non_positive_potentials() {
        assert!(Measure::chain(2, vec![vec![1.0, 0.0, 1.0, 1.0]]).is_err());
        assert!(Measure::chain(2, vec![vec![1.0, -1.0, 1.0, 1.0]]).is_err());
        assert!(Measure::chain(2, vec![vec![1.0, 1.0, 1.0]]).is_err());
    }

    #[test]
    fn planted_limits() {
        let m = Measure::planted(0.0, 3, 2).unwrap();
        for p in m.to_table().unwrap().table_probs().unwrap() {
            assert!(close(*p, 1.0 / 9.0, 1e-15));
        }
        let m = Measure::planted(1.0, 5, 4).unwrap();
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            let s = m.sample(&mut rng);
            assert!(s.iter().all(|x| *x == s[0]));
        }
    }

    #[test]
    fn planted_table_matches_analytic_cells() {
        // psi = 0.5, m = 2, n = 2: P(x1 = x2) = psi^2 + (1 - psi^2)/m = 0.625,
        // split evenly across the two diagonal cells by symmetry.
        let m = Measure::planted(0.5, 2, 2).unwrap();
        let t = m.to_table().unwrap();
        let p = t.table_probs().unwrap();
        assert!(close(p[0], 0.3125, 1e-15));
        assert!(close(p[1], 0.1875, 1e-15));
        assert!(close(p[2], 0.1875, 1e-15));
        assert!(close(p[3], 0.3125, 1e-15));
    }

    #[test]
    fn planted_collision_probability() {
        // P(x1 = x2) = psi^2 + (1 - psi^2)/m for psi = 0.5, m = 4.
        let expect = 0.25 + 0.75 / 4.0;
        let m = Measure::planted(0.5, 4, 2).unwrap();
        let t = m.to_table().unwrap();
        let p = t.table_probs().unwrap();
        let diag: f64 = (0..4).map(|a| p[a * 4 + a]).sum();
        assert!(close(diag, expect, 1e-14));
        let mut rng = rng_from_seed(99);
        let trials = 1_000_000;
        let hits = (0..trials).filter(|_| {
            let s = m.sample(&mut rng);
            s[0] == s[1]
        }).count();
        let freq = hits as f64 / trials as f64;
        let sd = (expect * (1.0 - expect) / trials as f64).sqrt();
        assert!((freq - expect).abs() < 5.0 * sd, "freq {freq}");
    }

    #[test]
    fn table_cap_is_enforced() {
        let m = Measure::uniform_product(10, 8).unwrap();
        assert!(matches!(m.to_table_with_cap(1000), Err(Error::TableTooLarge { .. })));
        let p = Measure::planted(0.2, 1_000_000, 3).unwrap();
        assert!(matches!(p.to_table(), Err(Error::TableTooLarge { .. })));
    }

    #[test]
    fn marginals_match_table_oracle() {
        let pots = vec![vec![2.0, 1.0, 0.5, 1.0, 3.0, 1.0, 1.0, 1.0, 2.0]; 3];
        let m = Measure::chain(3, pots).unwrap();
        let t = m.to_table().unwrap();
        for i in 0..4 {
            let a = m.marginal(i).unwrap();
            let b = t.marginal(i).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!(close(*x, *y, 1e-12));
            }
        }
        let m3 = example_chain3();
        let mid = m3.marginal(1).unwrap();
        let mid_oracle = marginalize_table(&m3.to_table().unwrap(), &[1]).unwrap();
        for (x, y) in mid.iter().zip(mid_oracle.table_probs().unwrap()) {
            assert!(close(*x, *y, 1e-12));
        }
        assert!(matches!(m.marginal(4), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn conditional_cases() {
        let prod = Measure::product(vec![vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        assert_eq!(prod.conditional_marginal(0, &[1]).unwrap(), vec![0.3, 0.7]);

        let corr = Measure::table(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert_eq!(corr.conditional_marginal(0, &[1]).unwrap(), vec![0.0, 1.0]);

        let half = Measure::table(2, 2, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(half.conditional_marginal(1, &[1]), Err(Error::Domain(_))));
    }

    #[test]
    fn chain_conditional_matches_table_on_every_tuple() {
        let pots = vec![
            vec![2.0, 1.0, 1.0, 2.0],
            vec![1.0, 3.0, 2.0, 1.0],
            vec![1.5, 1.0, 1.0, 2.5],
        ];
        let m = Measure::chain(2, pots).unwrap();
        let t = m.to_table().unwrap();
        let mut x = vec![0; 4];
        for idx in 0..16 {
            decode_tuple(idx, 2, 4, &mut x);
            for i in 0..4 {
                let a = m.conditional_given(i, &x).unwrap();
                let b = t.conditional_given(i, &x).unwrap();
                assert!(a.iter().zip(&b).all(|(p, q)| close(*p, *q, 1e-12)));
            }
        }
        // coordinate 1 given the rest is g_0(x_0, .) g_1(., x_2), normalized
        let x = [1, 0, 0, 1];
        let c = m.conditional_given(1, &x).unwrap();
        let raw = [1.0 * 1.0, 2.0 * 2.0];
        assert!(close(c[0], raw[0] / 5.0, 1e-15) && close(c[1], raw[1] / 5.0, 1e-15));
    }

    #[test]
    fn planted_conditional_matches_table() {
        let m = Measure::planted(0.4, 3, 3).unwrap();
        let t = m.to_table().unwrap();
        let mut x = vec![0; 3];
        for idx in 0..27 {
            decode_tuple(idx, 3, 3, &mut x);
            for i in 0..3 {
                let a = m.conditional_given(i, &x).unwrap();
                let b = t.conditional_given(i, &x).unwrap();
                assert!(a.iter().zip(&b).all(|(p, q)| close(*p, *q, 1e-12)), "{x:?} {i} {a:?} {b:?}");
            }
        }
        let full = Measure::planted(1.0, 3, 3).unwrap();
        assert!(matches!(full.conditional_given(0, &[0, 1, 2]), Err(Error::Domain(_))));
        assert_eq!(full.conditional_given(0, &[0, 2, 2]).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn skip_cases() {
        let m = Measure::chain(2, vec![vec![2.0, 1.0, 1.0, 2.0]; 3]).unwrap();
        let same = m.skip(1).unwrap();
        assert_eq!(same.n(), 4);
        let s = m.skip(2).unwrap();
        assert_eq!(s.kind_name(), "chain");
        let oracle = marginalize_table(&m.to_table().unwrap(), &[0, 2]).unwrap();
        for (a, b) in s.to_table().unwrap().table_probs().unwrap().iter().zip(oracle.table_probs().unwrap()) {
            assert!(close(*a, *b, 1e-12));
        }
        let uni = Measure::chain(2, vec![vec![1.0; 4]; 5]).unwrap().skip(3).unwrap();
        assert!(uni.to_table().unwrap().table_probs().unwrap().iter().all(|p| close(*p, 0.25, 1e-15)));
        assert!(matches!(m.skip(3), Err(Error::Validation(_))));
        assert!(matches!(m.skip(4), Err(Error::Validation(_))));
        assert!(Measure::uniform_product(2, 4).unwrap().skip(2).is_err());
    }

    #[test]
    fn query_mean_cases() {
        let m = example_chain3();
        assert!(close(m.query_mean(&StatisticalQuery::constant(0.3)), 0.3, 1e-15));
        let bits = Measure::uniform_product(2, 3).unwrap();
        assert!(close(bits.query_mean(&StatisticalQuery::Singleton { symbol: 1 }), 0.5, 1e-15));

        let q = StatisticalQuery::Singleton { symbol: 0 };
        let t = m.to_table().unwrap();
        let probs = t.table_probs().unwrap();
        let mut x = vec![0; 3];
        let mut oracle = 0.0;
        for (idx, p) in probs.iter().enumerate() {
            decode_tuple(idx, 2, 3, &mut x);
            oracle += p * q.empirical(&x);
        }
        assert!(close(m.query_mean(&q), oracle, 1e-12));

        let planted = Measure::planted(0.3, 1_000_000, 50).unwrap();
        assert_eq!(planted.query_mean(&StatisticalQuery::Singleton { symbol: 17 }), 1e-6);
    }

    #[test]
    fn pair_query_mean_matches_table() {
        let pair = Query::AdjacentPair { alphabet: 2, values: vec![1.0, 0.0, 0.25, 0.5] };
        for m in [
            example_chain3(),
            Measure::product(vec![vec![0.3, 0.7], vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap(),
            Measure::planted(0.6, 2, 3).unwrap(),
        ] {
            let t = m.to_table().unwrap();
            let a = m.tuple_query_mean(&pair).unwrap();
            let b = t.tuple_query_mean(&pair).unwrap();
            assert!(close(a, b, 1e-12), "{} {a} {b}", m.kind_name());
        }
    }

    #[test]
    fn long_chain_inference_stays_finite() {
        let pots = vec![vec![1e6, 1e-3, 1e-3, 1e6]; 9_999];
        let m = Measure::chain(2, pots).unwrap();
        let mid = m.marginal(5_000).unwrap();
        assert!(mid.iter().all(|p| p.is_finite()));
        assert!(close(mid[0], 0.5, 1e-9));
        let mut rng = rng_from_seed(3);
        assert_eq!(m.sample(&mut rng).len(), 10_000);
    }

    #[test]
    fn json_round_trip_validates() {
        let m = example_chain3();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.starts_with(r#"{"kind":"chain","potentials":[[[2.0,1.0],[1.0,2.0]]"#), "{s}");
        let back: Measure = serde_json::from_str(&s).unwrap();
        assert_eq!(back.to_table().unwrap().table_probs(), m.to_table().unwrap().table_probs());
        let bad = r#"{"kind":"chain","potentials":[[[1.0,0.0],[1.0,1.0]]]}"#;
        assert!(serde_json::from_str::<Measure>(bad).is_err());
    }

    #[test]
    fn identical_seed_gives_identical_tuple() {
        let m = example_chain3();
        let a = m.sample(&mut rng_from_seed(5));
        let b = m.sample(&mut rng_from_seed(5));
        assert_eq!(a, b);
        let point = Measure::product(vec![vec![0.0, 1.0]; 4]).unwrap();
        assert_eq!(point.sample(&mut rng_from_seed(8)), vec![1, 1, 1, 1]);
    }
}
