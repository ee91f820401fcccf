//! Total variation, Gibbs dependence and the chain bound.
//!
//! The Gibbs-dependence coefficient of a measure `mu` over `n`-tuples is
//!
//! ```text
//! psi(mu) = sup_x (1/n) sum_i TV(mu_i, mu_i(. | x^{-i}))
//! ```
//!
//! It is computed here by brute force over the explicit table, taking the
//! supremum over tuples of positive mass only. It is zero exactly for product
//! measures. For an undirected chain, `psi(mu) <= (R^2 - r^2)/(R^2 + r^2)` with
//! `R`, `r` the largest and smallest potential entries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::measures::{decode_tuple, Measure, DEFAULT_TABLE_CAP};
use crate::Symbol;

/// Half the l1 distance between two distributions on the same support.
pub fn tv(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(validation(format!("support sizes differ: {} vs {}", p.len(), q.len())));
    }
    Ok(tv_unchecked(p, q))
}

#[inline]
fn tv_unchecked(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Result of the brute-force supremum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiReport {
    pub psi: f64,
    /// Lexicographically smallest tuple attaining the supremum.
    pub argmax_tuple: Vec<Symbol>,
    pub per_coordinate_tv: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainBoundReport {
    #[serde(rename = "R")]
    pub r_max: f64,
    #[serde(rename = "r")]
    pub r_min: f64,
    #[serde(rename = "R_bar")]
    pub r_bar: f64,
}

/// Called with `(tuples_done, tuples_total)` as enumeration proceeds.
pub type Progress<'a> = &'a (dyn Fn(u64, u64) + Sync);

#[derive(Clone, Copy)]
pub struct PsiOptions<'a> {
    pub cap: usize,
    pub progress: Option<Progress<'a>>,
}

impl Default for PsiOptions<'_> {
    fn default() -> Self {
        PsiOptions { cap: DEFAULT_TABLE_CAP, progress: None }
    }
}

impl std::fmt::Debug for PsiOptions<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PsiOptions")
            .field("cap", &self.cap)
            .field("progress", &self.progress.is_some())
            .finish()
    }
}

pub fn gibbs_dependence(measure: &Measure) -> Result<PsiReport> {
    gibbs_dependence_with(measure, PsiOptions::default())
}

const CHUNK: usize = 4096;

/// Exact `psi(mu)` by enumeration of all positive-mass tuples.
///
/// Cost is `O(|alphabet|^n * n * |alphabet|)`. Enumeration is split across
/// rayon workers; the reduction keeps the largest value and, on ties, the
/// lowest tuple index, so the report does not depend on the worker count.
pub fn gibbs_dependence_with(measure: &Measure, opts: PsiOptions<'_>) -> Result<PsiReport> {
    let table = measure.to_table_with_cap(opts.cap).map_err(|e| match e {
        Error::TableTooLarge { entries, cap, .. } => Error::TableTooLarge {
            entries,
            cap,
            hint: "; use markov_psi_bound for chains",
        },
        other => other,
    })?;
    let probs = table.table_probs().expect("table measure");
    let n = table.n();
    let size = table.alphabet().size();
    let marginals = table.marginals()?;
    let strides: Vec<usize> = (0..n).map(|i| size.pow((n - 1 - i) as u32)).collect();
    let total = probs.len();
    let done = std::sync::atomic::AtomicU64::new(0);

    let coordinate_tvs = |idx: usize, tuple: &mut [Symbol], cond: &mut [f64], out: &mut [f64]| {
        decode_tuple(idx, size, n, tuple);
        for i in 0..n {
            let base = idx - tuple[i] as usize * strides[i];
            let mut z = 0.0;
            for (a, c) in cond.iter_mut().enumerate() {
                *c = probs[base + a * strides[i]];
                z += *c;
            }
            cond.iter_mut().for_each(|c| *c /= z);
            out[i] = tv_unchecked(&marginals[i], cond);
        }
    };

    let best = (0..total.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut tuple = vec![0 as Symbol; n];
            let mut cond = vec![0.0; size];
            let mut tvs = vec![0.0; n];
            let mut best: Option<(f64, usize)> = None;
            let end = ((chunk + 1) * CHUNK).min(total);
            for (idx, &p) in probs.iter().enumerate().take(end).skip(chunk * CHUNK) {
                if p <= 0.0 {
                    continue;
                }
                coordinate_tvs(idx, &mut tuple, &mut cond, &mut tvs);
                let value = tvs.iter().sum::<f64>() / n as f64;
                if best.is_none_or(|(b, _)| value > b) {
                    best = Some((value, idx));
                }
            }
            if let Some(cb) = opts.progress {
                let d = done.fetch_add((end - chunk * CHUNK) as u64, std::sync::atomic::Ordering::Relaxed);
                cb(d + (end - chunk * CHUNK) as u64, total as u64);
            }
            best
        })
        .reduce(
            || None,
            |a, b| match (a, b) {
                (None, x) | (x, None) => x,
                (Some(x), Some(y)) => {
                    if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) {
                        Some(y)
                    } else {
                        Some(x)
                    }
                }
            },
        );

    let (_, idx) = best.ok_or_else(|| Error::Domain("measure has no positive-mass tuple".into()))?;
    let mut tuple = vec![0 as Symbol; n];
    let mut cond = vec![0.0; size];
    let mut tvs = vec![0.0; n];
    coordinate_tvs(idx, &mut tuple, &mut cond, &mut tvs);
    let psi = tvs.iter().sum::<f64>() / n as f64;
    Ok(PsiReport { psi, argmax_tuple: tuple, per_coordinate_tv: tvs })
}

/// `R`, `r` and `R̄ = (R^2 - r^2)/(R^2 + r^2)` over all potential entries.
pub fn markov_psi_bound(measure: &Measure) -> Result<ChainBoundReport> {
    let chain = measure
        .as_chain()
        .ok_or_else(|| Error::Unsupported(format!("chain bound needs a chain measure, got {}", measure.kind_name())))?;
    let entries = chain.potentials().iter().flatten().copied();
    let (r_min, r_max) = entries.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let r_bar = (r_max * r_max - r_min * r_min) / (r_max * r_max + r_min * r_min);
    Ok(ChainBoundReport { r_max, r_min, r_bar })
}

/// True iff every table cell is within `tol` of the product of its marginals.
pub fn is_product(measure: &Measure, tol: f64) -> Result<bool> {
    let table = measure.to_table()?;
    let probs = table.table_probs().expect("table measure");
    let n = table.n();
    let size = table.alphabet().size();
    let marginals = table.marginals()?;
    let mut tuple = vec![0 as Symbol; n];
    Ok(probs.iter().enumerate().all(|(idx, p)| {
        decode_tuple(idx, size, n, &mut tuple);
        let prod: f64 = tuple.iter().enumerate().map(|(i, &x)| marginals[i][x as usize]).product();
        (p - prod).abs() <= tol
    }))
}
