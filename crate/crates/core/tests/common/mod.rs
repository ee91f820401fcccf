#![allow(dead_code)]

use adagibbs_core::seeding::Rng;
use adagibbs_core::Measure;
use rand::Rng as _;

/// Chain with potentials drawn uniformly from `[lo, hi]`.
pub fn random_chain(rng: &mut Rng, n: usize, size: usize, lo: f64, hi: f64) -> Measure {
    let potentials = (0..n - 1).map(|_| (0..size * size).map(|_| rng.random_range(lo..=hi)).collect()).collect();
    Measure::chain(size, potentials).unwrap()
}

pub fn random_dist(rng: &mut Rng, size: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..size).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

pub fn random_product(rng: &mut Rng, n: usize, size: usize) -> Measure {
    Measure::product((0..n).map(|_| random_dist(rng, size)).collect()).unwrap()
}

pub fn random_table(rng: &mut Rng, n: usize, size: usize) -> Measure {
    let probs = random_dist(rng, size.pow(n as u32));
    Measure::table(size, n, probs).unwrap()
}
