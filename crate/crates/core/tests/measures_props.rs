mod common;

use adagibbs_core::measures::{decode_tuple, marginalize_table, table_entries};
use adagibbs_core::seeding::rng_from_seed;
use adagibbs_core::{Measure, Symbol};
use common::{random_chain, random_product, random_table};
use proptest::prelude::*;

fn table_of(m: &Measure) -> Vec<f64> {
    m.to_table().unwrap().table_probs().unwrap().to_vec()
}

fn assert_frequencies_match(m: &Measure, draws: usize, seed: u64) {
    let size = m.alphabet().size();
    let n = m.n();
    let probs = table_of(m);
    let mut counts = vec![0u64; probs.len()];
    let mut rng = rng_from_seed(seed);
    let mut buf = vec![0 as Symbol; n];
    for _ in 0..draws {
        m.sample_into(&mut rng, &mut buf);
        let idx = buf.iter().fold(0usize, |acc, &x| acc * size + x as usize);
        counts[idx] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let expected = p * draws as f64;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt().max(1e-9);
        assert!((*c as f64 - expected).abs() <= 5.0 * sd, "{} {c} vs {expected} (sd {sd})", m.kind_name());
    }
}

#[test]
fn sampling_matches_table_oracle() {
    let mut rng = rng_from_seed(100);
    let chain = Measure::chain(2, vec![vec![2.0, 1.0, 1.0, 2.0], vec![3.0, 1.0, 1.0, 3.0]]).unwrap();
    assert_frequencies_match(&chain, 1_000_000, 1);
    assert_frequencies_match(&random_chain(&mut rng, 4, 3, 1.0, 3.0), 1_000_000, 2);
    assert_frequencies_match(&random_product(&mut rng, 3, 4), 1_000_000, 3);
    assert_frequencies_match(&random_table(&mut rng, 4, 2), 1_000_000, 4);
    assert_frequencies_match(&Measure::planted(0.5, 4, 3).unwrap(), 1_000_000, 5);
}

#[test]
fn uniform_symbol_frequencies() {
    let m = Measure::uniform_product(5, 1).unwrap();
    let mut rng = rng_from_seed(6);
    let draws = 1_000_000;
    let mut counts = [0u64; 5];
    for _ in 0..draws {
        counts[m.sample(&mut rng)[0] as usize] += 1;
    }
    let sd = (draws as f64 * 0.2 * 0.8).sqrt();
    assert!(counts.iter().all(|&c| (c as f64 - 0.2 * draws as f64).abs() <= 5.0 * sd));
}

#[test]
fn chain_markov_property() {
    let mut rng = rng_from_seed(7);
    for _ in 0..20 {
        let m = random_chain(&mut rng, 5, 3, 0.5, 4.0);
        let mut x = vec![0; 5];
        for idx in 0..243 {
            decode_tuple(idx, 3, 5, &mut x);
            let base = m.conditional_given(2, &x).unwrap();
            let mut y = x.clone();
            y[0] = (y[0] + 1) % 3;
            y[4] = (y[4] + 2) % 3;
            assert_eq!(m.conditional_given(2, &y).unwrap(), base);
            let t = m.to_table().unwrap().conditional_given(2, &y).unwrap();
            assert!(base.iter().zip(&t).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
}

#[test]
fn potential_scale_invariance() {
    let mut rng = rng_from_seed(8);
    let m = random_chain(&mut rng, 4, 2, 1.0, 3.0);
    let pots: Vec<Vec<f64>> = m.as_chain().unwrap().potentials().to_vec();
    let scaled: Vec<Vec<f64>> =
        pots.iter().enumerate().map(|(i, g)| g.iter().map(|v| v * (i as f64 + 1.0) * 7.5).collect()).collect();
    let s = Measure::chain(2, scaled).unwrap();
    let (a, b) = (table_of(&m), table_of(&s));
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
    for i in 0..4 {
        let (p, q) = (m.marginal(i).unwrap(), s.marginal(i).unwrap());
        assert!(p.iter().zip(&q).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn long_chain_sampling_is_finite() {
    let mut rng = rng_from_seed(9);
    let m = random_chain(&mut rng, 10_000, 3, 0.1, 10.0);
    let s = m.sample(&mut rng);
    assert_eq!(s.len(), 10_000);
    let marg = m.marginal(9_999).unwrap();
    assert!((marg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn chain_strategy() -> impl Strategy<Value = Measure> {
    (2usize..=6, 2usize..=3, any::<u64>()).prop_filter_map("within table scale", |(n, size, seed)| {
        let m = random_chain(&mut rng_from_seed(seed), n, size, 1.0, 3.0);
        (table_entries(size, n).unwrap() <= 729).then_some(m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constructed_measures_are_normalized(seed in any::<u64>(), n in 1usize..=5, size in 1usize..=3) {
        let mut rng = rng_from_seed(seed);
        for m in [random_product(&mut rng, n, size), random_table(&mut rng, n, size)] {
            prop_assert!((table_of(&m).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        if n >= 2 {
            prop_assert!((table_of(&random_chain(&mut rng, n, size, 0.1, 5.0)).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn marginals_match_table_marginalization(m in chain_strategy()) {
        let t = m.to_table().unwrap();
        for i in 0..m.n() {
            let direct = marginalize_table(&t, &[i]).unwrap();
            let oracle = direct.table_probs().unwrap();
            let fast = m.marginal(i).unwrap();
            prop_assert!(fast.iter().zip(oracle).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn skip_matches_marginalization(m in chain_strategy(), t in 1usize..=3) {
        prop_assume!(m.n() % t == 0 && m.n() / t >= 2);
        let coords: Vec<usize> = (0..m.n() / t).map(|j| j * t).collect();
        let skipped = m.skip(t).unwrap();
        let oracle = marginalize_table(&m.to_table().unwrap(), &coords).unwrap();
        let a = table_of(&skipped);
        let b = oracle.table_probs().unwrap();
        prop_assert_eq!(a.len(), b.len());
        prop_assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
