use adagibbs_core::privacy::{
    deviating_algorithm, exponential_mechanism, exponential_weights, histogram_completeness_threshold,
    negative_example_sample_size, stable_histogram, PrivacyBudget,
};
use adagibbs_core::seeding::rng_from_seed;
use adagibbs_core::{Measure, StatisticalQuery, Symbol};

#[test]
fn exponential_mechanism_chi_square() {
    let scores = [0.0, 0.3, -0.2, 0.9, 0.5];
    let scale = 2.0;
    let w = exponential_weights(&scores, scale).unwrap();
    let draws = 100_000;
    let mut counts = [0u64; 5];
    let mut rng = rng_from_seed(300);
    for _ in 0..draws {
        counts[exponential_mechanism(&scores, scale, &mut rng).unwrap()] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&w)
        .map(|(&c, p)| {
            let e = p * draws as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 0.999 quantile of chi-square with 4 degrees of freedom
    assert!(chi2 < 18.466_826_952_903_17, "chi2 = {chi2}");
}

#[test]
fn histogram_soundness_and_completeness() {
    let budget = PrivacyBudget::new(1.0, 1e-6).unwrap();
    let beta = 0.1;
    let heavy = histogram_completeness_threshold(&budget, beta).ceil() as usize;
    let mut sample: Vec<Symbol> = vec![7; heavy];
    sample.extend(100..400);
    sample.extend([50, 50, 51, 51, 51]);
    let mut rng = rng_from_seed(301);
    let mut listed = 0;
    for _ in 0..1000 {
        let out = stable_histogram(&sample, &budget, beta, &mut rng).unwrap();
        for item in &out {
            assert!(sample.iter().filter(|&&x| x == item.symbol).count() >= 2);
        }
        listed += usize::from(out.iter().any(|i| i.symbol == 7));
    }
    assert!(listed as f64 / 1000.0 >= 1.0 - beta - 0.02);
}

#[test]
fn planted_count_chernoff() {
    let psi = 0.2;
    let n = 200;
    let m = Measure::planted(psi, 1_000_000, n).unwrap();
    let mut rng = rng_from_seed(302);
    let trials = 2000;
    let ok = (0..trials).filter(|_| m.sample_planted(&mut rng).unwrap().planted as f64 >= n as f64 * psi / 2.0).count();
    assert!(ok as f64 / trials as f64 >= 1.0 - (-(n as f64) / 8.0).exp() - 0.02);
}

#[test]
fn deviating_algorithm_on_planted_sample() {
    let psi = 0.2;
    let budget = PrivacyBudget::new(1.0, 1e-6).unwrap();
    let beta = 0.1;
    let n = negative_example_sample_size(psi, &budget, beta);
    assert_eq!(n, 1345);
    let grid = 1_000_000;
    let m = Measure::planted(psi, grid, n).unwrap();
    let mut rng = rng_from_seed(303);
    let mut hits = 0;
    let trials = 50;
    for _ in 0..trials {
        let draw = m.sample_planted(&mut rng).unwrap();
        let h = deviating_algorithm(&draw.tuple, &budget, beta, &mut rng).unwrap();
        if h == (StatisticalQuery::Singleton { symbol: draw.star }) {
            assert!(h.empirical(&draw.tuple) >= psi / 2.0);
            assert_eq!(m.query_mean(&h), 1.0 / grid as f64);
            hits += 1;
        }
    }
    assert!(hits as f64 / trials as f64 >= 0.8);
}
