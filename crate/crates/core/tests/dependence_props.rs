mod common;

use adagibbs_core::dependence::{gibbs_dependence, is_product, markov_psi_bound};
use adagibbs_core::seeding::rng_from_seed;
use adagibbs_core::Measure;
use common::{random_chain, random_product, random_table};
use proptest::prelude::*;

#[test]
fn product_iff_zero_psi_randomized() {
    let mut rng = rng_from_seed(200);
    for i in 0..100 {
        let n = 1 + i % 5;
        let size = 1 + i % 3;
        let p = random_product(&mut rng, n, size);
        assert!(gibbs_dependence(&p).unwrap().psi <= 1e-12);
        assert!(is_product(&p, 1e-12).unwrap());
        let t = random_table(&mut rng, n.max(2), size.max(2));
        let psi = gibbs_dependence(&t).unwrap().psi;
        if psi <= 1e-12 {
            assert!(is_product(&t, 1e-12).unwrap());
        } else {
            assert!(!is_product(&t, 1e-9).unwrap());
        }
    }
}

#[test]
fn planted_psi_within_parameter() {
    for psi in [0.1, 0.3, 0.6, 0.9] {
        let m = Measure::planted(psi, 3, 3).unwrap();
        assert!(gibbs_dependence(&m).unwrap().psi <= psi + 1e-12);
    }
}

#[test]
fn argmax_is_deterministic() {
    let mut rng = rng_from_seed(201);
    let m = random_chain(&mut rng, 5, 2, 1.0, 3.0);
    assert_eq!(gibbs_dependence(&m).unwrap(), gibbs_dependence(&m).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chain_psi_below_markov_bound(seed in any::<u64>(), n in 2usize..=6, size in 2usize..=3) {
        let m = random_chain(&mut rng_from_seed(seed), n, size, 1.0, 3.0);
        let psi = gibbs_dependence(&m).unwrap().psi;
        prop_assert!(psi <= markov_psi_bound(&m).unwrap().r_bar + 1e-12);
    }

    #[test]
    fn psi_is_invariant_under_potential_scaling(seed in any::<u64>(), c in 0.01f64..100.0) {
        let m = random_chain(&mut rng_from_seed(seed), 4, 2, 1.0, 3.0);
        let pots: Vec<Vec<f64>> = m.as_chain().unwrap().potentials().iter().map(|g| g.iter().map(|v| v * c).collect()).collect();
        let s = Measure::chain(2, pots).unwrap();
        let (a, b) = (gibbs_dependence(&m).unwrap().psi, gibbs_dependence(&s).unwrap().psi);
        prop_assert!((a - b).abs() < 1e-12);
    }
}
