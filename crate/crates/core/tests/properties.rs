//! Property tests over randomly generated networks, boxes and tables.

mod common;

use concord_core::bounds::{propagate_bounds, symbolic_output_bounds};
use concord_core::distance::distance_max;
use concord_core::selection::Termination;
use concord_core::{
    decide, disagreement_scores, filter_step, select, BabConfig, Criterion, DistanceSpec, InputBox, Network,
    PdtTable, Query, SelectionConfig, Verdict,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair_strategy() -> impl Strategy<Value = (Network, Network, InputBox, u64)> {
    any::<u64>().prop_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, d) = common::random_pair(&mut rng, 10);
        (a, b, d, seed)
    })
}

fn table_strategy() -> impl Strategy<Value = PdtTable> {
    (2usize..10).prop_flat_map(|n| {
        proptest::collection::vec(0.0f64..16.0, n * (n - 1) / 2).prop_map(move |upper| {
            let mut values = vec![vec![0.0; n]; n];
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    values[i][j] = upper[k];
                    values[j][i] = upper[k];
                    k += 1;
                }
            }
            PdtTable::from_values((0..n).map(|i| format!("m{i}")).collect(), values).unwrap()
        })
    })
}

fn criterion_strategy() -> impl Strategy<Value = Criterion> {
    prop_oneof![Just(Criterion::Percentile), Just(Criterion::Max), Just(Criterion::Combined)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_evaluates_both_members((a, b, domain, seed) in pair_strategy()) {
        let pair = Network::concat(&a, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let x = domain.sample(&mut rng);
            let y = pair.forward(&x).unwrap();
            prop_assert!((y[0] - a.forward(&x).unwrap()[0]).abs() <= 1e-9);
            prop_assert!((y[1] - b.forward(&x).unwrap()[0]).abs() <= 1e-9);
        }
    }

    #[test]
    fn json_round_trip_is_lossless((a, _b, _d, _s) in pair_strategy()) {
        let back = Network::from_json_str(&a.to_json_string()).unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn bounds_enclose_samples((a, b, domain, seed) in pair_strategy()) {
        let pair = Network::concat(&a, &b).unwrap();
        let ibp = propagate_bounds(&pair, &domain).unwrap();
        let sym = symbolic_output_bounds(&pair, &domain).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..50 {
            let y = pair.forward(&domain.sample(&mut rng)).unwrap();
            for k in 0..2 {
                prop_assert!(ibp.output()[k].lo - 1e-9 <= y[k] && y[k] <= ibp.output()[k].hi + 1e-9);
                prop_assert!(sym[k].lo - 1e-9 <= y[k] && y[k] <= sym[k].hi + 1e-9);
            }
        }
    }

    #[test]
    fn unsat_bounds_dominate_samples((a, b, domain, seed) in pair_strategy(), frac in 0.0f64..2.0) {
        let pair = Network::concat(&a, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let samples: Vec<f64> = (0..200)
            .map(|_| {
                let y = pair.forward(&domain.sample(&mut rng)).unwrap();
                (y[0] - y[1]).abs()
            })
            .collect();
        let seen = samples.iter().copied().fold(0.0, f64::max);
        let alpha = frac * (seen + 0.1);
        let q = Query { pair: &pair, distance: &DistanceSpec::L1, domain: &domain, alpha };
        match decide(&q, &BabConfig::default()).unwrap() {
            Verdict::Unsat { bound, .. } => {
                prop_assert!(alpha > seen - 1e-6);
                prop_assert!(bound >= seen - 1e-6);
            }
            Verdict::Sat { witness, value } => {
                prop_assert!(domain.contains(&witness));
                let y = pair.forward(&witness).unwrap();
                prop_assert!(((y[0] - y[1]).abs() - value).abs() <= 1e-9);
                prop_assert!(value >= alpha);
            }
        }
    }

    #[test]
    fn cdist_never_exceeds_l1((a, b, domain, _s) in pair_strategy()) {
        let pair = Network::concat(&a, &b).unwrap();
        let cfg = BabConfig::default();
        let l1 = distance_max(&pair, &DistanceSpec::L1, &domain, 1e-3, &cfg).unwrap();
        let cd = distance_max(&pair, &DistanceSpec::cdist(), &domain, 1e-3, &cfg).unwrap();
        prop_assert!(cd.bracket.lower <= l1.bracket.upper + 1e-9);
    }

    #[test]
    fn bisection_covers_the_box((_a, _b, domain, _s) in pair_strategy(), dim in 0usize..2) {
        let dim = dim % domain.dim();
        let (l, r) = domain.bisect(dim);
        prop_assert!(domain.encloses(&l) && domain.encloses(&r));
        prop_assert_eq!(l.upper()[dim], r.lower()[dim]);
        prop_assert_eq!(l.lower()[dim], domain.lower()[dim]);
        prop_assert_eq!(r.upper()[dim], domain.upper()[dim]);
    }

    #[test]
    fn scores_are_mean_pdts(table in table_strategy()) {
        let ids = table.model_ids.clone();
        let scores = disagreement_scores(&table, &ids).unwrap();
        let n = ids.len() as f64;
        for (i, s) in scores.iter().enumerate() {
            let row: f64 = table.values[i].iter().sum();
            prop_assert!((s.ds - row / (n - 1.0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn filter_step_keeps_a_survivor(table in table_strategy(), criterion in criterion_strategy(), p in 1.0f64..99.0) {
        let scores = disagreement_scores(&table, &table.model_ids).unwrap();
        let removed = filter_step(&scores, criterion, p).unwrap();
        prop_assert!(removed.len() < scores.len());
        // Removed models score at least as high as every kept one.
        let ds = |id: &String| scores.iter().find(|s| &s.id == id).unwrap().ds;
        let lowest_removed = removed.iter().map(ds).fold(f64::INFINITY, f64::min);
        for s in &scores {
            if !removed.contains(&s.id) {
                prop_assert!(s.ds <= lowest_removed);
            }
        }
    }

    #[test]
    fn selection_trace_is_consistent(table in table_strategy(), criterion in criterion_strategy()) {
        let cfg = SelectionConfig { criterion, ..SelectionConfig::default() };
        let (survivors, trace) = select(&table.model_ids, &cfg, &table).unwrap();
        prop_assert!(!survivors.is_empty());
        let mut removed: Vec<&String> = trace.iterations.iter().flat_map(|r| &r.removed).collect();
        let total = removed.len();
        removed.sort();
        removed.dedup();
        prop_assert_eq!(removed.len(), total);
        prop_assert_eq!(total + survivors.len(), table.len());
        prop_assert!(trace.iterations.len() <= cfg.iterations);
        if trace.termination == Termination::ScoresSimilar {
            prop_assert!(trace.iterations.last().unwrap().removed.is_empty());
        }
    }
}
