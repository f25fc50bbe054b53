//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod reference;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use concord_cli::commands::{cmd_compare, cmd_eval, cmd_select, CompareReport, RewardRow, SelectReport};
use concord_cli::config::{DomainSource, ModelSource, OracleChoice};
use concord_cli::PipelineConfig;
use concord_core::attacks::{classify_alignment, Alignment, AttackOracle};
use concord_core::envs::Benchmark;
use concord_core::network::{affine_network, toy_network};
use concord_core::selection::Score;
use concord_core::verifier::decide_objective;
use concord_core::{
    decide, filter_step, pdt, select, Activation, BabConfig, Criterion, DistanceSpec, InputBox, Layer, Network,
    Objective, PdtTable, Query, SelectionConfig, Verdict, VerifierOracle,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TIE: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Outcome {
    let toy = toy_network();
    let t = Instant::now();
    let a = toy.forward(&[1.0, 2.0]).unwrap()[0];
    let b = toy.forward(&[0.0, 4.0]).unwrap()[0];
    let elapsed = t.elapsed();
    let pass = (a - 20.0).abs() <= 1e-12 && (b - 28.0).abs() <= 1e-12 && elapsed < Duration::from_millis(1);
    outcome(pass, format!("f(1,2) = {a}, f(0,4) = {b}, {elapsed:?}"))
}

fn criterion_2() -> Outcome {
    let toy = toy_network();
    let cfg = BabConfig::default();
    let t = Instant::now();
    let wide = InputBox::from_bounds(&[(0.0, 5.0); 2]);
    let unit = InputBox::from_bounds(&[(0.0, 1.0); 2]);
    let sat = decide_objective(&toy, &Objective::Output(0), &wide, 25.0, &cfg).unwrap();
    let unsat = decide_objective(&toy, &Objective::Output(0), &unit, 25.0, &cfg).unwrap();
    let elapsed = t.elapsed();
    let sat_ok = match &sat {
        Verdict::Sat { witness, .. } => wide.contains(witness) && toy.forward(witness).unwrap()[0] >= 25.0,
        _ => false,
    };
    let (unsat_ok, bound) = match unsat {
        Verdict::Unsat { bound, .. } => ((bound - 12.0).abs() <= 1e-6, bound),
        _ => (false, f64::NAN),
    };
    outcome(
        sat_ok && unsat_ok && elapsed < Duration::from_secs(1),
        format!("SAT witness ok = {sat_ok}, UNSAT bound {bound}, {elapsed:?}"),
    )
}

fn alphas(rng: &mut ChaCha8Rng, truth: f64) -> Vec<f64> {
    let mut out = vec![0.0, truth + 1e-3, (truth - 1e-3).max(0.0)];
    while out.len() < 20 {
        out.push(rng.random_range(0.0..(1.5 * truth + 1.0)));
    }
    out
}

fn verdict_agrees(v: &Verdict, alpha: f64, truth: f64) -> bool {
    if (alpha - truth).abs() <= TIE {
        return true;
    }
    v.is_sat() == (alpha < truth)
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = BabConfig::default();
    let cdist = DistanceSpec::cdist();
    let DistanceSpec::CDistanceMin { categories } = &cdist else { unreachable!() };
    let (mut checks, mut disagreements) = (0usize, 0usize);
    for _ in 0..200 {
        let (a, b, domain) = reference::random_pair(&mut rng, 10);
        let pair = Network::concat(&a, &b).unwrap();
        let truths = [
            (DistanceSpec::L1, reference::exact_l1_max(&a, &b, &domain)),
            (cdist.clone(), reference::exact_cdist_max(&a, &b, &domain, categories)),
        ];
        for (spec, truth) in &truths {
            for alpha in alphas(&mut rng, *truth) {
                let q = Query {
                    pair: &pair,
                    distance: spec,
                    domain: &domain,
                    alpha,
                };
                let v = decide(&q, &cfg).unwrap();
                checks += 1;
                if !verdict_agrees(&v, alpha, *truth) {
                    disagreements += 1;
                }
            }
        }
    }
    let elapsed = t.elapsed();
    outcome(
        disagreements == 0 && elapsed < Duration::from_secs(300),
        format!("{checks} verdicts on 200 pairs (L1 and cdist), {disagreements} disagreements, {elapsed:?}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let oracle = VerifierOracle::default();
    let mut violations = 0;
    let mut worst_slack: f64 = 0.0;
    for _ in 0..50 {
        let (a, b, domain) = reference::random_pair(&mut rng, 10);
        let truth = reference::exact_l1_max(&a, &b, &domain);
        let m = (2.0 * truth).max(4.0);
        for eps in [0.5, 1.0] {
            let v = pdt(&a, &b, &DistanceSpec::L1, &domain, m, eps, &oracle).unwrap();
            if v < truth - TIE || v > truth + eps + TIE {
                violations += 1;
            }
            worst_slack = worst_slack.max((v - truth) / eps);
        }
    }
    outcome(
        violations == 0,
        format!("100 searches, {violations} violations, largest (pdt - max) / eps = {worst_slack:.3}"),
    )
}

fn scores(ds: &[f64]) -> Vec<Score> {
    ds.iter()
        .enumerate()
        .map(|(i, &d)| Score {
            id: format!("m{i}"),
            ds: d,
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let sixteen: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let p = filter_step(&scores(&sixteen), Criterion::Percentile, 25.0).unwrap();
    let five = scores(&[10.0, 9.0, 5.0, 4.0, 1.0]);
    let max = filter_step(&five, Criterion::Max, 25.0).unwrap();
    // Percentile takes 2 of 8; the gap 9.2 -> 1 takes 5.
    let eight = scores(&[10.0, 9.8, 9.6, 9.4, 9.2, 1.0, 0.9, 0.8]);
    let combined = filter_step(&eight, Criterion::Combined, 25.0).unwrap();
    // Percentile takes 3 of 12; the largest gap is 12 -> 6, taking 1.
    let twelve = scores(&[12.0, 6.0, 5.5, 5.0, 4.5, 4.0, 3.5, 3.0, 2.5, 2.0, 1.5, 1.0]);
    let combined_p = filter_step(&twelve, Criterion::Combined, 25.0).unwrap();
    let pass = p == ["m15", "m14", "m13", "m12"]
        && max == ["m0", "m1"]
        && combined == ["m0", "m1", "m2", "m3", "m4"]
        && combined_p == ["m0", "m1", "m2"];
    outcome(
        pass,
        format!(
            "PERCENTILE 16 -> {}, MAX -> {:?}, COMBINED -> {} and {}",
            p.len(),
            max,
            combined.len(),
            combined_p.len()
        ),
    )
}

fn cluster_table(c: usize, b: usize, seed: u64) -> PdtTable {
    let n = c + b;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = if i < c && j < c {
                rng.random_range(0.8..1.2)
            } else {
                rng.random_range(6.0..6.5)
            };
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    let ids = (0..n)
        .map(|i| if i < c { format!("c{i}") } else { format!("o{}", i - c) })
        .collect();
    PdtTable::from_values(ids, values).unwrap()
}

/// Iteration at which each id was removed (`usize::MAX` if it survived).
fn removal_rounds(table: &PdtTable, cfg: &SelectionConfig) -> BTreeMap<String, usize> {
    let (_, trace) = select(&table.model_ids, cfg, table).unwrap();
    table
        .model_ids
        .iter()
        .map(|id| (id.clone(), trace.removed_at(id).unwrap_or(usize::MAX)))
        .collect()
}

fn criterion_6() -> Outcome {
    let mut strict_failures = 0;
    let mut weak_failures = 0;
    let mut runs = 0;
    for (c, b) in [(4, 1), (12, 4), (6, 4)] {
        for seed in 0..5 {
            let table = cluster_table(c, b, seed);
            for criterion in [Criterion::Percentile, Criterion::Max, Criterion::Combined] {
                for p in [10.0, 25.0] {
                    let cfg = SelectionConfig {
                        criterion,
                        p,
                        iterations: 10,
                        similarity_absolute: 0.0,
                        ..SelectionConfig::default()
                    };
                    let rounds = removal_rounds(&table, &cfg);
                    let last_outlier = rounds.iter().filter(|(k, _)| k.starts_with('o')).map(|(_, &r)| r).max().unwrap();
                    let first_member = rounds.iter().filter(|(k, _)| k.starts_with('c')).map(|(_, &r)| r).min().unwrap();
                    runs += 1;
                    if last_outlier == usize::MAX || last_outlier > first_member {
                        weak_failures += 1;
                    }
                    if p == 10.0 && (last_outlier == usize::MAX || last_outlier >= first_member) {
                        strict_failures += 1;
                    }
                }
            }
        }
    }
    outcome(
        strict_failures == 0 && weak_failures == 0,
        format!(
            "{runs} runs; outliers strictly first at p=10: {strict_failures} failures; \
             never after a member at p=25: {weak_failures} failures"
        ),
    )
}

fn e2e_config(dir: &Path, seed: u64) -> PipelineConfig {
    PipelineConfig {
        benchmark: Benchmark::Cartpole,
        models: ModelSource::Train {
            n_good: 8,
            n_bad: 4,
            fixture: None,
        },
        distance: DistanceSpec::L1,
        domain: DomainSource::Preset,
        selection: SelectionConfig {
            m: 32.0,
            epsilon: 1.0,
            criterion: Criterion::Combined,
            ..SelectionConfig::default()
        },
        oracle: OracleChoice::Verifier,
        attack: Default::default(),
        bab: BabConfig::default(),
        eval: Default::default(),
        output: dir.to_path_buf(),
        seed,
    }
}

struct SeedRun {
    seed: u64,
    select: SelectReport,
    rewards: Vec<RewardRow>,
    compare: CompareReport,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_7(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let mut passes = 0;
    let mut notes = Vec::new();
    for r in runs {
        let ood: BTreeMap<&str, f64> = r.rewards.iter().map(|row| (row.model_id.as_str(), row.ood_mean)).collect();
        let med = median(ood.values().copied().collect());
        let worst = r.select.survivors.iter().map(|id| ood[id.as_str()]).fold(f64::INFINITY, f64::min);
        if worst >= med {
            passes += 1;
        }
        notes.push(format!("seed {}: min {worst:.1} vs median {med:.1}", r.seed));
    }
    outcome(
        passes >= 4 && elapsed < Duration::from_secs(1800),
        format!("{passes}/5 seeds pass ({}); {elapsed:?}", notes.join("; ")),
    )
}

fn two_bump() -> Network {
    let tent = |c: f64, w: f64, h: f64| {
        let s = h / w;
        ([-(c - w), -c, -(c + w)], [s, -2.0 * s, s])
    };
    let (b1, o1) = tent(0.5, 0.3, 1.0);
    let (b2, o2) = tent(0.95, 0.03, 3.0);
    let hidden = Layer::new(vec![vec![1.0]; 6], b1.iter().chain(&b2).copied().collect(), Activation::Relu).unwrap();
    let out = Layer::new(vec![o1.iter().chain(&o2).copied().collect()], vec![0.0], Activation::Linear).unwrap();
    Network::new("two-bump", 1, vec![hidden, out]).unwrap()
}

fn criterion_8(runs: &[SeedRun]) -> Outcome {
    let mut pairs = 0;
    let mut violations = 0;
    let mut totals = [0usize; 3];
    for r in runs {
        let eps = r.compare.config.selection.epsilon;
        for row in &r.compare.rows {
            pairs += 1;
            if row.attack_pdt > row.verifier_pdt + eps {
                violations += 1;
            }
        }
        totals[0] += r.compare.counts.aligned;
        totals[1] += r.compare.counts.untightened;
        totals[2] += r.compare.counts.failed;
    }
    let classified = totals.iter().sum::<usize>() == pairs;
    let bump = two_bump();
    let zero = affine_network("zero", vec![vec![0.0]], vec![0.0]).unwrap();
    let domain = InputBox::from_bounds(&[(0.0, 1.0)]);
    let truth = reference::exact_l1_max(&bump, &zero, &domain);
    let v = pdt(&bump, &zero, &DistanceSpec::L1, &domain, 8.0, 0.5, &VerifierOracle::default()).unwrap();
    let a = pdt(&bump, &zero, &DistanceSpec::L1, &domain, 8.0, 0.5, &AttackOracle::default()).unwrap();
    let rigged = classify_alignment(v, a, &[], &[]);
    let rigged_ok = rigged == Alignment::Untightened && (truth - 3.0).abs() < 1e-9 && v >= truth - TIE;
    outcome(
        violations == 0 && classified && rigged_ok,
        format!(
            "{pairs} pairs, {violations} with attack > verifier + eps; ALIGNED {} UNTIGHTENED {} FAILED {}; \
             two-bump: max {truth}, verifier {v}, attack {a}, {rigged:?}",
            totals[0], totals[1], totals[2]
        ),
    )
}

fn run_seed(dir: &Path, seed: u64) -> SeedRun {
    let cfg = e2e_config(dir, seed);
    let select = cmd_select(&cfg).unwrap();
    let rewards = cmd_eval(&cfg).unwrap();
    let compare = cmd_compare(&cfg).unwrap();
    SeedRun {
        seed,
        select,
        rewards,
        compare,
    }
}

fn read_all(dir: &Path) -> Vec<Vec<u8>> {
    ["selection.json", "pdt.json", "rewards.csv", "compare.json"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

fn criterion_9(first: &SeedRun, dir: &Path) -> Outcome {
    // Same config, seed and cache.
    let before = read_all(dir);
    let again = run_seed(dir, first.seed);
    let same_cache = read_all(dir) == before && again.select.survivors == first.select.survivors;
    // Fresh directory: everything, including training, recomputed.
    let fresh_dir = tempfile::tempdir().unwrap();
    let fresh = run_seed(fresh_dir.path(), first.seed);
    let fresh_same = fresh.select.survivors == first.select.survivors
        && fresh.select.trace == first.select.trace
        && fresh.rewards == first.rewards
        && fresh.compare.rows == first.compare.rows
        && std::fs::read(fresh_dir.path().join("rewards.csv")).unwrap() == before[2];
    outcome(
        same_cache && fresh_same,
        format!("rerun with cache byte-identical = {same_cache}; fresh rerun identical = {fresh_same}"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "toy forward anchor", criterion_1()));
    results.push((2, "toy verification anchor", criterion_2()));
    results.push((3, "verifier completeness vs enumeration", criterion_3()));
    results.push((4, "PDT precision", criterion_4()));
    results.push((5, "filtering criteria arithmetic", criterion_5()));
    results.push((6, "synthetic-cluster selection", criterion_6()));

    let dirs: Vec<tempfile::TempDir> = (0..5).map(|_| tempfile::tempdir().unwrap()).collect();
    let t = Instant::now();
    let runs: Vec<SeedRun> = dirs.iter().zip(0u64..).map(|(d, s)| run_seed(d.path(), s)).collect();
    let elapsed = t.elapsed();
    results.push((7, "end-to-end Cartpole selection", criterion_7(&runs, elapsed)));
    results.push((8, "attack vs verifier", criterion_8(&runs)));
    results.push((9, "determinism", criterion_9(&runs[0], dirs[0].path())));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
