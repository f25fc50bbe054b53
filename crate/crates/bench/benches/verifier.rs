use std::hint::black_box;

use concord_bench::cartpole_policy;
use concord_core::attacks::{attack_distance, AttackConfig};
use concord_core::bounds::{propagate_bounds, symbolic_output_bounds};
use concord_core::envs::Benchmark;
use concord_core::network::toy_network;
use concord_core::verifier::decide_objective;
use concord_core::{maximize, BabConfig, DistanceSpec, InputBox, Network, Objective};
use criterion::{criterion_group, criterion_main, Criterion};

fn forward(c: &mut Criterion) {
    let net = cartpole_policy("p", 1);
    c.bench_function("forward 4-32-16-1", |b| b.iter(|| net.forward(black_box(&[0.1, -0.2, 0.05, 0.3]))));
}

fn bounds(c: &mut Criterion) {
    let pair = Network::concat(&cartpole_policy("a", 1), &cartpole_policy("b", 2)).unwrap();
    let domain = &Benchmark::Cartpole.query_domain()[1];
    c.bench_function("interval bounds, cartpole pair", |b| b.iter(|| propagate_bounds(&pair, domain)));
    c.bench_function("symbolic bounds, cartpole pair", |b| b.iter(|| symbolic_output_bounds(&pair, domain)));
}

fn decide(c: &mut Criterion) {
    let toy = toy_network();
    let unit = InputBox::from_bounds(&[(0.0, 1.0); 2]);
    let cfg = BabConfig::default();
    c.bench_function("toy UNSAT at 25", |b| {
        b.iter(|| decide_objective(&toy, &Objective::Output(0), &unit, 25.0, &cfg))
    });
}

fn maximize_pair(c: &mut Criterion) {
    let pair = Network::concat(&cartpole_policy("a", 1), &cartpole_policy("b", 2)).unwrap();
    let domain = &Benchmark::Cartpole.query_domain()[1];
    let cfg = BabConfig::default();
    let mut group = c.benchmark_group("maximize cartpole pair");
    group.sample_size(10);
    group.bench_function("l1", |b| b.iter(|| maximize(&pair, &DistanceSpec::L1, domain, 0.5, &cfg)));
    group.bench_function("cdist", |b| b.iter(|| maximize(&pair, &DistanceSpec::cdist(), domain, 0.5, &cfg)));
    group.finish();
}

fn attack(c: &mut Criterion) {
    let pair = Network::concat(&cartpole_policy("a", 1), &cartpole_policy("b", 2)).unwrap();
    let domain = &Benchmark::Cartpole.query_domain()[1];
    let cfg = AttackConfig::default();
    c.bench_function("pgd l1, cartpole pair", |b| b.iter(|| attack_distance(&pair, &DistanceSpec::L1, domain, &cfg)));
}

criterion_group!(benches, forward, bounds, decide, maximize_pair, attack);
criterion_main!(benches);
