//! Deterministic inputs shared by the benchmarks.

use concord_core::trainer::init_network;
use concord_core::{Network, PdtTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Untrained Cartpole-shaped policy (4 -> 32 -> 16 -> 1).
pub fn cartpole_policy(name: &str, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_network(name, 4, &[32, 16], 0.5, &mut rng)
}

/// Symmetric table with values in `[0, m)`.
pub fn random_table(n: usize, m: f64, seed: u64) -> PdtTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random_range(0.0..m);
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    PdtTable::from_values((0..n).map(|i| format!("m{i}")).collect(), values).expect("valid table")
}
