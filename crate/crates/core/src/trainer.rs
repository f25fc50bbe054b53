//! Cross-entropy-method policy search and fixture generation.
//!
//! CEM keeps a diagonal Gaussian over the flattened network parameters. Each
//! generation samples a population, scores every candidate on the same fixed
//! set of episode seeds, and refits the Gaussian to the elites. The best
//! candidate so far is carried into every population, so the best score never
//! decreases.
//!
//! Fixture sets pair trained policies with "poor generalizers": copies of a
//! trained policy whose weights on the position input are perturbed so that
//! they still solve the in-distribution task but respond differently on the
//! out-of-distribution query box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::InputBox;
use crate::envs::{self, Benchmark, EnvConfig, EnvError};
use crate::network::{Activation, Layer, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Hidden layer widths. Empty means the benchmark's default.
    pub hidden: Vec<usize>,
    pub population: usize,
    pub elite_fraction: f64,
    pub generations: usize,
    pub episodes_per_eval: usize,
    /// Standard deviation of the initial sampling distribution.
    pub init_std: f64,
    /// Extra exploration noise, `init_std * noise_decay^g` at generation `g`,
    /// added to the refitted standard deviation.
    pub noise_decay: f64,
    /// Stop once the best candidate scores at least this much.
    pub target_reward: Option<f64>,
    /// Penalty per unit by which an action exceeds the actuator range,
    /// averaged over steps. Keeps raw outputs on the scale of the actions.
    pub saturation_penalty: f64,
    /// Penalty on the mean squared parameter value.
    pub weight_decay: f64,
    /// Per-input penalty on `|d action / d input|`, averaged over visited
    /// states. Empty means no penalty.
    pub sensitivity_penalty: Vec<f64>,
    /// Per-input penalty on the L1 norm of that input's first-layer weights.
    /// Unlike the sensitivity penalty it also holds far from visited states.
    pub input_weight_penalty: Vec<f64>,
    /// Multiplier on the He-normal scale of the initial mean weights.
    pub init_gain: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            population: 40,
            elite_fraction: 0.2,
            generations: 40,
            episodes_per_eval: 3,
            init_std: 0.5,
            noise_decay: 0.9,
            target_reward: None,
            saturation_penalty: 0.0,
            weight_decay: 0.0,
            init_gain: 1.0,
            sensitivity_penalty: Vec::new(),
            input_weight_penalty: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings used for the benchmark fixtures. Small initial weights and the
    /// saturation penalty keep outputs on the actuator scale; on Cartpole the
    /// cart-position column of the first layer is penalized so that policies
    /// do not key on where the platform happens to be.
    pub fn for_benchmark(benchmark: Benchmark) -> Self {
        let base = Self {
            init_std: 0.1,
            init_gain: 0.5,
            saturation_penalty: 10.0,
            ..Self::default()
        };
        match benchmark {
            Benchmark::Cartpole => Self {
                input_weight_penalty: vec![20.0, 0.0, 0.0, 0.0],
                ..base
            },
            _ => base,
        }
    }

    pub fn elite_count(&self) -> usize {
        ((self.population as f64 * self.elite_fraction).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let ok = self.generations >= 1
            && self.elite_fraction > 0.0
            && self.elite_fraction < 1.0
            && self.population >= 2 * self.elite_count()
            && self.episodes_per_eval >= 1
            && self.init_std > 0.0
            && self.init_gain > 0.0
            && self.weight_decay >= 0.0
            && self.sensitivity_penalty.iter().all(|&v| v >= 0.0)
            && self.input_weight_penalty.iter().all(|&v| v >= 0.0)
            && self.saturation_penalty >= 0.0
            && (0.0..=1.0).contains(&self.noise_decay)
            && self.hidden.iter().all(|&h| h > 0);
        if ok {
            Ok(())
        } else {
            Err(EnvError::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

/// Default hidden widths per benchmark.
pub fn default_hidden(benchmark: Benchmark) -> Vec<usize> {
    match benchmark {
        Benchmark::MountainCar => vec![64, 16],
        _ => vec![32, 16],
    }
}

fn actuator_limit(env: &EnvConfig) -> f64 {
    match env {
        EnvConfig::Cartpole(_) => 1.0,
        EnvConfig::MountainCar(c) => c.max_action.abs().max(c.min_action.abs()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub mean_score: f64,
    /// Best score seen so far.
    pub best_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub network: Network,
    pub best_score: f64,
    pub history: Vec<GenerationStats>,
}

/// A randomly initialized network with a ReLU hidden stack and one linear
/// output.
pub fn init_network<R: Rng + ?Sized>(name: &str, input_dim: usize, hidden: &[usize], gain: f64, rng: &mut R) -> Network {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let layers = sizes
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let std = gain * (2.0 / w[0] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weights = (0..w[1])
                .map(|_| (0..w[0]).map(|_| normal.sample(rng)).collect())
                .collect();
            let act = if l + 2 == sizes.len() {
                Activation::Linear
            } else {
                Activation::Relu
            };
            Layer::new(weights, vec![0.0; w[1]], act).expect("consistent shapes")
        })
        .collect();
    Network::new(name, input_dim, layers).expect("consistent shapes")
}

/// Fitness of a policy: mean reward over the given seeds, minus the
/// saturation and sensitivity penalties.
fn fitness(policy: &Network, env: &EnvConfig, seeds: &[u64], cfg: &TrainConfig) -> Result<f64, EnvError> {
    let limit = actuator_limit(env);
    let sensitive = cfg.sensitivity_penalty.iter().any(|&v| v > 0.0);
    let mut total = 0.0;
    for &seed in seeds {
        let mut excess = 0.0;
        let mut sensitivity = 0.0;
        let mut steps = 0usize;
        let r = env.episode(
            |s| {
                let a = if sensitive {
                    let (y, g) = policy.vjp(s, &[1.0])?;
                    sensitivity += g.iter().zip(&cfg.sensitivity_penalty).map(|(d, w)| w * d.abs()).sum::<f64>();
                    y[0]
                } else {
                    policy.forward(s)?[0]
                };
                excess += (a.abs() - limit).max(0.0);
                steps += 1;
                Ok(a)
            },
            seed,
        )?;
        total += r.total_reward - (cfg.saturation_penalty * excess + sensitivity) / steps.max(1) as f64;
    }
    Ok(total / seeds.len() as f64)
}

/// First-layer column penalty. The first layer's weights lead the parameter
/// vector, row-major with `cols` entries per row.
fn input_penalty(params: &[f64], rows: usize, cols: usize, cfg: &TrainConfig) -> f64 {
    if cfg.input_weight_penalty.is_empty() {
        return 0.0;
    }
    params[..rows * cols]
        .chunks(cols)
        .map(|row| row.iter().zip(&cfg.input_weight_penalty).map(|(w, c)| c * w.abs()).sum::<f64>())
        .sum()
}

/// Trains a policy for `env` with the cross-entropy method.
pub fn cem_train(env: &EnvConfig, cfg: &TrainConfig, hidden: &[usize], name: &str) -> Result<TrainOutcome, EnvError> {
    cfg.validate()?;
    env.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let template = init_network(name, env.state_dim(), hidden, cfg.init_gain, &mut rng);
    let mut mean = template.parameters();
    let mut std = vec![cfg.init_std; mean.len()];
    let seeds: Vec<u64> = (0..cfg.episodes_per_eval)
        .map(|i| envs::episode_seed(cfg.seed ^ 0x5EED, i))
        .collect();
    let elites = cfg.elite_count();
    let first_cols = template.input_dim();
    let first_rows = template.layers()[0].rows();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut history = Vec::with_capacity(cfg.generations);
    for generation in 0..cfg.generations {
        let mut population: Vec<Vec<f64>> = (0..cfg.population)
            .map(|_| {
                mean.iter()
                    .zip(&std)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        if let Some((_, b)) = &best {
            population[0] = b.clone();
        }
        let scores: Vec<f64> = population
            .par_iter()
            .map(|p| -> Result<f64, EnvError> {
                let decay = cfg.weight_decay * p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64;
                Ok(fitness(&template.with_parameters(p)?, env, &seeds, cfg)? - decay - input_penalty(p, first_rows, first_cols, cfg))
            })
            .collect::<Result<_, _>>()?;
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let top = order[0];
        if best.as_ref().is_none_or(|(s, _)| scores[top] > *s) {
            best = Some((scores[top], population[top].clone()));
        }
        let best_score = best.as_ref().map(|b| b.0).expect("set above");
        history.push(GenerationStats {
            generation,
            mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
            best_score,
        });
        if cfg.target_reward.is_some_and(|t| best_score >= t) {
            break;
        }
        let extra = cfg.init_std * cfg.noise_decay.powi(generation as i32 + 1);
        for (k, (m, s)) in mean.iter_mut().zip(std.iter_mut()).enumerate() {
            let mu = order[..elites].iter().map(|&i| population[i][k]).sum::<f64>() / elites as f64;
            let var = order[..elites]
                .iter()
                .map(|&i| (population[i][k] - mu).powi(2))
                .sum::<f64>()
                / elites as f64;
            *m = mu;
            *s = var.sqrt() + extra;
        }
    }
    let (best_score, params) = best.expect("at least one generation");
    Ok(TrainOutcome {
        network: template.with_parameters(&params)?,
        best_score,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Trained,
    /// Perturbed copy of a trained policy.
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub train: TrainConfig,
    /// Episodes used to confirm the in-distribution threshold.
    pub check_episodes: usize,
    /// Training runs attempted per requested good policy before giving up.
    pub max_train_attempts: usize,
    /// Perturbations tried per requested bad policy.
    pub max_perturb_attempts: usize,
    /// Scale of the perturbation added to the position-input weights.
    pub perturb_scale: f64,
    /// Minimum mean |output change| on the OOD query box for a perturbation
    /// to be accepted.
    pub min_divergence: f64,
    pub divergence_samples: usize,
}

impl FixtureConfig {
    pub fn for_benchmark(benchmark: Benchmark) -> Self {
        Self {
            train: TrainConfig::for_benchmark(benchmark),
            ..Self::default()
        }
    }
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            check_episodes: 10,
            max_train_attempts: 4,
            max_perturb_attempts: 40,
            perturb_scale: 1.0,
            min_divergence: 1.0,
            divergence_samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub network: Network,
    pub kind: FixtureKind,
    pub seed: u64,
    pub in_dist_reward: f64,
    /// Mean output change on the OOD query box relative to the parent policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSet {
    pub benchmark: Benchmark,
    pub seed: u64,
    pub fixtures: Vec<Fixture>,
    /// Requested counts that could not be met within the attempt budgets.
    pub missing_good: usize,
    pub missing_bad: usize,
}

/// Mean |N1(x) - N2(x)| over uniform samples of the boxes.
pub fn mean_divergence(a: &Network, b: &Network, boxes: &[InputBox], samples: usize, seed: u64) -> Result<f64, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for region in boxes {
        for _ in 0..samples {
            let x = region.sample(&mut rng);
            total += (a.forward(&x)?[0] - b.forward(&x)?[0]).abs();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

fn perturb_position_column<R: Rng + ?Sized>(net: &Network, scale: f64, rng: &mut R) -> Network {
    let mut params = net.parameters();
    let first = &net.layers()[0];
    // parameters are laid out layer by layer, weights row-major, then bias
    for r in 0..first.rows() {
        params[r * first.cols()] += scale * rng.sample::<f64, _>(StandardNormal);
    }
    net.with_parameters(&params).expect("same shape")
}

/// Trains `n_good` policies and derives `n_bad` perturbed ones, all passing
/// the in-distribution reward threshold. Fixture names are `good-<i>` and
/// `bad-<i>`.
pub fn make_fixture_set(
    benchmark: Benchmark,
    n_good: usize,
    n_bad: usize,
    seed: u64,
    cfg: &FixtureConfig,
) -> Result<FixtureSet, EnvError> {
    if n_good < 2 {
        return Err(EnvError::Config(format!("need at least 2 good policies, asked for {n_good}")));
    }
    let env = benchmark.in_distribution()?;
    let threshold = benchmark.threshold();
    let hidden = if cfg.train.hidden.is_empty() {
        default_hidden(benchmark)
    } else {
        cfg.train.hidden.clone()
    };
    let check_seed = envs::episode_seed(seed, 7_000_000);
    let mut fixtures = Vec::new();
    let mut attempt = 0usize;
    while fixtures.len() < n_good && attempt < n_good * cfg.max_train_attempts {
        let run_seed = envs::episode_seed(seed, attempt);
        attempt += 1;
        let train = TrainConfig {
            seed: run_seed,
            ..cfg.train.clone()
        };
        let name = format!("good-{}", fixtures.len());
        let out = cem_train(&env, &train, &hidden, &name)?;
        let reward = envs::rollout(&out.network, &env, cfg.check_episodes, check_seed)?.mean_reward;
        if reward >= threshold {
            fixtures.push(Fixture {
                network: out.network,
                kind: FixtureKind::Trained,
                seed: run_seed,
                in_dist_reward: reward,
                divergence: None,
            });
        }
    }
    let trained = fixtures.len();
    let missing_good = n_good - trained;
    let boxes = benchmark.query_domain();
    let mut rng = ChaCha8Rng::seed_from_u64(envs::episode_seed(seed, 9_000_000));
    let mut bad = 0usize;
    if trained > 0 {
        for b in 0..n_bad {
            let parent = fixtures[b % trained].network.clone();
            for _ in 0..cfg.max_perturb_attempts {
                let candidate = perturb_position_column(&parent, cfg.perturb_scale, &mut rng)
                    .with_name(format!("bad-{bad}"));
                let div = mean_divergence(&parent, &candidate, &boxes, cfg.divergence_samples, rng.random())?;
                if div < cfg.min_divergence {
                    continue;
                }
                let reward = envs::rollout(&candidate, &env, cfg.check_episodes, check_seed)?.mean_reward;
                if reward >= threshold {
                    fixtures.push(Fixture {
                        network: candidate,
                        kind: FixtureKind::Perturbed,
                        seed: fixtures[b % trained].seed,
                        in_dist_reward: reward,
                        divergence: Some(div),
                    });
                    bad += 1;
                    break;
                }
            }
        }
    }
    Ok(FixtureSet {
        benchmark,
        seed,
        fixtures,
        missing_good,
        missing_bad: n_bad - bad,
    })
}
