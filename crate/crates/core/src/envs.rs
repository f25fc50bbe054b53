//! Continuous-action Cartpole and Mountain Car simulators.
//!
//! Both follow the classic control formulations: Cartpole integrates the
//! cart-pole equations of motion with explicit Euler steps of 0.02 s, and
//! Mountain Car applies a clipped push against a cosine-shaped slope. Every
//! constant lives in the config structs so that presets can be audited and
//! overridden from JSON.
//!
//! Policies are networks mapping the observed state to one scalar action.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::InputBox;
use crate::network::{Network, NetworkError};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("action {0} is not finite")]
    NonFiniteAction(f64),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("policy takes {got} inputs, the environment observes {expected}")]
    PolicyDim { expected: usize, got: usize },
    #[error("no episodes requested")]
    NoEpisodes,
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid environment config: {0}")]
    Config(String),
}

pub type Result<T, E = EnvError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    OutOfBounds,
    PoleFell,
    GoalReached,
    StepCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub total_reward: f64,
    pub steps: usize,
    pub termination: Termination,
}

/// Raises nonzero actions below `floor` in magnitude to `floor`, keeping the sign.
fn apply_floor(a: f64, floor: f64) -> f64 {
    if a != 0.0 && a.abs() < floor {
        floor.copysign(a)
    } else {
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartpoleConfig {
    pub x_low: f64,
    pub x_high: f64,
    pub init_center_halfwidth: f64,
    /// Radians.
    pub angle_fail_threshold: f64,
    pub max_steps: usize,
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    /// Half the pole's length.
    pub length: f64,
    /// Force applied for action 1; actions are clipped to [-1, 1].
    pub force_mag: f64,
    pub tau: f64,
    /// Nonzero actions smaller than this in magnitude are raised to it.
    pub action_min_magnitude: f64,
}

impl Default for CartpoleConfig {
    fn default() -> Self {
        Self {
            x_low: -2.4,
            x_high: 2.4,
            init_center_halfwidth: 0.05,
            angle_fail_threshold: 12.0 * 2.0 * std::f64::consts::PI / 360.0,
            max_steps: 500,
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            length: 0.5,
            force_mag: 10.0,
            tau: 0.02,
            action_min_magnitude: 0.0,
        }
    }
}

/// Cartpole state `(x, x_dot, theta, theta_dot)`.
pub type CartpoleState = [f64; 4];

impl CartpoleConfig {
    pub fn with_platform(x_low: f64, x_high: f64) -> Self {
        Self {
            x_low,
            x_high,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_low < self.x_high && self.init_center_halfwidth >= 0.0 && self.tau > 0.0) {
            return Err(EnvError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.x_low + self.x_high)
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> CartpoleState {
        let h = self.init_center_halfwidth;
        let mut u = || if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
        [self.center() + u(), u(), u(), u()]
    }

    /// Advances one step. Returns the new state, the reward, and the reason
    /// the episode ended, if it did. The step cap is not checked here.
    pub fn step(&self, s: &CartpoleState, action: f64) -> Result<(CartpoleState, f64, Option<Termination>)> {
        if !action.is_finite() {
            return Err(EnvError::NonFiniteAction(action));
        }
        let a = apply_floor(action, self.action_min_magnitude).clamp(-1.0, 1.0);
        let force = self.force_mag * a;
        let [x, x_dot, theta, theta_dot] = *s;
        let total_mass = self.mass_cart + self.mass_pole;
        let pole_mass_length = self.mass_pole * self.length;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (self.gravity * sin - cos * temp)
            / (self.length * (4.0 / 3.0 - self.mass_pole * cos * cos / total_mass));
        let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
        let next = [
            x + self.tau * x_dot,
            x_dot + self.tau * x_acc,
            theta + self.tau * theta_dot,
            theta_dot + self.tau * theta_acc,
        ];
        let end = if next[0] < self.x_low || next[0] > self.x_high {
            Some(Termination::OutOfBounds)
        } else if next[2].abs() > self.angle_fail_threshold {
            Some(Termination::PoleFell)
        } else {
            None
        };
        let reward = if end.is_none() { 1.0 } else { 0.0 };
        Ok((next, reward, end))
    }

    pub fn episode<P: FnMut(&[f64]) -> Result<f64>>(&self, mut policy: P, seed: u64) -> Result<EpisodeResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = self.reset(&mut rng);
        let mut total = 0.0;
        for t in 0..self.max_steps {
            let (next, r, end) = self.step(&s, policy(&s)?)?;
            total += r;
            s = next;
            if let Some(termination) = end {
                return Ok(EpisodeResult {
                    total_reward: total,
                    steps: t + 1,
                    termination,
                });
            }
        }
        Ok(EpisodeResult {
            total_reward: total,
            steps: self.max_steps,
            termination: Termination::StepCap,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MountainCarConfig {
    pub min_position: f64,
    pub max_position: f64,
    pub goal_position: f64,
    pub min_action: f64,
    pub max_action: f64,
    pub max_speed: f64,
    pub init_position_range: (f64, f64),
    pub init_velocity_range: (f64, f64),
    /// Horizontal stretch of the hill profile.
    pub x_scale: f64,
    pub max_steps: usize,
    pub power: f64,
    pub goal_reward: f64,
    pub action_cost: f64,
}

impl Default for MountainCarConfig {
    fn default() -> Self {
        Self {
            min_position: -1.2,
            max_position: 0.6,
            goal_position: 0.45,
            min_action: -2.0,
            max_action: 2.0,
            max_speed: 0.4,
            init_position_range: (-0.9, -0.6),
            init_velocity_range: (0.0, 0.0),
            x_scale: 1.5,
            max_steps: 300,
            power: 0.0015,
            goal_reward: 100.0,
            action_cost: 0.1,
        }
    }
}

/// Mountain Car state `(position, velocity)`.
pub type MountainCarState = [f64; 2];

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl MountainCarConfig {
    pub fn out_of_distribution() -> Self {
        Self {
            min_position: -2.4,
            max_position: 1.2,
            goal_position: 0.9,
            init_position_range: (0.4, 0.5),
            init_velocity_range: (-0.4, -0.3),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min_position < self.goal_position
            && self.goal_position <= self.max_position
            && self.min_action <= self.max_action
            && self.max_speed > 0.0
            && self.x_scale > 0.0
            && self.init_position_range.0 <= self.init_position_range.1
            && self.init_velocity_range.0 <= self.init_velocity_range.1;
        if !ok {
            return Err(EnvError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> MountainCarState {
        let p = uniform(rng, self.init_position_range);
        let v = uniform(rng, self.init_velocity_range);
        [p, v]
    }

    pub fn step(&self, s: &MountainCarState, action: f64) -> Result<(MountainCarState, f64, Option<Termination>)> {
        if !action.is_finite() {
            return Err(EnvError::NonFiniteAction(action));
        }
        let force = action.clamp(self.min_action, self.max_action);
        let [mut position, mut velocity] = *s;
        velocity += force * self.power - 0.0025 * (3.0 * position / self.x_scale).cos();
        velocity = velocity.clamp(-self.max_speed, self.max_speed);
        position += velocity;
        position = position.clamp(self.min_position, self.max_position);
        if position == self.min_position && velocity < 0.0 {
            velocity = 0.0;
        }
        let done = position >= self.goal_position;
        let mut reward = -self.action_cost * force * force;
        if done {
            reward += self.goal_reward;
        }
        Ok(([position, velocity], reward, done.then_some(Termination::GoalReached)))
    }

    pub fn episode<P: FnMut(&[f64]) -> Result<f64>>(&self, mut policy: P, seed: u64) -> Result<EpisodeResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = self.reset(&mut rng);
        let mut total = 0.0;
        for t in 0..self.max_steps {
            let (next, r, end) = self.step(&s, policy(&s)?)?;
            total += r;
            s = next;
            if let Some(termination) = end {
                return Ok(EpisodeResult {
                    total_reward: total,
                    steps: t + 1,
                    termination,
                });
            }
        }
        Ok(EpisodeResult {
            total_reward: total,
            steps: self.max_steps,
            termination: Termination::StepCap,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum EnvConfig {
    Cartpole(CartpoleConfig),
    MountainCar(MountainCarConfig),
}

impl EnvConfig {
    /// Named presets: `cartpole-indist`, `cartpole-ood-left`,
    /// `cartpole-ood-right`, `mountaincar-indist`, `mountaincar-ood`.
    pub fn preset(name: &str) -> Result<EnvConfig> {
        Ok(match name {
            "cartpole-indist" => EnvConfig::Cartpole(CartpoleConfig::default()),
            "cartpole-ood-left" => EnvConfig::Cartpole(CartpoleConfig::with_platform(-10.0, -2.4)),
            "cartpole-ood-right" => EnvConfig::Cartpole(CartpoleConfig::with_platform(2.4, 10.0)),
            "mountaincar-indist" => EnvConfig::MountainCar(MountainCarConfig::default()),
            "mountaincar-ood" => EnvConfig::MountainCar(MountainCarConfig::out_of_distribution()),
            other => return Err(EnvError::UnknownPreset(other.to_string())),
        })
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvConfig::Cartpole(_) => 4,
            EnvConfig::MountainCar(_) => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::Cartpole(c) => c.validate(),
            EnvConfig::MountainCar(c) => c.validate(),
        }
    }

    pub fn max_steps(&self) -> usize {
        match self {
            EnvConfig::Cartpole(c) => c.max_steps,
            EnvConfig::MountainCar(c) => c.max_steps,
        }
    }

    pub fn episode<P: FnMut(&[f64]) -> Result<f64>>(&self, policy: P, seed: u64) -> Result<EpisodeResult> {
        match self {
            EnvConfig::Cartpole(c) => c.episode(policy, seed),
            EnvConfig::MountainCar(c) => c.episode(policy, seed),
        }
    }
}

/// Seed of episode `i` under master seed `seed`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    // splitmix64 finalizer, so neighbouring master seeds give unrelated streams
    let mut z = seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub mean_reward: f64,
    pub episodes: Vec<EpisodeResult>,
}

fn network_policy(policy: &Network) -> impl FnMut(&[f64]) -> Result<f64> + '_ {
    move |s| Ok(policy.forward(s)?[0])
}

/// Runs `episodes` seeded episodes of `policy` (episodes in parallel).
pub fn rollout(policy: &Network, env: &EnvConfig, episodes: usize, seed: u64) -> Result<RolloutSummary> {
    if policy.input_dim() != env.state_dim() {
        return Err(EnvError::PolicyDim {
            expected: env.state_dim(),
            got: policy.input_dim(),
        });
    }
    if policy.output_dim() != 1 {
        return Err(EnvError::Config(format!(
            "policy must have one output, {} has {}",
            policy.name(),
            policy.output_dim()
        )));
    }
    if episodes == 0 {
        return Err(EnvError::NoEpisodes);
    }
    env.validate()?;
    let results: Vec<EpisodeResult> = (0..episodes)
        .into_par_iter()
        .map(|i| env.episode(network_policy(policy), episode_seed(seed, i)))
        .collect::<Result<_>>()?;
    let mean_reward = results.iter().map(|r| r.total_reward).sum::<f64>() / episodes as f64;
    Ok(RolloutSummary {
        mean_reward,
        episodes: results,
    })
}

/// Mean reward over several environments, each given `episodes` episodes.
pub fn mean_over(policy: &Network, envs: &[EnvConfig], episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (k, env) in envs.iter().enumerate() {
        total += rollout(policy, env, episodes, episode_seed(seed, 1000 + k))?.mean_reward;
    }
    Ok(total / envs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Cartpole,
    #[serde(rename = "mountaincar")]
    MountainCar,
    Aurora,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Good,
    Bad,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Good => "good",
            Label::Bad => "bad",
        })
    }
}

impl Benchmark {
    pub fn threshold(self) -> f64 {
        match self {
            Benchmark::Cartpole => 250.0,
            Benchmark::MountainCar => 90.0,
            Benchmark::Aurora => 99.0,
        }
    }

    /// Good iff the mean reward reaches the benchmark threshold (inclusive).
    pub fn classify(self, mean_reward: f64) -> Label {
        if mean_reward >= self.threshold() {
            Label::Good
        } else {
            Label::Bad
        }
    }

    pub fn in_distribution(self) -> Result<EnvConfig> {
        match self {
            Benchmark::Cartpole => EnvConfig::preset("cartpole-indist"),
            Benchmark::MountainCar => EnvConfig::preset("mountaincar-indist"),
            Benchmark::Aurora => Err(EnvError::UnknownPreset("aurora has no simulator".into())),
        }
    }

    /// OOD environments; the reported OOD reward is their mean.
    pub fn out_of_distribution(self) -> Result<Vec<EnvConfig>> {
        match self {
            Benchmark::Cartpole => Ok(vec![
                EnvConfig::preset("cartpole-ood-left")?,
                EnvConfig::preset("cartpole-ood-right")?,
            ]),
            Benchmark::MountainCar => Ok(vec![EnvConfig::preset("mountaincar-ood")?]),
            Benchmark::Aurora => Err(EnvError::UnknownPreset("aurora has no simulator".into())),
        }
    }

    /// Query boxes for disagreement checks. Cartpole uses two boxes, one per
    /// side of the extended platform.
    pub fn query_domain(self) -> Vec<InputBox> {
        match self {
            Benchmark::Cartpole => {
                let rest = [(-2.18, 2.66), (-0.23, 0.23), (-1.3, 1.22)];
                [(-10.0, -2.4), (2.4, 10.0)]
                    .into_iter()
                    .map(|x| {
                        let mut b = vec![x];
                        b.extend_from_slice(&rest);
                        InputBox::from_bounds(&b)
                    })
                    .collect()
            }
            Benchmark::MountainCar => vec![InputBox::from_bounds(&[(-2.4, 0.9), (-0.4, 0.134)])],
            Benchmark::Aurora => {
                let pattern = [(-0.007, 0.007), (1.0, 1.04), (0.7, 8.0)];
                vec![InputBox::from_bounds(
                    &(0..30).map(|i| pattern[i % 3]).collect::<Vec<_>>(),
                )]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartpole_reset_ranges() {
        let cfg = CartpoleConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = cfg.reset(&mut rng);
            assert!(s.iter().all(|v| v.abs() <= 0.05));
        }
        let left = CartpoleConfig::with_platform(-10.0, -2.4);
        let s = left.reset(&mut rng);
        assert!((s[0] + 6.2).abs() <= 0.05);
    }

    #[test]
    fn cartpole_out_of_bounds() {
        let cfg = CartpoleConfig::default();
        let (_, r, end) = cfg.step(&[2.41, 0.0, 0.0, 0.0], 0.0).unwrap();
        assert_eq!(end, Some(Termination::OutOfBounds));
        assert_eq!(r, 0.0);
        assert!(cfg.step(&[0.0; 4], f64::NAN).is_err());
    }

    #[test]
    fn balancing_controller_reaches_cap() {
        // PD controller on angle and position.
        let cfg = CartpoleConfig::default();
        let r = cfg
            .episode(|s| Ok(0.1 * s[0] + 0.3 * s[1] + 8.0 * s[2] + 1.5 * s[3]), 3)
            .unwrap();
        assert_eq!(r.total_reward, 500.0);
        assert_eq!(r.termination, Termination::StepCap);
    }

    #[test]
    fn mountaincar_clips_actions() {
        let cfg = MountainCarConfig::default();
        let s = [-0.5, 0.0];
        assert_eq!(cfg.step(&s, 5.0).unwrap().0, cfg.step(&s, 2.0).unwrap().0);
    }

    #[test]
    fn mountaincar_idle_policy_times_out() {
        let cfg = MountainCarConfig::default();
        let r = cfg.episode(|_| Ok(0.0), 0).unwrap();
        assert_eq!(r.steps, 300);
        assert_eq!(r.termination, Termination::StepCap);
        assert!(r.total_reward <= 0.0);
    }

    #[test]
    fn mountaincar_ood_reset() {
        let cfg = MountainCarConfig::out_of_distribution();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let [p, v] = cfg.reset(&mut rng);
            assert!((0.4..=0.5).contains(&p) && (-0.4..=-0.3).contains(&v));
        }
    }

    #[test]
    fn thresholds_are_inclusive() {
        assert_eq!(Benchmark::MountainCar.classify(90.0), Label::Good);
        assert_eq!(Benchmark::Cartpole.classify(251.0), Label::Good);
        assert_eq!(Benchmark::Cartpole.classify(0.0), Label::Bad);
    }

    #[test]
    fn query_domains() {
        let c = Benchmark::Cartpole.query_domain();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].interval(0).lo, 2.4);
        assert_eq!(Benchmark::Aurora.query_domain()[0].dim(), 30);
    }

    #[test]
    fn floor_keeps_sign() {
        assert_eq!(apply_floor(0.01, 0.2), 0.2);
        assert_eq!(apply_floor(-0.01, 0.2), -0.2);
        assert_eq!(apply_floor(0.0, 0.2), 0.0);
    }
}
