//! Gradient attacks used as incomplete stand-ins for the verifier.
//!
//! Each attack searches for an input maximizing the output distance of a
//! concatenated pair. An attack can only under-report: every value it returns
//! is achieved by the point it returns. Wrapped as a [`DecisionOracle`], an
//! attack answers SAT when it finds a point at distance `>= alpha` and UNSAT
//! otherwise, which is unsound in general.
//!
//! Step sizes are given as fractions of each coordinate's box width, so one
//! configuration works across domains of very different scales.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distance::{Category, DistanceSpec};
use crate::domain::InputBox;
use crate::network::Network;
use crate::selection::DecisionOracle;
use crate::verifier::{Query, Verdict, VerifyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    ConstrainedPgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Step as a fraction of each coordinate's box width. `None` picks 0.5 for
    /// FGSM and 0.02 for the iterative attacks.
    pub step_size: Option<f64>,
    /// PGD steps, or outer rounds of the constrained attack.
    pub iterations: usize,
    pub x_iterations: usize,
    pub lambda_iterations: usize,
    pub lambda_step: f64,
    /// Use `sign(gradient)` instead of the raw gradient.
    pub signed: bool,
    /// Extra uniformly drawn starting points after the box midpoint.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Pgd,
            step_size: None,
            iterations: 100,
            x_iterations: 5,
            lambda_iterations: 5,
            lambda_step: 1.0,
            signed: true,
            restarts: 4,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(match self.kind {
            AttackKind::Fgsm => 0.5,
            _ => 0.02,
        })
    }

    pub fn validate(&self) -> Result<(), VerifyError> {
        let step = self.step();
        let ok = step.is_finite()
            && step >= 0.0
            && self.lambda_step.is_finite()
            && self.lambda_step > 0.0
            && (self.kind == AttackKind::Fgsm || self.iterations > 0)
            && (self.kind != AttackKind::ConstrainedPgd || (self.x_iterations > 0 && self.lambda_iterations > 0));
        if ok {
            Ok(())
        } else {
            Err(VerifyError::InvalidQuery(format!("invalid attack settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

/// A scalar function of the input with an (almost everywhere) gradient.
pub trait AttackObjective {
    fn value(&self, x: &[f64]) -> f64;
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `sum_k |y[k] - y[K + k]|` over the outputs of a concatenated pair.
pub struct PairL1<'a> {
    pub pair: &'a Network,
}

impl AttackObjective for PairL1<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let y = self.pair.forward(x).expect("attack points have the pair's input dimension");
        let k = y.len() / 2;
        y[..k].iter().zip(&y[k..]).map(|(a, b)| (a - b).abs()).sum()
    }

    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let y = self.pair.forward(x).expect("attack points have the pair's input dimension");
        let k = y.len() / 2;
        let mut cot = vec![0.0; y.len()];
        let mut v = 0.0;
        for j in 0..k {
            let d = y[j] - y[k + j];
            v += d.abs();
            cot[j] = sign(d);
            cot[k + j] = -sign(d);
        }
        let (_, g) = self.pair.vjp(x, &cot).expect("dimension checked");
        (v, g)
    }
}

/// Any objective, negated. Lets the maximizers minimize.
struct Negated<'a>(&'a dyn AttackObjective);

impl AttackObjective for Negated<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        -self.0.value(x)
    }
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (v, g) = self.0.value_grad(x);
        (-v, g.into_iter().map(|c| -c).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub point: Vec<f64>,
    pub value: f64,
}

fn ascent_step(x: &mut [f64], grad: &[f64], widths: &[f64], step: f64, signed: bool, domain: &InputBox) {
    for ((xi, g), w) in x.iter_mut().zip(grad).zip(widths) {
        if *g != 0.0 {
            *xi += step * w * if signed { sign(*g) } else { *g };
        }
    }
    domain.project(x);
}

/// One signed step from the box midpoint; returns the better of the midpoint
/// and the stepped point.
pub fn fgsm(objective: &dyn AttackObjective, domain: &InputBox, cfg: &AttackConfig) -> AttackResult {
    let x0 = domain.center();
    let (v0, g) = objective.value_grad(&x0);
    let mut x = x0.clone();
    let widths = domain.widths();
    // sign(0) = +1 here: a flat coordinate still moves.
    for ((xi, gi), w) in x.iter_mut().zip(&g).zip(&widths) {
        *xi += cfg.step() * w * sign(*gi);
    }
    domain.project(&mut x);
    let v = objective.value(&x);
    if v > v0 {
        AttackResult { point: x, value: v }
    } else {
        AttackResult { point: x0, value: v0 }
    }
}

fn starts(domain: &InputBox, cfg: &AttackConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    std::iter::once(domain.center())
        .chain((0..cfg.restarts).map(|_| domain.sample(&mut rng)))
        .collect()
}

/// Projected gradient ascent (or descent) from the midpoint and
/// `cfg.restarts` random points, keeping the best iterate seen.
pub fn pgd(objective: &dyn AttackObjective, domain: &InputBox, cfg: &AttackConfig, direction: Direction) -> AttackResult {
    let neg = Negated(objective);
    let obj: &dyn AttackObjective = match direction {
        Direction::Maximize => objective,
        Direction::Minimize => &neg,
    };
    let widths = domain.widths();
    let mut best: Option<AttackResult> = None;
    for mut x in starts(domain, cfg) {
        for t in 0..=cfg.iterations {
            let (v, g) = obj.value_grad(&x);
            if best.as_ref().is_none_or(|b| v > b.value) {
                best = Some(AttackResult {
                    point: x.clone(),
                    value: v,
                });
            }
            if t < cfg.iterations {
                ascent_step(&mut x, &g, &widths, cfg.step(), cfg.signed, domain);
            }
        }
    }
    let mut best = best.expect("at least the midpoint is tried");
    if direction == Direction::Minimize {
        best.value = -best.value;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedResult {
    pub point: Vec<f64>,
    pub value: f64,
    /// A point satisfying the category was found; otherwise `value` is 0.
    pub feasible: bool,
}

/// Maximizes `|N1 - N2|` over the inputs whose outputs satisfy `category`,
/// with the sign conditions enforced through Lagrange-multiplier penalties.
pub fn constrained_pgd(pair: &Network, category: Category, domain: &InputBox, cfg: &AttackConfig) -> ConstrainedResult {
    assert_eq!(pair.output_dim(), 2, "category attacks need a scalar-output pair");
    let signs = [category.first, category.second];
    let widths = domain.widths();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |x: &[f64], y: &[f64]| {
        if category.holds(y[0], y[1]) {
            let v = (y[0] - y[1]).abs();
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, x.to_vec()));
            }
        }
    };
    for mut x in starts(domain, cfg) {
        let y = pair.forward(&x).expect("dimension checked by caller");
        consider(&x, &y);
        for _ in 0..cfg.iterations {
            // Multipliers restart from zero and grow while a constraint is violated.
            let y = pair.forward(&x).expect("dimension checked by caller");
            let mut lambda = [0.0f64; 2];
            for _ in 0..cfg.lambda_iterations {
                for (l, (s, v)) in lambda.iter_mut().zip(signs.iter().zip(&y)) {
                    *l = (*l + cfg.lambda_step * s.violation(*v).max(0.0)).max(0.0);
                }
            }
            for _ in 0..cfg.x_iterations {
                let y = pair.forward(&x).expect("dimension checked by caller");
                let d = y[0] - y[1];
                let mut cot = [sign(d), -sign(d)];
                for i in 0..2 {
                    if signs[i].violation(y[i]) > 0.0 {
                        // d/dy of -lambda * violation(y)
                        let dv = match signs[i] {
                            crate::distance::Sign::NonNegative => -1.0,
                            crate::distance::Sign::NonPositive => 1.0,
                        };
                        cot[i] -= lambda[i] * dv;
                    }
                }
                let (_, g) = pair.vjp(&x, &cot).expect("dimension checked by caller");
                ascent_step(&mut x, &g, &widths, cfg.step(), cfg.signed, domain);
                let y = pair.forward(&x).expect("dimension checked by caller");
                consider(&x, &y);
            }
        }
    }
    match best {
        Some((value, point)) => ConstrainedResult {
            point,
            value,
            feasible: true,
        },
        None => ConstrainedResult {
            point: domain.center(),
            value: 0.0,
            feasible: false,
        },
    }
}

/// Best distance an attack finds on one box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub value: f64,
    pub witness: Vec<f64>,
    /// Categories for which a feasible point was found (category distance only).
    pub feasible_categories: Vec<Category>,
    pub l1_fallback: bool,
}

fn l1_attack(pair: &Network, domain: &InputBox, cfg: &AttackConfig) -> AttackResult {
    let obj = PairL1 { pair };
    match cfg.kind {
        AttackKind::Fgsm => fgsm(&obj, domain, cfg),
        AttackKind::Pgd | AttackKind::ConstrainedPgd => pgd(&obj, domain, cfg, Direction::Maximize),
    }
}

/// Runs the configured attack against one distance on one box.
///
/// Category distances always use the constrained attack; categories where it
/// finds no feasible point are left out of the minimum, and if none is
/// feasible the L1 attack is used instead.
pub fn attack_distance(
    pair: &Network,
    distance: &DistanceSpec,
    domain: &InputBox,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, VerifyError> {
    cfg.validate()?;
    domain.check_dim(pair.input_dim())?;
    match distance {
        DistanceSpec::L1 => {
            if !pair.output_dim().is_multiple_of(2) {
                return Err(VerifyError::Objective("L1 needs an even number of pair outputs".into()));
            }
            let r = l1_attack(pair, domain, cfg);
            Ok(AttackOutcome {
                value: r.value,
                witness: r.point,
                feasible_categories: Vec::new(),
                l1_fallback: false,
            })
        }
        DistanceSpec::CDistanceMin { categories } => {
            if pair.output_dim() != 2 {
                return Err(VerifyError::Objective("category distances need scalar outputs".into()));
            }
            let mut feasible = Vec::new();
            let mut best: Option<(f64, Vec<f64>)> = None;
            for &c in categories {
                let r = constrained_pgd(pair, c, domain, cfg);
                if r.feasible {
                    feasible.push(c);
                    if best.as_ref().is_none_or(|(v, _)| r.value < *v) {
                        best = Some((r.value, r.point));
                    }
                }
            }
            Ok(match best {
                Some((value, witness)) => AttackOutcome {
                    value,
                    witness,
                    feasible_categories: feasible,
                    l1_fallback: false,
                },
                None => {
                    let r = l1_attack(pair, domain, cfg);
                    AttackOutcome {
                        value: r.value,
                        witness: r.point,
                        feasible_categories: feasible,
                        l1_fallback: true,
                    }
                }
            })
        }
    }
}

/// An attack wrapped as a decision oracle.
#[derive(Debug, Clone, Default)]
pub struct AttackOracle {
    pub cfg: AttackConfig,
}

impl DecisionOracle for AttackOracle {
    fn id(&self) -> String {
        format!("attack({})", serde_json::to_string(&self.cfg).expect("plain data"))
    }

    fn decide(&self, q: &Query<'_>) -> Result<Verdict, VerifyError> {
        let out = attack_distance(q.pair, q.distance, q.domain, &self.cfg)?;
        Ok(if out.value >= q.alpha {
            Verdict::Sat {
                witness: out.witness,
                value: out.value,
            }
        } else {
            // Not a certificate: only what the attack happened to find.
            Verdict::Unsat {
                bound: out.value,
                tie_break: false,
            }
        })
    }

    fn excluded_categories(
        &self,
        pair: &Network,
        distance: &DistanceSpec,
        domain: &InputBox,
    ) -> Result<Vec<Category>, VerifyError> {
        match distance {
            DistanceSpec::L1 => Ok(Vec::new()),
            DistanceSpec::CDistanceMin { categories } => {
                let out = attack_distance(pair, distance, domain, &self.cfg)?;
                Ok(categories
                    .iter()
                    .filter(|c| !out.feasible_categories.contains(c))
                    .copied()
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Alignment {
    /// Same PDT as the verifier.
    Aligned,
    /// Lower PDT than the verifier: the attack missed the worst input.
    Untightened,
    /// The attack could not reproduce the verifier's set of populated
    /// categories, or overshot the verifier.
    Failed,
}

/// Classifies one pair given both PDTs and, for category distances, the
/// categories each side treated as populated.
pub fn classify_alignment(
    verifier_pdt: f64,
    attack_pdt: f64,
    verifier_categories: &[Category],
    attack_categories: &[Category],
) -> Alignment {
    let same_sets = verifier_categories.len() == attack_categories.len()
        && verifier_categories.iter().all(|c| attack_categories.contains(c));
    if !same_sets || attack_pdt > verifier_pdt + 1e-9 {
        Alignment::Failed
    } else if (attack_pdt - verifier_pdt).abs() <= 1e-9 {
        Alignment::Aligned
    } else {
        Alignment::Untightened
    }
}
