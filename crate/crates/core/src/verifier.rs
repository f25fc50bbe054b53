//! Complete branch-and-bound decision procedure over input boxes.
//!
//! Queries have the form "is there an `x` in the box with `objective(x) >= alpha`",
//! where the objective is a function of the outputs of one (usually
//! concatenated) network. The search bisects the box on its relatively widest
//! dimension and prunes subboxes whose interval upper bound falls below
//! `alpha`. Once interval propagation shows every ReLU to be stable on a
//! subbox, the network is affine there and the objective's maximum over the
//! subbox is read off at a vertex, which settles that subbox exactly.
//!
//! A subbox that is still open once it has shrunk below
//! [`BabConfig::min_box_width`] is settled as UNSAT when its upper bound lies
//! within [`BabConfig::tie_tolerance`] of `alpha`; the resulting verdict is
//! flagged with `tie_break`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::bounds::{self, eq_max, eq_min, Symbolic};
use crate::distance::{Category, DistanceSpec};
use crate::domain::{DomainError, InputBox, Interval};
use crate::network::{Network, NetworkError};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("objective does not fit the network: {0}")]
    Objective(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("search budget of {limit} subproblems exhausted")]
    BudgetExhausted { limit: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BabConfig {
    /// Width, as a fraction of the domain width in each dimension, below which
    /// the tie rule may settle an open subbox.
    pub min_box_width: f64,
    pub tie_tolerance: f64,
    pub max_subproblems: usize,
}

impl Default for BabConfig {
    fn default() -> Self {
        Self {
            min_box_width: 1e-4,
            tie_tolerance: 1e-6,
            max_subproblems: 1_000_000,
        }
    }
}

impl BabConfig {
    pub fn validate(&self) -> Result<(), VerifyError> {
        if !(self.min_box_width > 0.0 && self.tie_tolerance > 0.0 && self.max_subproblems > 0) {
            return Err(VerifyError::InvalidQuery(format!(
                "branch-and-bound settings must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Outcome of a decision query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Verdict {
    /// `witness` lies in the domain and scores `value >= alpha`.
    Sat { witness: Vec<f64>, value: f64 },
    /// No point reaches `alpha`; `bound` is a sound upper bound on the
    /// objective over the domain (up to `tie_tolerance` when `tie_break`).
    Unsat { bound: f64, tie_break: bool },
}

impl Verdict {
    pub fn is_sat(&self) -> bool {
        matches!(self, Verdict::Sat { .. })
    }
}

/// Function of a network's outputs that the search maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arg", rename_all = "snake_case")]
pub enum Objective {
    /// One raw output of the network.
    Output(usize),
    /// `sum_k |y[k] - y[K + k]|` for a network with `2K` outputs.
    L1,
    /// `|y[0] - y[1]|`, restricted to outputs satisfying the category.
    Category(Category),
}

impl Objective {
    fn validate(&self, net: &Network) -> Result<(), VerifyError> {
        let out = net.output_dim();
        let ok = match self {
            Objective::Output(i) => *i < out,
            Objective::L1 => out.is_multiple_of(2),
            Objective::Category(_) => out == 2,
        };
        if ok {
            Ok(())
        } else {
            Err(VerifyError::Objective(format!(
                "{self:?} on a network with {out} outputs"
            )))
        }
    }

    /// Objective value at outputs `y`, or `None` outside a category.
    pub fn evaluate(&self, y: &[f64]) -> Option<f64> {
        match self {
            Objective::Output(i) => Some(y[*i]),
            Objective::L1 => {
                let k = y.len() / 2;
                Some(y[..k].iter().zip(&y[k..]).map(|(a, b)| (a - b).abs()).sum())
            }
            Objective::Category(c) => c.holds(y[0], y[1]).then(|| (y[0] - y[1]).abs()),
        }
    }

    /// Upper bound over outputs enclosed by `out`, or `None` when the category
    /// is unsatisfiable there.
    fn upper_bound(&self, out: &[Interval]) -> Option<f64> {
        match self {
            Objective::Output(i) => Some(out[*i].hi),
            Objective::L1 => {
                let k = out.len() / 2;
                Some(out[..k].iter().zip(&out[k..]).map(|(a, b)| diff_magnitude(*a, *b)).sum())
            }
            Objective::Category(c) => {
                let a = c.first.clip(out[0])?;
                let b = c.second.clip(out[1])?;
                Some(diff_magnitude(a, b))
            }
        }
    }
}

/// Largest `|a - b|` over `a` in `x`, `b` in `y`.
fn diff_magnitude(x: Interval, y: Interval) -> f64 {
    (x.hi - y.lo).abs().max((x.lo - y.hi).abs())
}

/// Bracket on the maximum of an objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxBracket {
    pub lower: f64,
    pub upper: f64,
    /// Point achieving `lower`. `None` only for a sign category whose feasible
    /// points were never located although emptiness could not be certified;
    /// then `lower` is 0 and `upper` is below the requested gap.
    pub witness: Option<Vec<f64>>,
}

enum Node {
    Infeasible,
    /// Stable subbox settled exactly: its maximum is attained at `point`.
    Exact { value: f64, point: Vec<f64> },
    Open {
        upper: f64,
        sample: Option<(f64, Vec<f64>)>,
    },
}

struct Pending {
    upper: f64,
    seq: u64,
    region: InputBox,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // Highest bound first, then oldest.
    fn cmp(&self, other: &Self) -> Ordering {
        self.upper
            .total_cmp(&other.upper)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Search<'a> {
    net: &'a Network,
    objective: Objective,
    cfg: &'a BabConfig,
    scale: Vec<f64>,
    sym: Symbolic,
    processed: usize,
    queue: BinaryHeap<Pending>,
    seq: u64,
}

impl<'a> Search<'a> {
    fn new(
        net: &'a Network,
        objective: Objective,
        domain: &InputBox,
        cfg: &'a BabConfig,
    ) -> Result<Self, VerifyError> {
        domain.check_dim(net.input_dim())?;
        objective.validate(net)?;
        cfg.validate()?;
        let scale = domain
            .widths()
            .into_iter()
            .map(|w| if w > 0.0 { w } else { 0.0 })
            .collect();
        Ok(Self {
            net,
            objective,
            cfg,
            scale,
            sym: Symbolic::default(),
            processed: 0,
            queue: BinaryHeap::new(),
            seq: 0,
        })
    }

    fn score(&self, x: &[f64]) -> Option<f64> {
        let y = self.net.forward(x).expect("dimension checked on entry");
        self.objective.evaluate(&y)
    }

    fn push(&mut self, upper: f64, region: InputBox) {
        self.queue.push(Pending {
            upper,
            seq: self.seq,
            region,
        });
        self.seq += 1;
    }

    fn at_min_width(&self, b: &InputBox) -> bool {
        b.widths()
            .iter()
            .zip(&self.scale)
            .all(|(w, s)| *w <= self.cfg.min_box_width * s)
    }

    /// Bisects the dimension with the largest width relative to the domain.
    fn split(&self, b: &InputBox) -> (InputBox, InputBox) {
        let mut best = 0;
        let mut best_ratio = f64::NEG_INFINITY;
        for (i, (w, s)) in b.widths().iter().zip(&self.scale).enumerate() {
            if *s > 0.0 && w / s > best_ratio {
                best = i;
                best_ratio = w / s;
            }
        }
        b.bisect(best)
    }

    fn examine(&mut self, b: &InputBox) -> Result<Node, VerifyError> {
        self.processed += 1;
        if self.processed > self.cfg.max_subproblems {
            return Err(VerifyError::BudgetExhausted {
                limit: self.cfg.max_subproblems,
            });
        }
        let stable = bounds::propagate_symbolic(self.net, b.lower(), b.upper(), &mut self.sym);
        if stable {
            return Ok(self.resolve_stable(b));
        }
        let Some(upper) = self.symbolic_upper(b) else {
            return Ok(Node::Infeasible);
        };
        let center = b.center();
        let sample = self.score(&center).map(|v| (v, center));
        Ok(Node::Open { upper, sample })
    }

    /// Upper bound of the objective from the symbolic output bounds, or
    /// `None` when a category is unsatisfiable on the box.
    fn symbolic_upper(&self, b: &InputBox) -> Option<f64> {
        let (lo, hi) = (b.lower(), b.upper());
        let sym = &self.sym;
        let range = |i: usize| Interval {
            lo: eq_min(sym.lower_eq(i), lo, hi),
            hi: eq_max(sym.upper_eq(i), lo, hi),
        };
        // max over the box of y_i - y_j, keeping the shared dependence on x
        let diff_max = |i: usize, j: usize| {
            let d: Vec<f64> = sym.upper_eq(i).iter().zip(sym.lower_eq(j)).map(|(u, l)| u - l).collect();
            eq_max(&d, lo, hi)
        };
        let pair_max = |i: usize, j: usize| diff_max(i, j).max(diff_max(j, i)).max(0.0);
        match self.objective {
            Objective::Output(i) => Some(range(i).hi),
            Objective::L1 => {
                let k = sym.width() / 2;
                Some((0..k).map(|j| pair_max(j, k + j)).sum())
            }
            Objective::Category(c) => {
                let a = c.first.clip(range(0))?;
                let b = c.second.clip(range(1))?;
                Some(diff_magnitude(a, b).min(pair_max(0, 1)))
            }
        }
    }

    /// Settles a subbox on which every ReLU has a fixed phase.
    fn resolve_stable(&self, b: &InputBox) -> Node {
        let map = AffineMap::from_symbolic(&self.sym);
        let best_vertex = |dirs: &mut dyn Iterator<Item = Vec<f64>>| {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for d in dirs {
                let v = b.vertex_towards(&d);
                if let Some(s) = self.score(&v) {
                    if best.as_ref().is_none_or(|(bv, _)| s > *bv) {
                        best = Some((s, v));
                    }
                }
            }
            best
        };
        match self.objective {
            Objective::Output(i) => {
                let point = b.vertex_towards(map.row(i));
                let value = self.score(&point).expect("outputs are always feasible");
                Node::Exact { value, point }
            }
            Objective::L1 => {
                let k = map.rows / 2;
                if k > 12 {
                    // Too many sign patterns to enumerate; fall back to the interval bound.
                    let upper = self
                        .objective
                        .upper_bound(&map.ranges(b))
                        .expect("L1 is always feasible");
                    let center = b.center();
                    let sample = self.score(&center).map(|v| (v, center));
                    return Node::Open { upper, sample };
                }
                let mut dirs = (0..1usize << k).map(|mask| {
                    let mut d = vec![0.0; map.cols];
                    for j in 0..k {
                        let s = if mask >> j & 1 == 1 { -1.0 } else { 1.0 };
                        for (dc, (a, c)) in d.iter_mut().zip(map.row(j).iter().zip(map.row(k + j))) {
                            *dc += s * (a - c);
                        }
                    }
                    d
                });
                let (value, point) = best_vertex(&mut dirs).expect("L1 is always feasible");
                Node::Exact { value, point }
            }
            Objective::Category(cat) => {
                let ranges = map.ranges(b);
                let (Some(c1), Some(c2)) = (cat.first.clip(ranges[0]), cat.second.clip(ranges[1]))
                else {
                    return Node::Infeasible;
                };
                let diff: Vec<f64> = map.row(0).iter().zip(map.row(1)).map(|(a, c)| a - c).collect();
                let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                let everywhere = c1 == ranges[0] && c2 == ranges[1];
                if everywhere {
                    if let Some((value, point)) = best_vertex(&mut [diff.clone(), neg.clone()].into_iter()) {
                        return Node::Exact { value, point };
                    }
                }
                // Partially feasible: bound with the clipped ranges and probe the
                // vertices that push toward feasibility for a witness.
                let toward = |sign: crate::distance::Sign, row: &[f64]| -> Vec<f64> {
                    let s = match sign {
                        crate::distance::Sign::NonNegative => 1.0,
                        crate::distance::Sign::NonPositive => -1.0,
                    };
                    row.iter().map(|a| s * a).collect()
                };
                let f1 = toward(cat.first, map.row(0));
                let f2 = toward(cat.second, map.row(1));
                let both: Vec<f64> = f1.iter().zip(&f2).map(|(a, c)| a + c).collect();
                let mut probes = [diff, neg, f1, f2, both].into_iter();
                let mut sample = best_vertex(&mut probes);
                let center = b.center();
                if let Some(v) = self.score(&center) {
                    if sample.as_ref().is_none_or(|(s, _)| v > *s) {
                        sample = Some((v, center));
                    }
                }
                Node::Open {
                    upper: diff_magnitude(c1, c2),
                    sample,
                }
            }
        }
    }
}

/// Exact affine form `y = A x + c` of a network on a subbox where its
/// activation pattern is fixed.
struct AffineMap {
    rows: usize,
    cols: usize,
    coef: Vec<f64>,
    offset: Vec<f64>,
}

impl AffineMap {
    /// Reads the map off symbolic bounds computed on a stable box, where the
    /// lower and upper functions coincide.
    fn from_symbolic(sym: &Symbolic) -> AffineMap {
        let rows = sym.width();
        let cols = sym.lower_eq(0).len() - 1;
        let mut coef = Vec::with_capacity(rows * cols);
        let mut offset = Vec::with_capacity(rows);
        for r in 0..rows {
            let eq = sym.lower_eq(r);
            coef.extend_from_slice(&eq[..cols]);
            offset.push(eq[cols]);
        }
        AffineMap {
            rows,
            cols,
            coef,
            offset,
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.coef[r * self.cols..(r + 1) * self.cols]
    }

    /// Exact range of every output over the box.
    fn ranges(&self, b: &InputBox) -> Vec<Interval> {
        (0..self.rows)
            .map(|r| {
                let (mut l, mut h) = (self.offset[r], self.offset[r]);
                for (a, (xl, xh)) in self.row(r).iter().zip(b.lower().iter().zip(b.upper())) {
                    if *a >= 0.0 {
                        l += a * xl;
                        h += a * xh;
                    } else {
                        l += a * xh;
                        h += a * xl;
                    }
                }
                Interval { lo: l, hi: h }
            })
            .collect()
    }
}

/// Decides `exists x in domain: objective(pair(x)) >= alpha`.
pub fn decide_objective(
    pair: &Network,
    objective: &Objective,
    domain: &InputBox,
    alpha: f64,
    cfg: &BabConfig,
) -> Result<Verdict, VerifyError> {
    if !alpha.is_finite() {
        return Err(VerifyError::InvalidQuery(format!("alpha = {alpha}")));
    }
    let mut search = Search::new(pair, *objective, domain, cfg)?;
    let mut bound = f64::NEG_INFINITY;
    let mut tie_break = false;
    let mut fresh = vec![domain.clone()];
    loop {
        for region in fresh.drain(..) {
            match search.examine(&region)? {
                Node::Infeasible => {}
                Node::Exact { value, point } => {
                    if value >= alpha {
                        return Ok(Verdict::Sat {
                            witness: point,
                            value,
                        });
                    }
                    bound = bound.max(value);
                }
                Node::Open { upper, sample } => {
                    if let Some((value, witness)) = sample {
                        if value >= alpha {
                            return Ok(Verdict::Sat { witness, value });
                        }
                    }
                    if upper < alpha {
                        bound = bound.max(upper);
                    } else if upper < alpha + cfg.tie_tolerance && search.at_min_width(&region) {
                        bound = bound.max(upper);
                        tie_break = true;
                    } else {
                        search.push(upper, region);
                    }
                }
            }
        }
        let Some(next) = search.queue.pop() else {
            break;
        };
        let (l, r) = search.split(&next.region);
        fresh.push(l);
        fresh.push(r);
    }
    Ok(Verdict::Unsat {
        bound: if bound.is_finite() { bound } else { 0.0 },
        tie_break,
    })
}

/// Brackets the maximum of `objective` over `domain` to within `gap`.
///
/// Returns `None` when the objective is a sign category that is certified
/// empty on the domain.
pub fn maximize_objective(
    pair: &Network,
    objective: &Objective,
    domain: &InputBox,
    gap: f64,
    cfg: &BabConfig,
) -> Result<Option<MaxBracket>, VerifyError> {
    if !(gap > 0.0) {
        return Err(VerifyError::InvalidQuery(format!("gap = {gap}")));
    }
    let mut search = Search::new(pair, *objective, domain, cfg)?;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut closed = f64::NEG_INFINITY;
    let mut fresh = vec![domain.clone()];
    let offer = |best: &mut Option<(f64, Vec<f64>)>, value: f64, point: Vec<f64>| {
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            *best = Some((value, point));
        }
    };
    loop {
        for region in fresh.drain(..) {
            match search.examine(&region)? {
                Node::Infeasible => {}
                Node::Exact { value, point } => {
                    closed = closed.max(value);
                    offer(&mut best, value, point);
                }
                Node::Open { upper, sample } => {
                    if let Some((value, point)) = sample {
                        offer(&mut best, value, point);
                    }
                    let settled = match &best {
                        Some((b, _)) => upper <= b + gap,
                        None => upper <= gap && search.at_min_width(&region),
                    };
                    if settled {
                        closed = closed.max(upper);
                    } else {
                        search.push(upper, region);
                    }
                }
            }
        }
        let Some(next) = search.queue.pop() else {
            break;
        };
        if let Some((b, _)) = &best {
            if next.upper <= b + gap {
                // Everything still queued is within the gap.
                closed = closed.max(next.upper);
                break;
            }
        }
        let (l, r) = search.split(&next.region);
        fresh.push(l);
        fresh.push(r);
    }
    Ok(match best {
        Some((lower, point)) => Some(MaxBracket {
            lower,
            upper: closed.max(lower),
            witness: Some(point),
        }),
        None if closed.is_finite() => Some(MaxBracket {
            lower: 0.0,
            upper: closed,
            witness: None,
        }),
        None => None,
    })
}

/// A decision query over a concatenated pair `[N1; N2]`.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub pair: &'a Network,
    pub distance: &'a DistanceSpec,
    pub domain: &'a InputBox,
    pub alpha: f64,
}

/// Categories whose feasible set is nonempty on the domain (up to the tie
/// tolerance).
pub fn nonempty_categories(
    pair: &Network,
    categories: &[Category],
    domain: &InputBox,
    cfg: &BabConfig,
) -> Result<Vec<Category>, VerifyError> {
    let mut kept = Vec::new();
    for &c in categories {
        if decide_objective(pair, &Objective::Category(c), domain, 0.0, cfg)?.is_sat() {
            kept.push(c);
        }
    }
    Ok(kept)
}

/// Decides `exists x in domain: d(N1(x), N2(x)) >= alpha`.
///
/// For the category distance, `d >= alpha` holds when every nonempty category
/// reaches `alpha`; the witness reported is the one found for the first
/// category.
pub fn decide(query: &Query<'_>, cfg: &BabConfig) -> Result<Verdict, VerifyError> {
    if !(query.alpha >= 0.0) {
        return Err(VerifyError::InvalidQuery(format!("alpha = {}", query.alpha)));
    }
    let Query {
        pair,
        distance,
        domain,
        alpha,
    } = *query;
    match distance {
        DistanceSpec::L1 => decide_objective(pair, &Objective::L1, domain, alpha, cfg),
        DistanceSpec::CDistanceMin { categories } => {
            let live = nonempty_categories(pair, categories, domain, cfg)?;
            if live.is_empty() {
                return decide_objective(pair, &Objective::L1, domain, alpha, cfg);
            }
            let mut first = None;
            for c in live {
                match decide_objective(pair, &Objective::Category(c), domain, alpha, cfg)? {
                    sat @ Verdict::Sat { .. } => {
                        first.get_or_insert(sat);
                    }
                    unsat => return Ok(unsat),
                }
            }
            Ok(first.expect("at least one live category"))
        }
    }
}

/// Brackets `max_x d(N1(x), N2(x))` over the domain.
pub fn maximize(
    pair: &Network,
    distance: &DistanceSpec,
    domain: &InputBox,
    gap: f64,
    cfg: &BabConfig,
) -> Result<MaxBracket, VerifyError> {
    crate::distance::distance_max(pair, distance, domain, gap, cfg).map(|d| d.bracket)
}
