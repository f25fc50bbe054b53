//! Pairwise disagreement thresholds and iterative model selection.
//!
//! The PDT of two networks is the smallest `alpha` for which their outputs
//! stay within `alpha` of each other over the whole domain. It is found by
//! binary search on `alpha` against a decision oracle, which is normally the
//! complete verifier and may be swapped for a gradient attack.
//!
//! Each model's disagreement score (DS) is its mean PDT to the other models
//! still in the pool. Selection repeatedly drops the models with the highest
//! scores until the remaining scores are similar.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{Category, DistanceSpec};
use crate::domain::InputBox;
use crate::network::Network;
use crate::verifier::{self, BabConfig, Query, Verdict, VerifyError};

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("need at least {needed} models, got {got}")]
    TooFewModels { needed: usize, got: usize },
    #[error("model id {0:?} is not in the table")]
    UnknownModel(String),
    #[error("model id {0:?} appears more than once")]
    DuplicateModel(String),
    #[error("invalid selection settings: {0}")]
    Config(String),
}

pub type Result<T, E = SelectionError> = std::result::Result<T, E>;

/// Anything that can answer "do the pair's outputs differ by at least `alpha`
/// somewhere on the domain".
pub trait DecisionOracle: Sync {
    /// Stable identifier, used in cache keys and reports.
    fn id(&self) -> String;

    fn decide(&self, query: &Query<'_>) -> Result<Verdict, VerifyError>;

    /// Categories of a category distance that this oracle treats as empty on
    /// the domain. Only used for reporting.
    fn excluded_categories(
        &self,
        _pair: &Network,
        _distance: &DistanceSpec,
        _domain: &InputBox,
    ) -> Result<Vec<Category>, VerifyError> {
        Ok(Vec::new())
    }
}

/// The complete branch-and-bound verifier as an oracle.
#[derive(Debug, Clone, Default)]
pub struct VerifierOracle {
    pub cfg: BabConfig,
}

impl DecisionOracle for VerifierOracle {
    fn id(&self) -> String {
        format!(
            "verifier(min_box_width={},tie_tolerance={},max_subproblems={})",
            self.cfg.min_box_width, self.cfg.tie_tolerance, self.cfg.max_subproblems
        )
    }

    fn decide(&self, query: &Query<'_>) -> Result<Verdict, VerifyError> {
        verifier::decide(query, &self.cfg)
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
                let live = verifier::nonempty_categories(pair, categories, domain, &self.cfg)?;
                Ok(categories.iter().filter(|c| !live.contains(c)).copied().collect())
            }
        }
    }
}

/// Counts the queries answered by an inner oracle.
pub struct CountingOracle<'a> {
    inner: &'a dyn DecisionOracle,
    calls: AtomicUsize,
}

impl<'a> CountingOracle<'a> {
    pub fn new(inner: &'a dyn DecisionOracle) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl DecisionOracle for CountingOracle<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn decide(&self, query: &Query<'_>) -> Result<Verdict, VerifyError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.decide(query)
    }

    fn excluded_categories(
        &self,
        pair: &Network,
        distance: &DistanceSpec,
        domain: &InputBox,
    ) -> Result<Vec<Category>, VerifyError> {
        self.inner.excluded_categories(pair, distance, domain)
    }
}

fn check_search_range(m: f64, epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && m.is_finite() && epsilon < m) {
        return Err(SelectionError::Config(format!(
            "need 0 < epsilon < M, got epsilon = {epsilon}, M = {m}"
        )));
    }
    Ok(())
}

/// Binary search for the disagreement threshold of `a` and `b` on one box.
///
/// Returns the upper end of the final bracket, so under the complete verifier
/// the outputs provably differ by at most the returned value (unless it is
/// capped at `m`).
pub fn pdt(
    a: &Network,
    b: &Network,
    distance: &DistanceSpec,
    domain: &InputBox,
    m: f64,
    epsilon: f64,
    oracle: &dyn DecisionOracle,
) -> Result<f64> {
    check_search_range(m, epsilon)?;
    let pair = Network::concat(a, b).map_err(VerifyError::from)?;
    pdt_on_pair(&pair, distance, domain, m, epsilon, oracle)
}

fn pdt_on_pair(
    pair: &Network,
    distance: &DistanceSpec,
    domain: &InputBox,
    m: f64,
    epsilon: f64,
    oracle: &dyn DecisionOracle,
) -> Result<f64> {
    let (mut low, mut high) = (0.0, m);
    while high - low > epsilon {
        let alpha = 0.5 * (low + high);
        let q = Query {
            pair,
            distance,
            domain,
            alpha,
        };
        if oracle.decide(&q)?.is_sat() {
            low = alpha;
        } else {
            high = alpha;
        }
    }
    Ok(high)
}

/// PDT over a union of boxes: the maximum of the per-box values.
pub fn pdt_union(
    a: &Network,
    b: &Network,
    distance: &DistanceSpec,
    domains: &[InputBox],
    m: f64,
    epsilon: f64,
    oracle: &dyn DecisionOracle,
) -> Result<f64> {
    check_search_range(m, epsilon)?;
    if domains.is_empty() {
        return Err(SelectionError::Config("no query boxes".into()));
    }
    let pair = Network::concat(a, b).map_err(VerifyError::from)?;
    let mut best: f64 = 0.0;
    for d in domains {
        best = best.max(pdt_on_pair(&pair, distance, d, m, epsilon, oracle)?);
    }
    Ok(best)
}

/// Categories excluded as empty for one pair on one box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub first: String,
    pub second: String,
    pub domain_index: usize,
    pub excluded: Vec<Category>,
    /// All categories were empty, so the pair was scored with L1.
    pub l1_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdtTable {
    pub model_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclusions: Vec<Exclusion>,
}

impl PdtTable {
    /// Builds a table from the strict upper triangle given row by row.
    pub fn from_values(model_ids: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = model_ids.len();
        let mut seen = BTreeSet::new();
        for id in &model_ids {
            if !seen.insert(id) {
                return Err(SelectionError::DuplicateModel(id.clone()));
            }
        }
        let ok = values.len() == n
            && values.iter().all(|r| r.len() == n)
            && (0..n).all(|i| {
                (0..n).all(|j| values[i][j] == values[j][i] && values[i][j] >= 0.0 && values[i][j].is_finite())
            });
        if !ok {
            return Err(SelectionError::Config(
                "PDT matrix must be square, symmetric, finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            model_ids,
            values,
            exclusions: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.model_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.model_ids.iter().position(|m| m == id)
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.values[self.index_of(a)?][self.index_of(b)?])
    }
}

/// Computes the PDT of every unordered pair, in parallel across pairs.
/// Model ids are the network names.
pub fn pdt_table(
    models: &[Network],
    distance: &DistanceSpec,
    domains: &[InputBox],
    m: f64,
    epsilon: f64,
    oracle: &dyn DecisionOracle,
) -> Result<PdtTable> {
    check_search_range(m, epsilon)?;
    if models.len() < 2 {
        return Err(SelectionError::TooFewModels {
            needed: 2,
            got: models.len(),
        });
    }
    if domains.is_empty() {
        return Err(SelectionError::Config("no query boxes".into()));
    }
    let ids: Vec<String> = models.iter().map(|n| n.name().to_string()).collect();
    let mut seen = BTreeSet::new();
    for id in &ids {
        if !seen.insert(id) {
            return Err(SelectionError::DuplicateModel(id.clone()));
        }
    }
    let n = models.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let results: Vec<(f64, Vec<Exclusion>)> = pairs
        .par_iter()
        .map(|&(i, j)| -> Result<_> {
            let pair = Network::concat(&models[i], &models[j]).map_err(VerifyError::from)?;
            let mut value: f64 = 0.0;
            let mut notes = Vec::new();
            for (k, d) in domains.iter().enumerate() {
                value = value.max(pdt_on_pair(&pair, distance, d, m, epsilon, oracle)?);
                if let DistanceSpec::CDistanceMin { categories } = distance {
                    let excluded = oracle.excluded_categories(&pair, distance, d)?;
                    if !excluded.is_empty() {
                        notes.push(Exclusion {
                            first: ids[i].clone(),
                            second: ids[j].clone(),
                            domain_index: k,
                            l1_fallback: excluded.len() == categories.len(),
                            excluded,
                        });
                    }
                }
            }
            Ok((value, notes))
        })
        .collect::<Result<_>>()?;
    let mut values = vec![vec![0.0; n]; n];
    let mut exclusions = Vec::new();
    for (&(i, j), (v, notes)) in pairs.iter().zip(results) {
        values[i][j] = v;
        values[j][i] = v;
        exclusions.extend(notes);
    }
    Ok(PdtTable {
        model_ids: ids,
        values,
        exclusions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub id: String,
    pub ds: f64,
}

/// Mean PDT of each model in `subset` to the other members of `subset`.
/// Scores come back in table order.
pub fn disagreement_scores(table: &PdtTable, subset: &[String]) -> Result<Vec<Score>> {
    if subset.len() < 2 {
        return Err(SelectionError::TooFewModels {
            needed: 2,
            got: subset.len(),
        });
    }
    let mut idx = Vec::with_capacity(subset.len());
    for id in subset {
        let i = table
            .index_of(id)
            .ok_or_else(|| SelectionError::UnknownModel(id.clone()))?;
        if idx.contains(&i) {
            return Err(SelectionError::DuplicateModel(id.clone()));
        }
        idx.push(i);
    }
    idx.sort_unstable();
    let denom = (idx.len() - 1) as f64;
    Ok(idx
        .iter()
        .map(|&i| Score {
            id: table.model_ids[i].clone(),
            ds: idx.iter().filter(|&&j| j != i).map(|&j| table.values[i][j]).sum::<f64>() / denom,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Criterion {
    Percentile,
    Max,
    Combined,
}

/// Positions of `scores` ordered by decreasing DS; equal scores keep their
/// input order.
fn by_decreasing_score(scores: &[Score]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].ds.total_cmp(&scores[a].ds).then(a.cmp(&b)));
    order
}

fn percentile_count(n: usize, p: f64) -> usize {
    // The small slack keeps exact multiples such as 25% of 16 from rounding up.
    ((p / 100.0 * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn max_gap_count(sorted: &[f64]) -> usize {
    let mut best = 0;
    let mut best_gap = f64::NEG_INFINITY;
    for (i, w) in sorted.windows(2).enumerate() {
        let gap = w[0] - w[1];
        if gap > best_gap {
            best_gap = gap;
            best = i;
        }
    }
    if sorted.len() < 2 {
        return 0;
    }
    let threshold = sorted[best];
    sorted.iter().filter(|&&v| v >= threshold).count()
}

/// Ids to remove this iteration. Never removes every model.
pub fn filter_step(scores: &[Score], criterion: Criterion, p: f64) -> Result<Vec<String>> {
    if scores.is_empty() {
        return Err(SelectionError::TooFewModels { needed: 1, got: 0 });
    }
    if !(p > 0.0 && p < 100.0) && criterion != Criterion::Max {
        return Err(SelectionError::Config(format!("percentile p = {p} outside (0, 100)")));
    }
    let order = by_decreasing_score(scores);
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i].ds).collect();
    let n = scores.len();
    let count = match criterion {
        Criterion::Percentile => percentile_count(n, p),
        Criterion::Max => max_gap_count(&sorted),
        Criterion::Combined => percentile_count(n, p).max(max_gap_count(&sorted)),
    };
    Ok(order[..count.min(n - 1)]
        .iter()
        .map(|&i| scores[i].id.clone())
        .collect())
}

fn default_m() -> f64 {
    16.0
}
fn default_epsilon() -> f64 {
    1.0
}
fn default_criterion() -> Criterion {
    Criterion::Combined
}
fn default_p() -> f64 {
    25.0
}
fn default_iterations() -> usize {
    5
}
fn default_absolute() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Upper end of the PDT search range.
    #[serde(default = "default_m")]
    pub m: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Scores count as similar once their spread is at most this; defaults to
    /// `epsilon`.
    #[serde(default)]
    pub similarity_spread: Option<f64>,
    /// Scores count as similar once the largest is at most this.
    #[serde(default = "default_absolute")]
    pub similarity_absolute: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            m: default_m(),
            epsilon: default_epsilon(),
            criterion: default_criterion(),
            p: default_p(),
            iterations: default_iterations(),
            similarity_spread: None,
            similarity_absolute: default_absolute(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        check_search_range(self.m, self.epsilon)?;
        if !(self.p > 0.0 && self.p < 100.0) {
            return Err(SelectionError::Config(format!("p = {} outside (0, 100)", self.p)));
        }
        if self.spread() < 0.0 || self.similarity_absolute < 0.0 {
            return Err(SelectionError::Config("similarity thresholds must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn spread(&self) -> f64 {
        self.similarity_spread.unwrap_or(self.epsilon)
    }

    fn similar(&self, scores: &[Score]) -> bool {
        let max = scores.iter().map(|s| s.ds).fold(f64::NEG_INFINITY, f64::max);
        let min = scores.iter().map(|s| s.ds).fold(f64::INFINITY, f64::min);
        max - min <= self.spread() || max <= self.similarity_absolute
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Fewer than two models left to compare.
    TooFewModels,
    ScoresSimilar,
    /// The criterion selected nothing to remove.
    NothingRemoved,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Pool at the start of the iteration.
    pub survivors: Vec<String>,
    pub scores: Vec<Score>,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub survivors: Vec<String>,
}

impl SelectionTrace {
    /// Iteration (1-based) in which `id` was removed, if it was.
    pub fn removed_at(&self, id: &str) -> Option<usize> {
        self.iterations
            .iter()
            .find(|r| r.removed.iter().any(|x| x == id))
            .map(|r| r.iteration)
    }

    /// Plain-text rendering, one block per iteration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.iterations {
            out.push_str(&format!("iteration {}: {} models\n", r.iteration, r.survivors.len()));
            for s in &r.scores {
                let mark = if r.removed.contains(&s.id) { "  removed" } else { "" };
                out.push_str(&format!("  {:<24} DS {:>10.4}{mark}\n", s.id, s.ds));
            }
        }
        out.push_str(&format!("terminated: {:?}\n", self.termination));
        out.push_str(&format!("survivors: {}\n", self.survivors.join(", ")));
        out
    }
}

/// Iteratively removes the models that disagree most with the rest of the
/// pool.
pub fn select(models: &[String], config: &SelectionConfig, table: &PdtTable) -> Result<(Vec<String>, SelectionTrace)> {
    config.validate()?;
    if models.is_empty() {
        return Err(SelectionError::TooFewModels { needed: 1, got: 0 });
    }
    let mut seen = BTreeSet::new();
    for id in models {
        if table.index_of(id).is_none() {
            return Err(SelectionError::UnknownModel(id.clone()));
        }
        if !seen.insert(id) {
            return Err(SelectionError::DuplicateModel(id.clone()));
        }
    }
    let mut survivors = models.to_vec();
    survivors.sort_by_key(|id| table.index_of(id));
    let mut records = Vec::new();
    let mut termination = Termination::IterationLimit;
    for iteration in 1..=config.iterations {
        if survivors.len() < 2 {
            termination = Termination::TooFewModels;
            break;
        }
        let scores = disagreement_scores(table, &survivors)?;
        if config.similar(&scores) {
            records.push(IterationRecord {
                iteration,
                survivors: survivors.clone(),
                scores,
                removed: Vec::new(),
            });
            termination = Termination::ScoresSimilar;
            break;
        }
        let removed = filter_step(&scores, config.criterion, config.p)?;
        if removed.is_empty() {
            records.push(IterationRecord {
                iteration,
                survivors: survivors.clone(),
                scores,
                removed,
            });
            termination = Termination::NothingRemoved;
            break;
        }
        records.push(IterationRecord {
            iteration,
            survivors: survivors.clone(),
            scores,
            removed: removed.clone(),
        });
        survivors.retain(|id| !removed.contains(id));
    }
    let trace = SelectionTrace {
        iterations: records,
        termination,
        survivors: survivors.clone(),
    };
    Ok((survivors, trace))
}

/// Output-variance ranking over uniform samples from `domain`: each model's
/// mean squared deviation from the ensemble mean output. Lower is more
/// confident.
pub fn uncertainty_rank(models: &[Network], domain: &InputBox, m: usize, seed: u64) -> Result<Vec<Score>> {
    if m < 2 {
        return Err(SelectionError::Config(format!("need at least 2 samples, got {m}")));
    }
    if models.is_empty() {
        return Err(SelectionError::TooFewModels { needed: 1, got: 0 });
    }
    for net in models {
        domain.check_dim(net.input_dim()).map_err(VerifyError::from)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = vec![0.0; models.len()];
    for _ in 0..m {
        let x = domain.sample(&mut rng);
        let outputs: Vec<Vec<f64>> = models
            .iter()
            .map(|n| n.forward(&x).map_err(VerifyError::from))
            .collect::<Result<_, _>>()?;
        let dim = outputs[0].len();
        let mean: Vec<f64> = (0..dim)
            .map(|k| outputs.iter().map(|o| o[k]).sum::<f64>() / outputs.len() as f64)
            .collect();
        for (t, o) in totals.iter_mut().zip(&outputs) {
            *t += o.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(models
        .iter()
        .zip(totals)
        .map(|(n, t)| Score {
            id: n.name().to_string(),
            ds: t / m as f64,
        })
        .collect())
}

/// Lookup from id to DS for a score list.
pub fn score_map(scores: &[Score]) -> HashMap<&str, f64> {
    scores.iter().map(|s| (s.id.as_str(), s.ds)).collect()
}
