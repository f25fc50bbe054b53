//! The five pipeline commands.
//!
//! Every command reads a resolved [`PipelineConfig`] and writes its results
//! under the output directory. Numeric reports embed the config and carry no
//! run-specific data, so reruns reproduce them byte for byte; cache hits and
//! oracle call counts go to separate `*-run.json` files.

use std::path::{Path, PathBuf};

use concord_core::attacks::{classify_alignment, Alignment};
use concord_core::envs::{self, Benchmark, Label};
use concord_core::selection::{CountingOracle, Exclusion};
use concord_core::trainer::{make_fixture_set, FixtureConfig, FixtureKind};
use concord_core::{pdt_table, select, Category, DecisionOracle, DistanceSpec, Network, PdtTable, SelectionTrace};
use serde::{Deserialize, Serialize};

use crate::config::{ModelSource, PipelineConfig};
use crate::store::{self, KeyHasher};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub kind: FixtureKind,
    pub seed: u64,
    pub in_dist_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<f64>,
}

/// Written next to trained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub key: String,
    pub benchmark: Benchmark,
    pub seed: u64,
    pub n_good: usize,
    pub n_bad: usize,
    pub fixture: FixtureConfig,
    pub models: Vec<ManifestEntry>,
    pub missing_good: usize,
    pub missing_bad: usize,
}

/// Run-specific facts, kept apart from the numeric reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub cache_hit: bool,
    pub oracle_calls: usize,
}

/// A model with the exact bytes it was loaded from.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub network: Network,
    pub bytes: Vec<u8>,
}

fn models_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output.join("models")
}

fn train_key(cfg: &PipelineConfig, n_good: usize, n_bad: usize, fixture: &FixtureConfig) -> String {
    KeyHasher::default()
        .json("benchmark", &cfg.benchmark)
        .json("seed", &cfg.seed)
        .json("counts", &(n_good, n_bad))
        .json("fixture", fixture)
        .finish()
}

/// Trains the fixture set unless `<output>/models` already holds one for the
/// same settings. Returns the manifest and whether it was reused.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<(Manifest, bool), CliError> {
    cfg.validate()?;
    let ModelSource::Train { n_good, n_bad, .. } = cfg.models else {
        return Err(CliError::Config("train needs a \"train\" model source".into()));
    };
    let fixture = cfg.fixture_config().expect("train source");
    let key = train_key(cfg, n_good, n_bad, &fixture);
    let dir = models_dir(cfg);
    let manifest_path = dir.join("manifest.json");
    if let Some(m) = store::read_cached::<Manifest>(&manifest_path) {
        if m.key == key && m.models.iter().all(|e| dir.join(&e.file).is_file()) {
            return Ok((m, true));
        }
    }
    let set = make_fixture_set(cfg.benchmark, n_good, n_bad, cfg.seed, &fixture)?;
    let mut entries = Vec::with_capacity(set.fixtures.len());
    for f in &set.fixtures {
        let file = format!("{}.json", f.network.name());
        store::write_atomic(&dir.join(&file), f.network.to_json_string().as_bytes())?;
        entries.push(ManifestEntry {
            id: f.network.name().to_string(),
            file,
            kind: f.kind,
            seed: f.seed,
            in_dist_reward: f.in_dist_reward,
            divergence: f.divergence,
        });
    }
    let manifest = Manifest {
        key,
        benchmark: cfg.benchmark,
        seed: cfg.seed,
        n_good,
        n_bad,
        fixture,
        models: entries,
        missing_good: set.missing_good,
        missing_bad: set.missing_bad,
    };
    store::write_json(&manifest_path, &manifest)?;
    Ok((manifest, false))
}

fn load_file(path: &Path) -> Result<LoadedModel, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let network = Network::from_json_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    Ok(LoadedModel { network, bytes })
}

/// Loads the configured models, training them first if needed.
pub fn load_models(cfg: &PipelineConfig) -> Result<Vec<LoadedModel>, CliError> {
    cfg.validate()?;
    let models = match &cfg.models {
        ModelSource::Paths(paths) => paths.iter().map(|p| load_file(p)).collect::<Result<Vec<_>, _>>()?,
        ModelSource::Train { .. } => {
            let (manifest, _) = cmd_train(cfg)?;
            let dir = models_dir(cfg);
            manifest
                .models
                .iter()
                .map(|e| load_file(&dir.join(&e.file)))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let dim = cfg.boxes()[0].dim();
    for m in &models {
        if m.network.input_dim() != dim {
            return Err(CliError::Config(format!(
                "model {} takes {} inputs, the query boxes have {dim}",
                m.network.name(),
                m.network.input_dim()
            )));
        }
    }
    Ok(models)
}

fn pdt_key(cfg: &PipelineConfig, models: &[LoadedModel], oracle: &dyn DecisionOracle) -> String {
    let mut h = KeyHasher::default();
    for m in models {
        h.part("id", m.network.name().as_bytes()).part("model", &m.bytes);
    }
    h.json("distance", &cfg.distance)
        .json("boxes", &cfg.boxes())
        .json("epsilon", &cfg.selection.epsilon)
        .json("m", &cfg.selection.m)
        .part("oracle", oracle.id().as_bytes())
        .finish()
}

/// PDT table for `models` under `oracle`, from the cache when possible.
pub fn pdt_with(
    cfg: &PipelineConfig,
    models: &[LoadedModel],
    oracle: &dyn DecisionOracle,
) -> Result<(PdtTable, RunStats), CliError> {
    let key = pdt_key(cfg, models, oracle);
    let path = cfg.output.join("cache").join(format!("pdt-{key}.json"));
    if let Some(table) = store::read_cached::<PdtTable>(&path) {
        return Ok((
            table,
            RunStats {
                cache_hit: true,
                oracle_calls: 0,
            },
        ));
    }
    let counting = CountingOracle::new(oracle);
    let nets: Vec<Network> = models.iter().map(|m| m.network.clone()).collect();
    let table = pdt_table(
        &nets,
        &cfg.distance,
        &cfg.boxes(),
        cfg.selection.m,
        cfg.selection.epsilon,
        &counting,
    )?;
    store::write_json(&path, &table)?;
    Ok((
        table,
        RunStats {
            cache_hit: false,
            oracle_calls: counting.calls(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdtReport {
    pub config: PipelineConfig,
    pub seed: u64,
    pub oracle: String,
    pub table: PdtTable,
}

pub fn cmd_pdt(cfg: &PipelineConfig) -> Result<(PdtReport, RunStats), CliError> {
    let models = load_models(cfg)?;
    let oracle = cfg.oracle();
    let (table, stats) = pdt_with(cfg, &models, oracle.as_ref())?;
    let report = PdtReport {
        config: cfg.clone(),
        seed: cfg.seed,
        oracle: oracle.id(),
        table,
    };
    store::write_json(&cfg.output.join("pdt.json"), &report)?;
    store::write_json(&cfg.output.join("pdt-run.json"), &stats)?;
    Ok((report, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectReport {
    pub config: PipelineConfig,
    pub seed: u64,
    pub oracle: String,
    pub survivors: Vec<String>,
    pub trace: SelectionTrace,
}

pub fn cmd_select(cfg: &PipelineConfig) -> Result<SelectReport, CliError> {
    let (pdt, _) = cmd_pdt(cfg)?;
    let (survivors, trace) = select(&pdt.table.model_ids, &cfg.selection, &pdt.table)?;
    let report = SelectReport {
        config: cfg.clone(),
        seed: cfg.seed,
        oracle: pdt.oracle,
        survivors,
        trace,
    };
    store::write_json(&cfg.output.join("selection.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub model_id: String,
    pub in_dist_mean: f64,
    pub ood_mean: f64,
    pub label: Label,
}

fn label_name(label: Label) -> &'static str {
    match label {
        Label::Good => "good",
        Label::Bad => "bad",
    }
}

pub fn rewards_csv(rows: &[RewardRow]) -> String {
    let mut out = String::from("model_id,in_dist_mean,ood_mean,label\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.model_id,
            r.in_dist_mean,
            r.ood_mean,
            label_name(r.label)
        ));
    }
    out
}

/// Parses the rewards table written by `eval`.
pub fn parse_rewards_csv(text: &str) -> Result<Vec<RewardRow>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some("model_id,in_dist_mean,ood_mean,label") {
        return Err(CliError::Schema("rewards table header".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || CliError::Schema(format!("rewards row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(RewardRow {
                model_id: f[0].to_string(),
                in_dist_mean: f[1].parse().map_err(|_| bad())?,
                ood_mean: f[2].parse().map_err(|_| bad())?,
                label: match f[3] {
                    "good" => Label::Good,
                    "bad" => Label::Bad,
                    _ => return Err(bad()),
                },
            })
        })
        .collect()
}

/// Mean in-distribution and OOD rewards per model, labelled by the OOD mean.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<Vec<RewardRow>, CliError> {
    let models = load_models(cfg)?;
    let indist = cfg.benchmark.in_distribution()?;
    let ood = cfg.benchmark.out_of_distribution()?;
    let episodes = cfg.eval.episodes;
    let mut rows = Vec::with_capacity(models.len());
    for m in &models {
        let net = &m.network;
        let in_dist_mean = envs::rollout(net, &indist, episodes, envs::episode_seed(cfg.seed, 1))?.mean_reward;
        let ood_mean = envs::mean_over(net, &ood, episodes, envs::episode_seed(cfg.seed, 2))?;
        rows.push(RewardRow {
            model_id: net.name().to_string(),
            in_dist_mean,
            ood_mean,
            label: cfg.benchmark.classify(ood_mean),
        });
    }
    store::write_atomic(&cfg.output.join("rewards.csv"), rewards_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub first: String,
    pub second: String,
    pub verifier_pdt: f64,
    pub attack_pdt: f64,
    /// Per query box, the categories each side found populated. Empty for L1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verifier_categories: Vec<Vec<Category>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attack_categories: Vec<Vec<Category>>,
    pub alignment: Alignment,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentCounts {
    pub aligned: usize,
    pub untightened: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config: PipelineConfig,
    pub seed: u64,
    pub verifier: String,
    pub attack: String,
    pub rows: Vec<CompareRow>,
    pub counts: AlignmentCounts,
}

fn populated(table: &PdtTable, a: &str, b: &str, categories: &[Category], boxes: usize) -> Vec<Vec<Category>> {
    (0..boxes)
        .map(|k| {
            let excluded: Vec<Category> = table
                .exclusions
                .iter()
                .filter(|e: &&Exclusion| e.first == a && e.second == b && e.domain_index == k)
                .flat_map(|e| e.excluded.iter().copied())
                .collect();
            categories.iter().filter(|c| !excluded.contains(c)).copied().collect()
        })
        .collect()
}

/// Runs the verifier and the configured attack on every pair and classifies
/// each pair's agreement.
pub fn cmd_compare(cfg: &PipelineConfig) -> Result<CompareReport, CliError> {
    let models = load_models(cfg)?;
    let verifier = cfg.verifier();
    let attacker = cfg.attacker();
    let (vt, _) = pdt_with(cfg, &models, &verifier)?;
    let (at, _) = pdt_with(cfg, &models, &attacker)?;
    let boxes = cfg.boxes().len();
    let categories = match &cfg.distance {
        DistanceSpec::L1 => Vec::new(),
        DistanceSpec::CDistanceMin { categories } => categories.clone(),
    };
    let mut rows = Vec::new();
    let mut counts = AlignmentCounts::default();
    let ids = &vt.model_ids;
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let (a, b) = (&ids[i], &ids[j]);
            let (vc, ac) = if categories.is_empty() {
                (Vec::new(), Vec::new())
            } else {
                (
                    populated(&vt, a, b, &categories, boxes),
                    populated(&at, a, b, &categories, boxes),
                )
            };
            let (v, t) = (vt.values[i][j], at.values[i][j]);
            let alignment = if vc != ac {
                Alignment::Failed
            } else {
                classify_alignment(v, t, &[], &[])
            };
            match alignment {
                Alignment::Aligned => counts.aligned += 1,
                Alignment::Untightened => counts.untightened += 1,
                Alignment::Failed => counts.failed += 1,
            }
            rows.push(CompareRow {
                first: a.clone(),
                second: b.clone(),
                verifier_pdt: v,
                attack_pdt: t,
                verifier_categories: vc,
                attack_categories: ac,
                alignment,
            });
        }
    }
    let report = CompareReport {
        config: cfg.clone(),
        seed: cfg.seed,
        verifier: verifier.id(),
        attack: attacker.id(),
        rows,
        counts,
    };
    store::write_json(&cfg.output.join("compare.json"), &report)?;
    Ok(report)
}
