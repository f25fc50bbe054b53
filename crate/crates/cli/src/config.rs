//! Pipeline configuration, read from one JSON file.

use std::path::{Path, PathBuf};

use concord_core::attacks::{AttackConfig, AttackKind, AttackOracle};
use concord_core::envs::Benchmark;
use concord_core::trainer::FixtureConfig;
use concord_core::{BabConfig, DecisionOracle, DistanceSpec, InputBox, SelectionConfig, VerifierOracle};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where the models come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Network files; the network names are the model ids.
    Paths(Vec<PathBuf>),
    /// Fixture set produced by `train` into `<output>/models`.
    Train {
        n_good: usize,
        n_bad: usize,
        /// Defaults to the benchmark's fixture settings.
        #[serde(default)]
        fixture: Option<FixtureConfig>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainSource {
    /// The benchmark's query boxes.
    Preset,
    Boxes(Vec<InputBox>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleChoice {
    Verifier,
    Fgsm,
    Pgd,
    ConstrainedPgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 10 }
    }
}

fn default_domain() -> DomainSource {
    DomainSource::Preset
}
fn default_distance() -> DistanceSpec {
    DistanceSpec::L1
}
fn default_oracle() -> OracleChoice {
    OracleChoice::Verifier
}
fn default_output() -> PathBuf {
    PathBuf::from("concord-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub benchmark: Benchmark,
    pub models: ModelSource,
    #[serde(default = "default_distance")]
    pub distance: DistanceSpec,
    #[serde(default = "default_domain")]
    pub domain: DomainSource,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default = "default_oracle")]
    pub oracle: OracleChoice,
    /// Attack settings; `kind` is overridden by the oracle choice. `compare`
    /// uses them with the kind given here when the oracle is the verifier.
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub bab: BabConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json_str(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Schema(format!("pipeline config: {e}")))
    }

    /// Reads a config; relative model paths are resolved against the
    /// config's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json_str(&text)?;
        if let ModelSource::Paths(paths) = &mut cfg.models {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in paths.iter_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.selection.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.bab.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.attack_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.episodes == 0 {
            return Err(CliError::Config("eval.episodes must be positive".into()));
        }
        match &self.models {
            ModelSource::Paths(p) if p.len() < 2 => {
                return Err(CliError::Config(format!("need at least 2 model files, got {}", p.len())))
            }
            ModelSource::Train { n_good, .. } if *n_good < 2 => {
                return Err(CliError::Config(format!("need at least 2 good policies, got {n_good}")))
            }
            _ => {}
        }
        let boxes = self.boxes();
        if boxes.is_empty() {
            return Err(CliError::Config("no query boxes".into()));
        }
        let dim = boxes[0].dim();
        if boxes.iter().any(|b| b.dim() != dim) {
            return Err(CliError::Config("query boxes differ in dimension".into()));
        }
        Ok(())
    }

    pub fn boxes(&self) -> Vec<InputBox> {
        match &self.domain {
            DomainSource::Preset => self.benchmark.query_domain(),
            DomainSource::Boxes(b) => b.clone(),
        }
    }

    pub fn fixture_config(&self) -> Option<FixtureConfig> {
        match &self.models {
            ModelSource::Train { fixture, .. } => {
                Some(fixture.clone().unwrap_or_else(|| FixtureConfig::for_benchmark(self.benchmark)))
            }
            ModelSource::Paths(_) => None,
        }
    }

    /// Attack settings with the kind implied by the oracle choice.
    pub fn attack_config(&self) -> AttackConfig {
        let kind = match self.oracle {
            OracleChoice::Verifier => self.attack.kind,
            OracleChoice::Fgsm => AttackKind::Fgsm,
            OracleChoice::Pgd => AttackKind::Pgd,
            OracleChoice::ConstrainedPgd => AttackKind::ConstrainedPgd,
        };
        AttackConfig {
            kind,
            ..self.attack.clone()
        }
    }

    pub fn oracle(&self) -> Box<dyn DecisionOracle> {
        match self.oracle {
            OracleChoice::Verifier => Box::new(self.verifier()),
            _ => Box::new(self.attacker()),
        }
    }

    pub fn verifier(&self) -> VerifierOracle {
        VerifierOracle { cfg: self.bab.clone() }
    }

    pub fn attacker(&self) -> AttackOracle {
        AttackOracle {
            cfg: self.attack_config(),
        }
    }
}
