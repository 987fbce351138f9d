//! Experiment configuration: one TOML file covering the world, the
//! partition, the model, local training, the federation and the evaluation,
//! plus an optional study grid that expands into several variants.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::{AugmentMode, AugmentSpec, LocalTrainConfig, MiningConfig, NegativeStrategy, PoolRestriction};
use crate::error::{Error, Result};
use crate::federation::{rounds_for_budget, CentralizedConfig, FedVcConfig, FederationConfig};
use crate::hierarchy::{ClusterLevel, DEFAULT_AGGREGATION_INTERVAL, DEFAULT_CLIENTS_PER_CLUSTER};
use crate::model::EmbedderSpec;
use crate::partition::{PartitionSpec, SplitKind};
use crate::synth::WorldSpec;

/// Desk-scale local learning rate for the synthetic worlds.
pub const DESK_LOCAL_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Centralized,
    #[default]
    Federated,
    Hierarchical,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Centralized => "centralized",
            Mode::Federated => "federated",
            Mode::Hierarchical => "hierarchical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    pub level: ClusterLevel,
    pub clients_per_cluster_per_round: usize,
    pub aggregation_interval: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            level: ClusterLevel::City,
            clients_per_cluster_per_round: DEFAULT_CLIENTS_PER_CLUSTER,
            aggregation_interval: DEFAULT_AGGREGATION_INTERVAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub positive_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 5, 10],
            positive_radius: crate::retrieval::DEFAULT_POSITIVE_RADIUS,
        }
    }
}

/// A grid of variants that differ from the base configuration in one knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Study {
    Splits {
        splits: Vec<SplitKind>,
    },
    /// Fixed local iterations under the configured total iteration budget.
    LocalIterations {
        values: Vec<usize>,
        /// Run every value both with and without virtual clients.
        #[serde(default)]
        compare_fedvc: bool,
    },
    Augmentation {
        variants: Vec<AugmentSpec>,
    },
    MiningRestriction {
        /// Also run with the full mining pool.
        #[serde(default)]
        unrestricted: bool,
        variants: Vec<PoolRestriction>,
    },
    Negatives {
        strategies: Vec<NegativeStrategy>,
    },
    AggregationInterval {
        values: Vec<usize>,
    },
}

impl Study {
    pub fn name(&self) -> &'static str {
        match self {
            Study::Splits { .. } => "splits",
            Study::LocalIterations { .. } => "local_iterations",
            Study::Augmentation { .. } => "augmentation",
            Study::MiningRestriction { .. } => "mining_restriction",
            Study::Negatives { .. } => "negatives",
            Study::AggregationInterval { .. } => "aggregation_interval",
        }
    }

    fn size(&self) -> usize {
        match self {
            Study::Splits { splits } => splits.len(),
            Study::LocalIterations { values, compare_fedvc } => values.len() * if *compare_fedvc { 2 } else { 1 },
            Study::Augmentation { variants } => variants.len(),
            Study::MiningRestriction { unrestricted, variants } => variants.len() + usize::from(*unrestricted),
            Study::Negatives { strategies } => strategies.len(),
            Study::AggregationInterval { values } => values.len(),
        }
    }
}

/// One point of a study grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub study: String,
    pub label: String,
    /// The base configuration with this variant's knob applied and no study.
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// One run per seed; each run adds its seed to every named seed below.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Train on this manifest instead of generating `world`.
    pub manifest: Option<PathBuf>,
    /// Use this partition of `manifest` instead of splitting it.
    pub partition_file: Option<PathBuf>,
    /// Cap on concurrently training clients.
    pub workers: Option<usize>,
    pub init_seed: u64,
    pub augment_seed: u64,
    pub world: WorldSpec,
    pub partition: PartitionSpec,
    pub embedder: EmbedderSpec,
    pub mining: MiningConfig,
    pub augment: AugmentSpec,
    pub local: LocalTrainConfig,
    pub federation: FederationConfig,
    pub centralized: CentralizedConfig,
    pub hierarchy: HierarchyConfig,
    pub eval: EvalConfig,
    pub study: Option<Study>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Federated,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            manifest: None,
            partition_file: None,
            workers: None,
            init_seed: 0,
            augment_seed: 0,
            world: WorldSpec::default(),
            partition: PartitionSpec::default(),
            embedder: EmbedderSpec::default(),
            mining: MiningConfig::default(),
            augment: AugmentSpec::default(),
            local: LocalTrainConfig {
                lr: DESK_LOCAL_LR,
                ..LocalTrainConfig::default()
            },
            federation: FederationConfig::default(),
            centralized: CentralizedConfig::default(),
            hierarchy: HierarchyConfig::default(),
            eval: EvalConfig::default(),
            study: None,
        }
    }
}

/// Parses a command-line value as a TOML value, falling back to a bare
/// string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Overrides one key, addressed by its dotted path (`federation.rounds`).
    /// The value is read as TOML, so `3`, `1e-4`, `"random"`, `[0, 1]` and
    /// bare words all work.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = toml::Table::try_from(&*self)?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::config(format!("malformed key {key:?}")));
        }
        let (last, path) = parts.split_last().expect("split yields at least one part");
        let mut table = &mut root;
        for p in path {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("{key}: {p} is not a section")))?;
        }
        table.insert(last.to_string(), parse_value(raw));
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("{key} = {raw}: {}", e.message())))?;
        Ok(())
    }

    /// The named seeds of one run.
    pub fn with_run_seed(&self, run_seed: u64) -> Self {
        let mut c = self.clone();
        c.world.seed = c.world.seed.wrapping_add(run_seed);
        c.partition.seed = c.partition.seed.wrapping_add(run_seed);
        c.init_seed = c.init_seed.wrapping_add(run_seed);
        c.augment_seed = c.augment_seed.wrapping_add(run_seed);
        c.federation.seed = c.federation.seed.wrapping_add(run_seed);
        c.centralized.seed = c.centralized.seed.wrapping_add(run_seed);
        c.local.seed = c.local.seed.wrapping_add(run_seed);
        c
    }

    /// Expands the study grid; a configuration without a study is its own
    /// single variant.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        let mut base = self.clone();
        let Some(study) = base.study.take() else {
            return Ok(vec![Variant {
                study: "base".into(),
                label: "base".into(),
                config: base,
            }]);
        };
        let mut out = Vec::with_capacity(study.size());
        let mut push = |label: String, config: ExperimentConfig| {
            out.push(Variant {
                study: study.name().into(),
                label,
                config,
            })
        };
        match &study {
            Study::Splits { splits } => {
                for &kind in splits {
                    let mut c = base.clone();
                    c.partition.kind = kind;
                    push(kind.as_str().into(), c);
                }
            }
            Study::LocalIterations { values, compare_fedvc } => {
                let total = base
                    .federation
                    .total_iterations
                    .ok_or_else(|| Error::config("a local_iterations study needs federation.total_iterations"))?;
                for &v in values {
                    let mut c = base.clone();
                    c.federation.local_iterations = Some(v);
                    c.federation.rounds = rounds_for_budget(total, v, c.federation.clients_per_round)?;
                    c.federation.fedvc = None;
                    if *compare_fedvc {
                        let mut vc = c.clone();
                        vc.federation.fedvc = Some(base.federation.fedvc.unwrap_or(FedVcConfig { virtual_size: None }));
                        push(format!("i_loc={v} fedavg"), c);
                        push(format!("i_loc={v} fedvc"), vc);
                    } else {
                        push(format!("i_loc={v}"), c);
                    }
                }
            }
            Study::Augmentation { variants } => {
                for a in variants {
                    let mut c = base.clone();
                    c.augment = *a;
                    let label = match a.mode {
                        AugmentMode::None => "none".to_string(),
                        AugmentMode::Uniform => format!("uniform jitter={} crop={}", a.jitter_scale, a.crop_fraction),
                        AugmentMode::ClientSpecific => {
                            format!("client_specific jitter={} crop={}", a.jitter_scale, a.crop_fraction)
                        }
                    };
                    push(label, c);
                }
            }
            Study::MiningRestriction { unrestricted, variants } => {
                if *unrestricted {
                    let mut c = base.clone();
                    c.mining.pool_restriction = None;
                    push("unrestricted".into(), c);
                }
                for r in variants {
                    let mut c = base.clone();
                    c.mining.pool_restriction = Some(*r);
                    push(format!("{} seqs x {} imgs", r.max_sequences, r.images_per_sequence), c);
                }
            }
            Study::Negatives { strategies } => {
                for &s in strategies {
                    let mut c = base.clone();
                    c.mining.negatives = s;
                    let label = match s {
                        NegativeStrategy::Hard => "hard",
                        NegativeStrategy::Random => "random",
                    };
                    push(label.into(), c);
                }
            }
            Study::AggregationInterval { values } => {
                for &v in values {
                    let mut c = base.clone();
                    c.hierarchy.aggregation_interval = v;
                    push(format!("interval={v}"), c);
                }
            }
        }
        Ok(out)
    }

    /// Checks every cross-field constraint of every variant, so a bad
    /// configuration fails before any training starts.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if let Some(study) = &self.study {
            if study.size() == 0 {
                return Err(Error::config(format!("study {} has no variants", study.name())));
            }
            match study {
                Study::LocalIterations { .. } if self.mode == Mode::Centralized => {
                    return Err(Error::config("a local_iterations study needs a federated mode"));
                }
                Study::AggregationInterval { .. } if self.mode != Mode::Hierarchical => {
                    return Err(Error::config("an aggregation_interval study needs mode = \"hierarchical\""));
                }
                _ => {}
            }
        }
        match (&self.manifest, &self.partition_file) {
            (None, Some(_)) => return Err(Error::config("partition_file requires manifest")),
            (Some(m), p) => {
                for f in std::iter::once(m).chain(p) {
                    if !f.is_file() {
                        return Err(Error::config(format!("{} does not exist", f.display())));
                    }
                }
            }
            (None, None) => {}
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be >= 1"));
        }
        for v in self.variants()? {
            v.config.validate_single()?;
        }
        Ok(())
    }

    fn validate_single(&self) -> Result<()> {
        if self.manifest.is_none() {
            self.world.validate()?;
            if self.embedder.input_dim != self.world.feature_dim {
                return Err(Error::config(format!(
                    "embedder.input_dim {} != world.feature_dim {}",
                    self.embedder.input_dim, self.world.feature_dim
                )));
            }
        }
        if self.partition_file.is_none() {
            self.partition.validate()?;
        }
        self.embedder.validate().map_err(|e| Error::config(e.to_string()))?;
        self.mining.validate()?;
        self.augment.validate()?;
        self.local.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::config("eval.ks must be non-empty and every k >= 1"));
        }
        if !(self.eval.positive_radius > 0.0 && self.eval.positive_radius.is_finite()) {
            return Err(Error::config("eval.positive_radius must be > 0"));
        }
        match self.mode {
            Mode::Centralized => {
                if self.centralized.eval_interval == 0 {
                    return Err(Error::config("centralized.eval_interval must be >= 1"));
                }
            }
            Mode::Federated => self.federation.validate()?,
            Mode::Hierarchical => {
                self.federation.validate()?;
                if self.federation.fedvc.is_some() {
                    return Err(Error::config("fedvc is not supported by hierarchical runs"));
                }
                if self.hierarchy.aggregation_interval == 0 || self.hierarchy.clients_per_cluster_per_round == 0 {
                    return Err(Error::config(
                        "hierarchy.aggregation_interval and clients_per_cluster_per_round must be >= 1",
                    ));
                }
            }
        }
        Ok(())
    }
}
