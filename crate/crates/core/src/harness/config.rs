//! TOML experiment configuration.
//!
//! Unknown keys are rejected, as are keys that do not apply to the selected
//! variant (e.g. `dst` on a backdoor attack).
//!
//! ```toml
//! seed = 7
//! clients = 100
//! per_round = 50
//! rounds = 50
//!
//! [model]
//! kind = "softmax-linear"     # or "mlp" with hidden_dim
//!
//! [train]
//! iterations = 20
//! batch_size = 10
//! learning_rate = 0.1
//!
//! [data]
//! source = "synthetic"        # or "idx" with train_images/train_labels/test_images/test_labels
//! num_classes = 10
//! input_dim = 32
//! per_class = 600
//! test_per_class = 100
//! separation = 6.0
//! spread = 1.0
//!
//! [partition]
//! kind = "iid"                # or "noniid-shards"
//!
//! [attack]
//! malicious = [0]             # or proportion = 0.01
//! kind = "label-flip"
//! src = 1
//! dst = 5
//! scaling = "factor"          # "none" | "factor" | "replacement"
//! factor = 10.0
//! start_accuracy = 0.9        # or start_round = 10
//! report = "always-clear"     # or "frame-honest" with frame_rate
//!
//! [defense]
//! enabled = true
//! submodels = 10              # or submodel_size = 5; non-IID may omit both
//! evaluators = 3
//! max_tasks = 3
//! initial_penalty = 0.5
//! margin = 0.1
//!
//! [dp]
//! clip = 15.0
//! sigma = 0.003
//! apply_to = ["submodels"]
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::attacks::{AttackKind, AttackSpec, ReportStrategy, ScalingSpec, Trigger};
use crate::defense::{AggregationForm, DefenseConfig, DelegationMode, Grouping};
use crate::error::{Error, Result};
use crate::federation::AttackStart;
use crate::harness::data::SyntheticSpec;
use crate::model::{ModelKind, ModelSpec, TrainConfig};
use crate::privacy::DpConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub per_round: usize,
    pub rounds: usize,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub partition: PartitionSection,
    pub attack: Option<AttackSection>,
    pub defense: Option<DefenseSection>,
    pub dp: Option<DpSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub hidden_dim: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: String,
    // synthetic
    pub num_classes: Option<usize>,
    pub input_dim: Option<usize>,
    pub per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub separation: Option<f64>,
    pub spread: Option<f64>,
    pub subclusters: Option<usize>,
    // idx
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub kind: String,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self { kind: "iid".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub malicious: Option<Vec<usize>>,
    pub proportion: Option<f64>,
    pub kind: String,
    pub src: Option<usize>,
    pub dst: Option<usize>,
    pub target: Option<usize>,
    pub trigger_class: Option<usize>,
    pub trigger_feature: Option<usize>,
    pub trigger_threshold: Option<f64>,
    pub augment_copies: Option<usize>,
    pub jitter_scale: Option<f64>,
    pub fraction: Option<f64>,
    #[serde(default = "default_scaling")]
    pub scaling: String,
    pub factor: Option<f64>,
    pub start_round: Option<usize>,
    pub start_accuracy: Option<f64>,
    #[serde(default = "default_report")]
    pub report: String,
    pub frame_rate: Option<f64>,
    /// Attacker-side overrides of the shared training configuration.
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
}

fn default_scaling() -> String {
    "none".into()
}

fn default_report() -> String {
    "always-clear".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    pub submodel_size: Option<usize>,
    pub submodels: Option<usize>,
    #[serde(default = "three")]
    pub evaluators: usize,
    #[serde(default = "three")]
    pub max_tasks: usize,
    #[serde(default = "half")]
    pub initial_penalty: f64,
    #[serde(default = "tenth")]
    pub margin: f64,
    #[serde(default = "one")]
    pub presence_threshold: usize,
    pub delegation: Option<String>,
    #[serde(default = "deltas")]
    pub aggregation: String,
}

fn yes() -> bool {
    true
}
fn three() -> usize {
    3
}
fn half() -> f64 {
    0.5
}
fn tenth() -> f64 {
    0.1
}
fn one() -> usize {
    1
}
fn deltas() -> String {
    "deltas".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub clip: f64,
    pub sigma: f64,
    #[serde(default = "submodels_only")]
    pub apply_to: Vec<String>,
}

fn submodels_only() -> Vec<String> {
    vec!["submodels".into()]
}

/// Where the experiment's data comes from, after validation.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        per_class: usize,
        test_per_class: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Iid,
    NonIidShards,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaliciousSet {
    Ids(Vec<usize>),
    Proportion(f64),
}

/// Attack settings whose trigger may still depend on the data layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackPlan {
    pub malicious: MaliciousSet,
    pub kind: AttackKindPlan,
    pub scaling: ScalingSpec,
    pub start: AttackStart,
    pub report: ReportStrategy,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackKindPlan {
    Ready(AttackKind),
    /// Backdoor whose trigger is the synthetic layout's sub-cluster predicate.
    SyntheticBackdoor {
        class: usize,
        target: usize,
        augment_copies: usize,
        jitter_scale: f64,
    },
}

impl AttackPlan {
    pub fn resolve(&self, trigger_for: impl FnOnce(usize) -> Result<Trigger>) -> Result<AttackSpec> {
        let kind = match self.kind {
            AttackKindPlan::Ready(k) => k,
            AttackKindPlan::SyntheticBackdoor {
                class,
                target,
                augment_copies,
                jitter_scale,
            } => AttackKind::Backdoor {
                trigger: trigger_for(class)?,
                target,
                augment_copies,
                jitter_scale,
            },
        };
        Ok(AttackSpec {
            kind,
            scaling: self.scaling,
        })
    }
}

/// Fully validated configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub seed: u64,
    pub clients: usize,
    pub per_round: usize,
    pub rounds: usize,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataSource,
    pub partition: PartitionKind,
    pub attack: Option<AttackPlan>,
    pub defense: Option<DefenseConfig>,
    pub dp: Option<DpConfig>,
}

fn unused(section: &str, what: &str, present: bool) -> Result<()> {
    if present {
        Err(Error::config(format!("[{section}] key `{what}` does not apply here")))
    } else {
        Ok(())
    }
}

fn required<T>(section: &str, what: &str, v: Option<T>) -> Result<T> {
    v.ok_or_else(|| Error::config(format!("[{section}] requires `{what}`")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Checks every key and cross-field constraint; relative IDX paths are
    /// resolved against `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<Resolved> {
        if self.clients == 0 {
            return Err(Error::config("clients must be positive"));
        }
        if self.per_round == 0 || self.per_round > self.clients {
            return Err(Error::config(format!(
                "per_round = {} must be in [1, clients = {}]",
                self.per_round, self.clients
            )));
        }
        let data = self.resolve_data(base_dir)?;
        let num_classes = match &data {
            DataSource::Synthetic { spec, .. } => spec.num_classes,
            DataSource::Idx { .. } => crate::harness::idx::MNIST_CLASSES,
        };
        let input_dim = match &data {
            DataSource::Synthetic { spec, .. } => spec.input_dim,
            DataSource::Idx { .. } => 28 * 28,
        };
        let kind = match self.model.kind.as_str() {
            "softmax-linear" => {
                unused("model", "hidden_dim", self.model.hidden_dim.is_some())?;
                ModelKind::SoftmaxLinear
            }
            "mlp" => ModelKind::Mlp {
                hidden_dim: required("model", "hidden_dim", self.model.hidden_dim)?,
            },
            other => return Err(Error::config(format!("unknown model kind `{other}`"))),
        };
        let model = ModelSpec {
            kind,
            input_dim,
            num_classes,
        };
        model.validate()?;
        let train = TrainConfig {
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
        };
        if train.batch_size == 0 || !(train.learning_rate > 0.0 && train.learning_rate.is_finite()) {
            return Err(Error::config("[train] batch_size and learning_rate must be positive"));
        }
        let partition = match self.partition.kind.as_str() {
            "iid" => PartitionKind::Iid,
            "noniid-shards" => PartitionKind::NonIidShards,
            other => return Err(Error::config(format!("unknown partition kind `{other}`"))),
        };
        let attack = self
            .attack
            .as_ref()
            .map(|a| resolve_attack(a, self.clients, num_classes, &data))
            .transpose()?;
        let defense = self
            .defense
            .as_ref()
            .filter(|d| d.enabled)
            .map(|d| resolve_defense(d, self.per_round, partition))
            .transpose()?;
        let dp = self.dp.as_ref().map(resolve_dp).transpose()?;
        Ok(Resolved {
            seed: self.seed,
            clients: self.clients,
            per_round: self.per_round,
            rounds: self.rounds,
            model,
            train,
            data,
            partition,
            attack,
            defense,
            dp,
        })
    }

    fn resolve_data(&self, base_dir: &Path) -> Result<DataSource> {
        let d = &self.data;
        match d.source.as_str() {
            "synthetic" => {
                for (k, p) in [
                    ("train_images", d.train_images.is_some()),
                    ("train_labels", d.train_labels.is_some()),
                    ("test_images", d.test_images.is_some()),
                    ("test_labels", d.test_labels.is_some()),
                ] {
                    unused("data", k, p)?;
                }
                let defaults = SyntheticSpec::default();
                let spec = SyntheticSpec {
                    num_classes: d.num_classes.unwrap_or(defaults.num_classes),
                    input_dim: d.input_dim.unwrap_or(defaults.input_dim),
                    separation: d.separation.unwrap_or(defaults.separation),
                    spread: d.spread.unwrap_or(defaults.spread),
                    subclusters: d.subclusters.unwrap_or(defaults.subclusters),
                };
                if spec.num_classes < 2 || spec.input_dim == 0 || spec.subclusters == 0 {
                    return Err(Error::config(
                        "[data] needs num_classes >= 2, input_dim >= 1, subclusters >= 1",
                    ));
                }
                if !(spec.separation > 0.0) || !(spec.spread >= 0.0) {
                    return Err(Error::config("[data] separation must be > 0 and spread >= 0"));
                }
                let per_class = d.per_class.unwrap_or(600);
                let test_per_class = d.test_per_class.unwrap_or(100);
                if per_class == 0 || test_per_class == 0 {
                    return Err(Error::config("[data] per_class and test_per_class must be positive"));
                }
                Ok(DataSource::Synthetic {
                    spec,
                    per_class,
                    test_per_class,
                })
            }
            "idx" => {
                for (k, p) in [
                    ("num_classes", d.num_classes.is_some()),
                    ("input_dim", d.input_dim.is_some()),
                    ("per_class", d.per_class.is_some()),
                    ("test_per_class", d.test_per_class.is_some()),
                    ("separation", d.separation.is_some()),
                    ("spread", d.spread.is_some()),
                    ("subclusters", d.subclusters.is_some()),
                ] {
                    unused("data", k, p)?;
                }
                let path = |k: &str, v: &Option<PathBuf>| -> Result<PathBuf> {
                    let p = required("data", k, v.clone())?;
                    Ok(if p.is_absolute() { p } else { base_dir.join(p) })
                };
                Ok(DataSource::Idx {
                    train_images: path("train_images", &d.train_images)?,
                    train_labels: path("train_labels", &d.train_labels)?,
                    test_images: path("test_images", &d.test_images)?,
                    test_labels: path("test_labels", &d.test_labels)?,
                })
            }
            other => Err(Error::config(format!("unknown data source `{other}`"))),
        }
    }
}

fn resolve_attack(a: &AttackSection, clients: usize, num_classes: usize, data: &DataSource) -> Result<AttackPlan> {
    let malicious = match (&a.malicious, a.proportion) {
        (Some(ids), None) => {
            if let Some(bad) = ids.iter().find(|&&i| i >= clients) {
                return Err(Error::config(format!("malicious client {bad} >= clients = {clients}")));
            }
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ids.len() {
                return Err(Error::config("duplicate malicious client ids"));
            }
            MaliciousSet::Ids(sorted)
        }
        (None, Some(p)) => {
            let count = p * clients as f64;
            if !(0.0..=1.0).contains(&p) || (count - count.round()).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "proportion {p} times {clients} clients is not a whole number of clients"
                )));
            }
            MaliciousSet::Proportion(p)
        }
        _ => return Err(Error::config("[attack] needs exactly one of `malicious` or `proportion`")),
    };
    let kind = match a.kind.as_str() {
        "label-flip" => {
            for (k, p) in [
                ("target", a.target.is_some()),
                ("trigger_class", a.trigger_class.is_some()),
                ("trigger_feature", a.trigger_feature.is_some()),
                ("trigger_threshold", a.trigger_threshold.is_some()),
                ("augment_copies", a.augment_copies.is_some()),
                ("jitter_scale", a.jitter_scale.is_some()),
                ("fraction", a.fraction.is_some()),
            ] {
                unused("attack", k, p)?;
            }
            AttackKindPlan::Ready(AttackKind::LabelFlip {
                src: required("attack", "src", a.src)?,
                dst: required("attack", "dst", a.dst)?,
            })
        }
        "backdoor" => {
            for (k, p) in [
                ("src", a.src.is_some()),
                ("dst", a.dst.is_some()),
                ("fraction", a.fraction.is_some()),
            ] {
                unused("attack", k, p)?;
            }
            let class = required("attack", "trigger_class", a.trigger_class)?;
            let target = required("attack", "target", a.target)?;
            let augment_copies = a.augment_copies.unwrap_or(0);
            let jitter_scale = a.jitter_scale.unwrap_or(0.0);
            match (a.trigger_feature, a.trigger_threshold) {
                (Some(feature), Some(threshold)) => AttackKindPlan::Ready(AttackKind::Backdoor {
                    trigger: Trigger {
                        class,
                        feature,
                        threshold,
                    },
                    target,
                    augment_copies,
                    jitter_scale,
                }),
                (None, None) if matches!(data, DataSource::Synthetic { .. }) => AttackKindPlan::SyntheticBackdoor {
                    class,
                    target,
                    augment_copies,
                    jitter_scale,
                },
                (None, None) => {
                    return Err(Error::config(
                        "[attack] backdoor on IDX data needs trigger_feature and trigger_threshold",
                    ))
                }
                _ => {
                    return Err(Error::config(
                        "[attack] trigger_feature and trigger_threshold go together",
                    ))
                }
            }
        }
        "mislabel" => {
            for (k, p) in [
                ("src", a.src.is_some()),
                ("dst", a.dst.is_some()),
                ("trigger_class", a.trigger_class.is_some()),
                ("trigger_feature", a.trigger_feature.is_some()),
                ("trigger_threshold", a.trigger_threshold.is_some()),
                ("augment_copies", a.augment_copies.is_some()),
                ("jitter_scale", a.jitter_scale.is_some()),
            ] {
                unused("attack", k, p)?;
            }
            AttackKindPlan::Ready(AttackKind::Mislabel {
                fraction: required("attack", "fraction", a.fraction)?,
                target: required("attack", "target", a.target)?,
            })
        }
        other => return Err(Error::config(format!("unknown attack kind `{other}`"))),
    };
    let scaling = match a.scaling.as_str() {
        "none" => {
            unused("attack", "factor", a.factor.is_some())?;
            ScalingSpec::None
        }
        "factor" => ScalingSpec::ScaleByFactor(required("attack", "factor", a.factor)?),
        "replacement" => {
            unused("attack", "factor", a.factor.is_some())?;
            ScalingSpec::FullReplacement
        }
        other => return Err(Error::config(format!("unknown scaling `{other}`"))),
    };
    let start = match (a.start_round, a.start_accuracy) {
        (Some(_), Some(_)) => {
            return Err(Error::config("[attack] give start_round or start_accuracy, not both"))
        }
        (Some(r), None) => AttackStart::Round(r),
        (None, acc) => {
            let acc = acc.unwrap_or(0.9);
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::config("[attack] start_accuracy outside [0, 1]"));
            }
            AttackStart::Accuracy(acc)
        }
    };
    let report = match a.report.as_str() {
        "always-clear" => {
            unused("attack", "frame_rate", a.frame_rate.is_some())?;
            ReportStrategy::AlwaysClear
        }
        "frame-honest" => {
            let frame_rate = required("attack", "frame_rate", a.frame_rate)?;
            if !(0.0..=1.0).contains(&frame_rate) {
                return Err(Error::config("[attack] frame_rate outside [0, 1]"));
            }
            ReportStrategy::FrameHonest { frame_rate }
        }
        other => return Err(Error::config(format!("unknown report strategy `{other}`"))),
    };
    if let Some(lr) = a.learning_rate {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("[attack] learning_rate must be positive"));
        }
    }
    let plan = AttackPlan {
        malicious,
        kind,
        scaling,
        start,
        report,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
    };
    // class ranges and factor checks; the synthetic trigger is filled in later
    plan.resolve(|class| {
        Ok(Trigger {
            class,
            feature: 0,
            threshold: 0.0,
        })
    })?
    .validate(num_classes)?;
    Ok(plan)
}

fn resolve_defense(d: &DefenseSection, k: usize, partition: PartitionKind) -> Result<DefenseConfig> {
    let mode = match d.delegation.as_deref() {
        Some("iid") => DelegationMode::Iid,
        Some("noniid") => DelegationMode::NonIid,
        Some(other) => return Err(Error::config(format!("unknown delegation `{other}`"))),
        None => match partition {
            PartitionKind::Iid => DelegationMode::Iid,
            PartitionKind::NonIidShards => DelegationMode::NonIid,
        },
    };
    let grouping = match (d.submodel_size, d.submodels) {
        (Some(_), Some(_)) => {
            return Err(Error::config("[defense] give submodel_size or submodels, not both"))
        }
        (Some(u), None) => Grouping::SubmodelSize(u),
        (None, Some(n)) => Grouping::SubmodelCount(n),
        (None, None) if mode == DelegationMode::NonIid => Grouping::FromPresence,
        (None, None) => return Err(Error::config("[defense] IID delegation needs submodel_size or submodels")),
    };
    let aggregation = match d.aggregation.as_str() {
        "deltas" => AggregationForm::Deltas,
        "literal" => AggregationForm::Literal,
        other => return Err(Error::config(format!("unknown aggregation `{other}`"))),
    };
    let cfg = DefenseConfig {
        mode,
        grouping,
        evaluators: d.evaluators,
        max_tasks: d.max_tasks,
        initial_penalty: d.initial_penalty,
        margin: d.margin,
        presence_threshold: d.presence_threshold,
        aggregation,
    };
    cfg.validate(k)?;
    Ok(cfg)
}

fn resolve_dp(d: &DpSection) -> Result<DpConfig> {
    let mut cfg = DpConfig {
        clip: d.clip,
        sigma: d.sigma,
        apply_to_submodels: false,
        apply_to_global: false,
    };
    for target in &d.apply_to {
        match target.as_str() {
            "submodels" => cfg.apply_to_submodels = true,
            "global" => cfg.apply_to_global = true,
            other => return Err(Error::config(format!("unknown dp target `{other}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
