use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifelong::{BatchMode, EarlyStop, ParamScope, TrainRegime};
use crate::norm::DomainId;
use crate::optim::OptimizerConfig;
use crate::preproc::DEFAULT_HIST_BINS;
use crate::segnet::SegNetConfig;
use crate::synth::{DomainTransform, PhantomSpec, SplitCounts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    /// Present during initial training.
    Initial,
    /// Arrives later with few labelled volumes.
    New,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: u32,
    pub role: DomainRole,
    /// Initial domain this one was built to resemble most; checked against selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nearest: Option<u32>,
    #[serde(default)]
    pub transform: DomainTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub phantom: PhantomSpec,
    pub domains: Vec<DomainSpec>,
    pub initial_counts: SplitCounts,
    pub new_counts: SplitCounts,
    /// Labelled volumes available for adapting to a new domain, split in halves.
    pub few_shot_volumes: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        let t = |gamma: f64, scale: f64, offset: f64, seed: u64| DomainTransform {
            gamma,
            scale,
            offset,
            bias_amplitude: 0.1,
            bias_scale: 1.2,
            noise_std: 0.02,
            seed,
        };
        Self {
            phantom: PhantomSpec::default(),
            domains: vec![
                DomainSpec { id: 1, role: DomainRole::Initial, nearest: None, transform: t(1.0, 1.0, 0.0, 11) },
                DomainSpec { id: 2, role: DomainRole::Initial, nearest: None, transform: t(1.0, -1.0, 1.1, 12) },
                DomainSpec { id: 3, role: DomainRole::Initial, nearest: None, transform: t(0.5, 1.0, 0.0, 13) },
                DomainSpec { id: 4, role: DomainRole::New, nearest: Some(3), transform: t(0.4, 1.0, 0.9, 14) },
                DomainSpec { id: 5, role: DomainRole::New, nearest: Some(2), transform: t(1.0, -1.0, 2.0, 15) },
            ],
            initial_counts: SplitCounts { train: 30, val: 2, test: 20 },
            new_counts: SplitCounts { train: 20, val: 2, test: 20 },
            few_shot_volumes: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Regimes {
    /// The lifelong network: one-domain batches, per-domain BN sets.
    pub lifelong: TrainRegime,
    /// The fully shared network: mixed batches, one BN set.
    pub shared: TrainRegime,
    /// One network per domain.
    pub dedicated: TrainRegime,
    /// BN-only adaptation to a new domain.
    pub adapt: TrainRegime,
    /// Full fine-tuning of the shared network on a new domain.
    pub finetune: TrainRegime,
}

impl Default for Regimes {
    fn default() -> Self {
        let base = TrainRegime { eval_every: 100, ..TrainRegime::default() };
        Self {
            lifelong: TrainRegime { max_steps: 1200, ..base.clone() },
            shared: TrainRegime { batch_mode: BatchMode::MixedAllDomains, max_steps: 1200, ..base.clone() },
            dedicated: TrainRegime { max_steps: 800, ..base.clone() },
            adapt: TrainRegime {
                scope: ParamScope::BnOnly,
                max_steps: 1000,
                eval_every: 50,
                early_stop: Some(EarlyStop { patience: 5 }),
                optimizer: OptimizerConfig::adam(1e-2),
                ..base.clone()
            },
            finetune: TrainRegime { max_steps: 1000, eval_every: 50, early_stop: Some(EarlyStop { patience: 5 }), ..base },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistEqConfig {
    pub bins: usize,
}

impl Default for HistEqConfig {
    fn default() -> Self {
        Self { bins: DEFAULT_HIST_BINS }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub formats: Vec<ReportFormat>,
    /// Write graymap panels of one test slice per domain.
    pub overlays: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { formats: vec![ReportFormat::Csv, ReportFormat::Json], overlays: true }
    }
}

/// Everything a run needs; serialized verbatim into the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub benchmark: BenchmarkConfig,
    pub network: SegNetConfig,
    pub regimes: Regimes,
    pub histeq: HistEqConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2018,
            benchmark: BenchmarkConfig::default(),
            network: SegNetConfig { enc_channels: vec![8, 16, 32, 64], dec_channels: vec![32, 16, 8], ..SegNetConfig::default() },
            regimes: Regimes::default(),
            histeq: HistEqConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

fn rekey(err: Error, prefix: &str) -> Error {
    match err {
        Error::Parameter { name, reason } => {
            let field = name.split_once('.').map(|(_, f)| f.to_string()).unwrap_or(name);
            Error::Config { key: format!("{prefix}.{field}"), reason }
        }
        Error::Config { key, reason } => {
            let field = key.split_once('.').map(|(_, f)| f.to_string()).unwrap_or(key);
            Error::Config { key: format!("{prefix}.{field}"), reason }
        }
        other => other,
    }
}

impl ExperimentConfig {
    /// Parses a possibly partial document. Keys that are present override the
    /// defaults of [`ExperimentConfig::default`] one leaf at a time.
    pub fn from_toml(text: &str) -> Result<Self> {
        let syntax = |e: toml::de::Error| {
            let key = e.span().map(|s| locate_key(text, s.start)).unwrap_or_default();
            Error::Config { key, reason: e.message().trim().to_string() }
        };
        // typed pass first so unknown keys and type errors point at the user's text
        toml::from_str::<ExperimentConfig>(text).map_err(syntax)?;
        let user: toml::Table = toml::from_str(text).map_err(syntax)?;
        let mut merged = toml::Table::try_from(ExperimentConfig::default()).map_err(|e| Error::Config { key: String::new(), reason: e.to_string() })?;
        merge(&mut merged, user);
        merged.try_into().map_err(|e: toml::de::Error| Error::Config { key: String::new(), reason: e.message().trim().to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { key: String::new(), reason: e.to_string() })
    }

    pub fn domain(&self, id: DomainId) -> Option<&DomainSpec> {
        self.benchmark.domains.iter().find(|d| d.id == id.0)
    }

    pub fn domains_with(&self, role: DomainRole) -> Vec<DomainId> {
        self.benchmark.domains.iter().filter(|d| d.role == role).map(|d| DomainId(d.id)).collect()
    }

    pub fn counts(&self, role: DomainRole) -> SplitCounts {
        match role {
            DomainRole::Initial => self.benchmark.initial_counts,
            DomainRole::New => self.benchmark.new_counts,
        }
    }

    /// Checks every section, reporting the offending key path.
    pub fn validate(&self) -> Result<()> {
        let b = &self.benchmark;
        b.phantom.validate().map_err(|e| rekey(e, "benchmark.phantom"))?;
        self.network.validate()?;
        if self.network.image_size != b.phantom.image_size {
            return Err(Error::config("network.image_size", "must equal benchmark.phantom.image_size"));
        }
        if self.network.num_classes != b.phantom.num_classes() {
            return Err(Error::config("network.num_classes", "must equal benchmark.phantom.num_structures + 1"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, d) in b.domains.iter().enumerate() {
            let key = format!("benchmark.domains[{i}]");
            if d.id == DomainId::SHARED.0 {
                return Err(Error::config(format!("{key}.id"), "id 0 is reserved for the shared BN set"));
            }
            if !seen.insert(d.id) {
                return Err(Error::config(format!("{key}.id"), format!("domain {} listed twice", d.id)));
            }
            d.transform.validate().map_err(|e| rekey(e, &format!("{key}.transform")))?;
        }
        let initial = self.domains_with(DomainRole::Initial);
        if initial.is_empty() {
            return Err(Error::config("benchmark.domains", "need at least one initial domain"));
        }
        for (i, d) in b.domains.iter().enumerate() {
            if let Some(n) = d.nearest {
                if !initial.contains(&DomainId(n)) {
                    return Err(Error::config(format!("benchmark.domains[{i}].nearest"), format!("{n} is not an initial domain")));
                }
            }
        }
        for (name, c) in [("initial_counts", b.initial_counts), ("new_counts", b.new_counts)] {
            if c.train == 0 || c.test == 0 {
                return Err(Error::config(format!("benchmark.{name}"), "train and test need at least one volume"));
            }
        }
        if b.initial_counts.val == 0 {
            return Err(Error::config("benchmark.initial_counts.val", "initial domains need validation volumes"));
        }
        if !self.domains_with(DomainRole::New).is_empty() && (b.few_shot_volumes < 2 || b.few_shot_volumes > b.new_counts.train) {
            return Err(Error::config(
                "benchmark.few_shot_volumes",
                format!("must lie in [2, {}] (new-domain training volumes)", b.new_counts.train),
            ));
        }
        let r = &self.regimes;
        r.lifelong.validate("regimes.lifelong")?;
        r.shared.validate("regimes.shared")?;
        r.dedicated.validate("regimes.dedicated")?;
        r.adapt.validate("regimes.adapt")?;
        r.finetune.validate("regimes.finetune")?;
        if r.lifelong.batch_mode != BatchMode::PerDomainRoundrobin {
            return Err(Error::config("regimes.lifelong.batch_mode", "the lifelong network trains on one-domain batches"));
        }
        if r.shared.batch_mode != BatchMode::MixedAllDomains {
            return Err(Error::config("regimes.shared.batch_mode", "the shared network trains on mixed batches"));
        }
        if r.adapt.scope != ParamScope::BnOnly {
            return Err(Error::config("regimes.adapt.scope", "adaptation trains BN parameters only"));
        }
        if r.adapt.early_stop.is_none() {
            return Err(Error::config("regimes.adapt.early_stop", "adaptation needs early stopping"));
        }
        if r.finetune.early_stop.is_none() {
            return Err(Error::config("regimes.finetune.early_stop", "fine-tuning needs early stopping"));
        }
        if self.histeq.bins < 2 {
            return Err(Error::config("histeq.bins", "need at least two bins"));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Best-effort dotted key path of the TOML entry around byte `offset`.
fn locate_key(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut pos = 0usize;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len();
        if pos > offset {
            break;
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn bad_gamma_names_its_key() {
        let mut cfg = ExperimentConfig::default();
        cfg.benchmark.domains[3].transform.gamma = -1.0;
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "benchmark.domains[3].transform.gamma"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("seed = 1\n[network]\nwidth = 3\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert!(key.starts_with("network"), "{key}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[regimes.dedicated]\nmax_steps = 10\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.regimes.dedicated.max_steps, 10);
        assert_eq!(cfg.regimes.dedicated.eval_every, Regimes::default().dedicated.eval_every);
        assert_eq!(cfg.benchmark, BenchmarkConfig::default());
    }
}
