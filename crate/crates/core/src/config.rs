//! Experiment configuration (TOML) and the run manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consolidation::ConsolidationConfig;
use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::stream::{load_csv, make_synthetic, Dataset, NoiseKind, NoiseSpec};

/// Environment variable that replaces the configured output root.
pub const OUTPUT_ROOT_ENV: &str = "AER_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_root: PathBuf,
    /// Train a clean joint reference per seed for the diversity metric.
    pub diversity: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0, 1, 2, 3, 4],
            output_root: PathBuf::from("results"),
            diversity: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// CSV file, relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
    pub tasks: usize,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            classes: 10,
            dims: 16,
            per_class: 500,
            spread: 1.0,
            seed: 0,
            tasks: 5,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Superclass id per class; consecutive pairs when absent.
    pub superclasses: Option<Vec<usize>>,
    /// Combined with each run seed.
    pub seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            rate: 0.4,
            superclasses: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub noise: NoiseSection,
    pub train: TrainConfig,
    pub consolidation: ConsolidationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.data.path = Some(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.run.seeds.is_empty() {
            return bad("run.seeds", "at least one seed is required".into());
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return bad("run.name", "must be a non-empty plain file name".into());
        }
        let d = &self.data;
        if d.source == DataSource::Csv && d.path.is_none() {
            return bad("data.path", "required when source = \"csv\"".into());
        }
        if d.tasks == 0 {
            return bad("data.tasks", "must be >= 1".into());
        }
        if d.source == DataSource::Synthetic && !d.classes.is_multiple_of(d.tasks) {
            return bad("data.tasks", format!("{} classes do not split into {} tasks", d.classes, d.tasks));
        }
        if !(0.0..1.0).contains(&d.test_fraction) || d.test_fraction == 0.0 {
            return bad("data.test_fraction", "must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.noise.rate) {
            return bad("noise.rate", format!("{} outside [0, 1]", self.noise.rate));
        }
        self.train.validate()?;
        self.consolidation.validate()?;
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match self.data.source {
            DataSource::Synthetic => make_synthetic(
                self.data.classes,
                self.data.dims,
                self.data.per_class,
                self.data.spread,
                self.data.seed,
            ),
            DataSource::Csv => load_csv(self.data.path.as_ref().expect("validated")),
        }
    }

    pub fn noise_spec(&self, classes: usize, seed: u64) -> NoiseSpec {
        let superclasses = match self.noise.kind {
            NoiseKind::Symmetric => self.noise.superclasses.clone(),
            NoiseKind::Asymmetric => Some(
                self.noise
                    .superclasses
                    .clone()
                    .unwrap_or_else(|| NoiseSpec::paired_superclasses(classes)),
            ),
        };
        NoiseSpec {
            kind: self.noise.kind,
            rate: self.noise.rate,
            superclasses,
            seed: crate::seed::derive(self.noise.seed, &[seed]),
        }
    }

    /// SHA-256 over the canonical JSON form; independent of key order in
    /// the source file.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex(&Sha256::digest(serde_json::to_string(&value).expect("json").as_bytes()))
    }

    /// Hash of everything except the seed list and output location, shared
    /// by the records of one experiment.
    pub fn key(&self) -> String {
        let mut c = self.clone();
        c.run.seeds.clear();
        c.run.output_root = PathBuf::new();
        c.hash()
    }

    /// Output directory: the environment override, else the configured
    /// root, joined with the run name.
    pub fn output_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.run.output_root.clone());
        root.join(&self.run.name)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Record of one invocation written next to the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub data_seed: u64,
    /// `(run seed, derived noise seed)` pairs.
    pub noise_seeds: Vec<(u64, u64)>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Files written by the run, relative to the output directory.
    pub outputs: Vec<String>,
}

impl ExperimentManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, started_unix: u64) -> Self {
        let classes = cfg.data.classes;
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            data_seed: cfg.data.seed,
            noise_seeds: cfg
                .run
                .seeds
                .iter()
                .map(|&s| (s, cfg.noise_spec(classes, s).seed))
                .collect(),
            started_unix,
            finished_unix: started_unix,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Method;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train.lr, 0.03);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.buffer_size, 500);
        assert_eq!(cfg.train.alpha, 75.0);
        assert_eq!(cfg.consolidation.lambda_u, 0.01);
        assert_eq!(cfg.run.seeds.len(), 5);
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = ExperimentConfig::from_toml(
            "[train]\nmethod = \"er\"\nlr = 0.1\n[noise]\nrate = 0.6\nkind = \"symmetric\"\n",
        )
        .unwrap();
        let b = ExperimentConfig::from_toml(
            "[noise]\nkind = \"symmetric\"\nrate = 0.6\n[train]\nlr = 0.1\nmethod = \"er\"\n",
        )
        .unwrap();
        assert_eq!(a.train.method, Method::Er);
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.train.lr = 0.2;
        assert_ne!(a.hash(), c.hash());
        c = a.clone();
        c.run.seeds = vec![7];
        assert_eq!(a.key(), c.key());
    }

    #[test]
    fn field_level_errors() {
        let e = ExperimentConfig::from_toml("[train]\nalpha = 120\n").unwrap_err();
        assert!(e.to_string().contains("train.alpha"), "{e}");
        let e = ExperimentConfig::from_toml("[train]\nmethod = \"nope\"\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = ExperimentConfig::from_toml("[data]\nsource = \"csv\"\n").unwrap_err();
        assert!(e.to_string().contains("data.path"), "{e}");
    }
}
