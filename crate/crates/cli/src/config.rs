//! Declarative run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use dna_core::attacks::{default_kernel_bank, AttackFamily, AttackSpec, KernelSpec};
use dna_core::classifier::ArchConfig;
use dna_core::decorrelation::DecorConfig;
use dna_core::ensemble::{AdamConfig, TrainConfig};
use dna_core::fourier::{BankParams, RingFilterBank};
use dna_core::signal_io::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "DNA_OUTPUT_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainSection,
    pub decor: DecorConfig,
    pub bank: BankParams,
    pub attack: AttackGrid,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing `record_id,label,path` manifest; synthetic data when unset.
    pub manifest: Option<PathBuf>,
    pub synthetic: SynthConfig,
    pub synth_seed: u64,
    /// Crop/pad length fed to the networks.
    pub length: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: SynthConfig::default(),
            synth_seed: 7,
            length: 512,
            train_fraction: 0.9,
            split_seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: t.adam,
            init_seed: t.init_seed,
            shuffle_seed: t.shuffle_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackGrid {
    pub families: Vec<AttackFamily>,
    /// Budgets in units of the training-set standard deviation (inputs are
    /// z-scored, so these are plain amplitudes).
    pub epsilons: Vec<f64>,
    pub steps: usize,
    /// Step size as a fraction of ε.
    pub alpha_fraction: f64,
    pub kernels: Vec<KernelSpec>,
}

impl Default for AttackGrid {
    fn default() -> Self {
        Self {
            families: vec![AttackFamily::Pgd, AttackFamily::Sap],
            epsilons: vec![0.1, 0.25, 0.5, 1.0, 1.5],
            steps: 20,
            alpha_fraction: 0.1,
            kernels: default_kernel_bank(),
        }
    }
}

impl AttackGrid {
    pub fn spec(&self, family: AttackFamily, epsilon: f64) -> AttackSpec {
        AttackSpec {
            family,
            epsilon,
            alpha: self.alpha_fraction * epsilon,
            steps: self.steps,
            kernels: match family {
                AttackFamily::Pgd => Vec::new(),
                AttackFamily::Sap => self.kernels.clone(),
            },
        }
    }

    /// Every (family, ε) cell in family-major order.
    pub fn cells(&self) -> Vec<AttackSpec> {
        self.families
            .iter()
            .flat_map(|&f| self.epsilons.iter().map(move |&e| self.spec(f, e)))
            .collect()
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            CliError::Config(if path == "." || path.is_empty() {
                msg
            } else {
                format!("{path}: {msg}")
            })
        })
    }

    /// Reads, parses and validates; applies the output-root override.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            cfg.output_dir = PathBuf::from(root);
        }
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.manifest = Some(base.join(m));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: self.train.adam,
            init_seed: self.train.init_seed,
            shuffle_seed: self.train.shuffle_seed,
            decor: self.decor.clone(),
            bank: self.bank,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, e: dna_core::Error| CliError::Config(format!("{key}: {e}"));
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "data.train_fraction: must lie in (0, 1), got {}",
                d.train_fraction
            )));
        }
        if d.length == 0 {
            return Err(CliError::Config("data.length: must be positive".into()));
        }
        if d.length != self.arch.input_length {
            return Err(CliError::Config(format!(
                "arch.input_length: {} differs from data.length {}",
                self.arch.input_length, d.length
            )));
        }
        if d.manifest.is_none() {
            let s = &d.synthetic;
            if !(1..=4).contains(&s.num_classes) || s.records_per_class < 2 || s.length == 0 {
                return Err(CliError::Config(
                    "data.synthetic: needs 1–4 classes, ≥ 2 records per class and a positive length"
                        .into(),
                ));
            }
            if s.num_classes != self.arch.num_classes {
                return Err(CliError::Config(format!(
                    "arch.num_classes: {} differs from data.synthetic.num_classes {}",
                    self.arch.num_classes, s.num_classes
                )));
            }
        }
        self.arch.validate().map_err(|e| bad("arch", e))?;
        self.train_config()
            .validate(self.arch.feature_dim, true)
            .map_err(|e| bad("train", e))?;
        RingFilterBank::for_signal(d.length, self.bank).map_err(|e| bad("bank", e))?;
        if self.attack.families.is_empty() || self.attack.epsilons.is_empty() {
            return Err(CliError::Config(
                "attack: families and epsilons must be non-empty".into(),
            ));
        }
        for spec in self.attack.cells() {
            spec.validate().map_err(|e| bad("attack", e))?;
        }
        Ok(())
    }
}
