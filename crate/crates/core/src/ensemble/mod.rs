//! Sequential training of three-arm ensembles (cor, dec, fcor, fdec),
//! per-arm evaluation, and pairwise feature-correlation reports.

mod adam;
mod metrics;
mod train;

pub use adam::{Adam, AdamConfig};
pub use metrics::{
    correctness_matrix, correlation_report, evaluate_attacked, evaluate_natural, metrics_from,
    CorrelationReport, Metrics, ReportRow,
};
pub use train::{
    arm_id, epoch_batches, train_arm, train_ensemble, train_ensemble_from_base, CurveRow,
    TrainedArm, TrainedEnsemble,
};

use serde::{Deserialize, Serialize};

use crate::decorrelation::DecorConfig;
use crate::error::{Error, Result};
use crate::fourier::BankParams;

pub const NUM_ARMS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    Cor,
    Dec,
    Fcor,
    Fdec,
}

impl EnsembleKind {
    pub const ALL: [EnsembleKind; 4] = [
        EnsembleKind::Cor,
        EnsembleKind::Dec,
        EnsembleKind::Fcor,
        EnsembleKind::Fdec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleKind::Cor => "cor",
            EnsembleKind::Dec => "dec",
            EnsembleKind::Fcor => "fcor",
            EnsembleKind::Fdec => "fdec",
        }
    }

    pub fn filtered(self) -> bool {
        matches!(self, EnsembleKind::Fcor | EnsembleKind::Fdec)
    }

    pub fn decorrelated(self) -> bool {
        matches!(self, EnsembleKind::Dec | EnsembleKind::Fdec)
    }

    /// Arm 0 is the unfiltered cross-entropy base model; auxiliary arms
    /// take bands 0 and 1 when filtered and decorrelate when requested.
    pub fn roles(self) -> [ArmRole; NUM_ARMS] {
        let aux = |band| ArmRole {
            band: self.filtered().then_some(band),
            decorrelate: self.decorrelated(),
        };
        [ArmRole::BASE, aux(0), aux(1)]
    }
}

impl std::fmt::Display for EnsembleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnsembleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnsembleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ensemble kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArmRole {
    /// Filter-bank band feeding this arm, if any.
    pub band: Option<usize>,
    pub decorrelate: bool,
}

impl ArmRole {
    pub const BASE: ArmRole = ArmRole {
        band: None,
        decorrelate: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Minimum batch size; each epoch is split into `⌊n/batch_size⌋`
    /// near-equal batches.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub decor: DecorConfig,
    pub bank: BankParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 80,
            adam: AdamConfig::default(),
            init_seed: 1,
            shuffle_seed: 2,
            decor: DecorConfig::default(),
            bank: BankParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, feature_dim: usize, decorrelating: bool) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if decorrelating {
            self.decor.validate(feature_dim)?;
            // the unprojected regressor is the full feature layer
            let need = self.decor.r.max(feature_dim) + 1;
            if self.batch_size <= need {
                return Err(Error::Config(format!(
                    "batch_size {} must exceed {need} for an overdetermined feature regression (r = {}, D = {feature_dim})",
                    self.batch_size, self.decor.r
                )));
            }
        }
        Ok(())
    }
}
