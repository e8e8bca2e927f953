//! On-disk layout of datasets, ensembles and attacked sets.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use dna_core::attacks::AttackedSet;
use dna_core::classifier::ClassifierParams;
use dna_core::decorrelation::FeatureCache;
use dna_core::ensemble::{arm_id, CurveRow, EnsembleKind, TrainedArm, TrainedEnsemble, NUM_ARMS};
use dna_core::fourier::{BandFilter, RingFilterBank};
use dna_core::signal_io::{load_dataset, preprocess_split, read_split, Dataset};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.csv";
pub const SPLIT: &str = "split.csv";
pub const ENSEMBLE_META: &str = "ensemble.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";

pub fn params_path(dir: &Path, arm: usize) -> PathBuf {
    dir.join(format!("arm{arm}.params"))
}

pub fn cache_path(dir: &Path, arm: usize) -> PathBuf {
    dir.join(format!("arm{arm}.cache"))
}

pub fn curve_path(dir: &Path, arm: usize) -> PathBuf {
    dir.join(format!("arm{arm}_curve.csv"))
}

/// Directory name of one attack grid cell, e.g. `sap_eps0.5`.
pub fn cell_dir_name(family: &str, epsilon: f64) -> String {
    format!("{family}_eps{epsilon}")
}

/// Loads the written dataset and its split, preprocessed with train-only
/// statistics.
pub fn load_split_data(data_dir: &Path, cfg: &RunConfig) -> anyhow::Result<(Dataset, Dataset)> {
    let manifest = data_dir.join(MANIFEST);
    let ds = load_dataset(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let split = read_split(&ds, &data_dir.join(SPLIT))
        .with_context(|| format!("reading {}", data_dir.join(SPLIT).display()))?;
    let (tr, te) = (ds.subset(&split.train), ds.subset(&split.test));
    if ds.num_classes != cfg.arch.num_classes {
        bail!(
            "dataset has {} classes but arch.num_classes is {}",
            ds.num_classes,
            cfg.arch.num_classes
        );
    }
    Ok(preprocess_split(&tr, &te, cfg.data.length))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub kind: EnsembleKind,
    pub arm_ids: Vec<String>,
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> anyhow::Result<()> {
    let with_cor = rows.iter().any(|r| r.cor.is_some());
    let mut w = csv::Writer::from_path(path)?;
    if with_cor {
        w.write_record(["epoch", "ce", "cor", "train_accuracy"])?;
    } else {
        w.write_record(["epoch", "ce", "train_accuracy"])?;
    }
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.ce.to_string()];
        if with_cor {
            rec.push(r.cor.map(|v| v.to_string()).unwrap_or_default());
        }
        rec.push(r.train_accuracy.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_arm(dir: &Path, arm: usize, a: &TrainedArm) -> anyhow::Result<()> {
    a.params.save(&params_path(dir, arm))?;
    a.cache.save(&cache_path(dir, arm))?;
    write_curve(&curve_path(dir, arm), &a.curve)
}

/// Reads arm `arm` of the ensemble in `dir`; the curve is not reloaded.
pub fn read_arm(
    dir: &Path,
    kind: EnsembleKind,
    arm: usize,
    bank: &Arc<RingFilterBank>,
) -> anyhow::Result<TrainedArm> {
    let pp = params_path(dir, arm);
    let params =
        ClassifierParams::load(&pp).with_context(|| format!("missing or bad {}", pp.display()))?;
    let cp = cache_path(dir, arm);
    let cache =
        FeatureCache::load(&cp).with_context(|| format!("missing or bad {}", cp.display()))?;
    let role = kind.roles()[arm];
    let filter = role
        .band
        .map(|b| BandFilter::new(bank.clone(), b))
        .transpose()?;
    Ok(TrainedArm {
        id: arm_id(kind, arm),
        role,
        params,
        filter,
        cache,
        curve: Vec::new(),
    })
}

pub fn read_ensemble(dir: &Path, cfg: &RunConfig) -> anyhow::Result<TrainedEnsemble> {
    let meta_path = dir.join(ENSEMBLE_META);
    let meta: EnsembleMeta = serde_json::from_slice(
        &fs::read(&meta_path).with_context(|| format!("missing {}", meta_path.display()))?,
    )
    .with_context(|| format!("bad {}", meta_path.display()))?;
    let bank = Arc::new(RingFilterBank::for_signal(cfg.data.length, cfg.bank)?);
    let arms = (0..NUM_ARMS)
        .map(|k| read_arm(dir, meta.kind, k, &bank))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(TrainedEnsemble {
        kind: meta.kind,
        arms,
    })
}

/// `dir` itself when it holds an ensemble, otherwise its ensemble
/// subdirectories in kind order (cor, dec, fcor, fdec).
pub fn find_ensembles(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if dir.join(ENSEMBLE_META).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        let meta = p.join(ENSEMBLE_META);
        if meta.is_file() {
            let m: EnsembleMeta = serde_json::from_slice(&fs::read(&meta)?)
                .with_context(|| format!("bad {}", meta.display()))?;
            let order = EnsembleKind::ALL
                .iter()
                .position(|k| *k == m.kind)
                .unwrap_or(0);
            found.push((order, p));
        }
    }
    if found.is_empty() {
        bail!("no ensemble found under {}", dir.display());
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Attacked-set cells under `dir`, sorted by family then ε.
pub fn find_attack_cells(dir: &Path) -> anyhow::Result<Vec<AttackedSet>> {
    let mut cells = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        if p.join("attack.json").is_file() {
            cells.push(AttackedSet::load(&p).with_context(|| format!("loading {}", p.display()))?);
        }
    }
    cells.sort_by(|a, b| {
        a.spec
            .family
            .as_str()
            .cmp(b.spec.family.as_str())
            .then(a.spec.epsilon.total_cmp(&b.spec.epsilon))
    });
    Ok(cells)
}

/// Config snapshot written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub args: serde_json::Value,
    pub config: &'a RunConfig,
    pub tool_version: &'static str,
}

pub fn write_run_manifest(
    dir: &Path,
    command: &str,
    args: serde_json::Value,
    cfg: &RunConfig,
) -> anyhow::Result<()> {
    let m = RunManifest {
        command,
        args,
        config: cfg,
        tool_version: env!("CARGO_PKG_VERSION"),
    };
    fs::write(
        dir.join(RUN_MANIFEST),
        serde_json::to_string_pretty(&m)? + "\n",
    )?;
    Ok(())
}
