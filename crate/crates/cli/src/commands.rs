use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use dna_core::attacks::{craft_set, AttackTarget};
use dna_core::decorrelation::FeatureCache;
use dna_core::ensemble::{
    arm_id, correlation_report, evaluate_attacked, evaluate_natural, train_arm, EnsembleKind,
    ReportRow, TrainedArm, NUM_ARMS,
};
use dna_core::fourier::RingFilterBank;
use dna_core::signal_io::{load_dataset, split_indices, synthesize, write_dataset, write_split};
use serde_json::json;

use crate::config::RunConfig;
use crate::store::*;
use crate::{CliError, CliResult};

pub fn default_data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

pub fn default_ensemble_dir(cfg: &RunConfig, kind: EnsembleKind) -> PathBuf {
    cfg.output_dir.join("ensembles").join(kind.as_str())
}

pub fn default_attack_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("attacks")
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::from)
}

/// Writes the dataset (manifest + one file per record) and its split.
pub fn generate_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let ds = match &cfg.data.manifest {
        Some(m) => load_dataset(m).with_context(|| format!("loading {}", m.display()))?,
        None => synthesize(&cfg.data.synthetic, cfg.data.synth_seed)?,
    };
    let split = split_indices(&ds, cfg.data.train_fraction, cfg.data.split_seed)?;
    create_dir(out)?;
    write_dataset(&ds, out)?;
    write_split(&ds, &split, &out.join(SPLIT))?;
    write_run_manifest(out, "generate-data", json!({ "out": out }), cfg)?;
    Ok(())
}

pub struct TrainArgs<'a> {
    pub kind: EnsembleKind,
    pub data_dir: &'a Path,
    pub out: &'a Path,
    /// Reuse arm 0 from another ensemble directory instead of retraining it.
    pub base: Option<&'a Path>,
    /// Retrain only this arm, reading the earlier arms from `out`.
    pub only_arm: Option<usize>,
    pub force: bool,
}

/// Trains the arms of one ensemble in order, writing each as it finishes.
pub fn train(cfg: &RunConfig, args: &TrainArgs) -> CliResult<()> {
    let TrainArgs { kind, out, .. } = *args;
    let first = args.only_arm.unwrap_or(0);
    let last = args.only_arm.map_or(NUM_ARMS, |a| a + 1);
    if first >= NUM_ARMS {
        return Err(CliError::Config(format!("--arm must be below {NUM_ARMS}")));
    }
    if !args.force {
        for k in first..last {
            for p in [params_path(out, k), cache_path(out, k), curve_path(out, k)] {
                if p.exists() {
                    return Err(CliError::Config(format!(
                        "{} exists; pass --force to overwrite",
                        p.display()
                    )));
                }
            }
        }
    }
    let (train_set, _) = load_split_data(args.data_dir, cfg)?;
    let tc = cfg.train_config();
    let bank = Arc::new(RingFilterBank::for_signal(cfg.data.length, cfg.bank)?);
    create_dir(out)?;

    let mut arms: Vec<TrainedArm> = Vec::new();
    for k in 0..first {
        arms.push(read_arm(out, kind, k, &bank).context("earlier arms are needed for --arm")?);
    }
    for k in first..last {
        let id = arm_id(kind, k);
        if k == 0 {
            if let Some(base_dir) = args.base {
                let mut a = read_arm(base_dir, kind, 0, &bank)
                    .with_context(|| format!("reading base arm from {}", base_dir.display()))?;
                if a.cache.features.rows() != train_set.len() {
                    return Err(anyhow!("base arm cache does not match the training set").into());
                }
                a.cache.model_id = id.clone();
                a.id = id;
                write_arm(out, 0, &a)?;
                fs::copy(curve_path(base_dir, 0), curve_path(out, 0))
                    .context("copying the base arm's curve")?;
                arms.push(a);
                continue;
            }
        }
        let caches: Vec<FeatureCache> = arms.iter().map(|a| a.cache.clone()).collect();
        let arm = train_arm(k, kind, &cfg.arch, &train_set, &tc, &caches, &bank)
            .with_context(|| format!("training {id} failed"))?;
        write_arm(out, k, &arm).with_context(|| format!("writing {id}"))?;
        arms.push(arm);
    }

    let meta = EnsembleMeta {
        kind,
        arm_ids: (0..NUM_ARMS).map(|k| arm_id(kind, k)).collect(),
    };
    fs::write(
        out.join(ENSEMBLE_META),
        serde_json::to_string_pretty(&meta).map_err(anyhow::Error::from)? + "\n",
    )
    .context("writing ensemble metadata")?;
    write_run_manifest(
        out,
        "train",
        json!({
            "kind": kind,
            "data": args.data_dir,
            "base": args.base,
            "arm": args.only_arm,
        }),
        cfg,
    )?;
    Ok(())
}

/// Crafts every grid cell against arm 0 of the ensemble in `ensemble_dir`.
pub fn attack(cfg: &RunConfig, data_dir: &Path, ensemble_dir: &Path, out: &Path) -> CliResult<()> {
    let (_, test) = load_split_data(data_dir, cfg)?;
    let ens = read_ensemble(ensemble_dir, cfg)?;
    let base = &ens.arms[0];
    let target = AttackTarget {
        params: &base.params,
        filter: None,
    };
    create_dir(out)?;
    let mut failed = Vec::new();
    for spec in cfg.attack.cells() {
        let name = cell_dir_name(spec.family.as_str(), spec.epsilon);
        let result = craft_set(target, &base.id, &test, &spec, target)
            .and_then(|set| set.save(&out.join(&name)));
        if let Err(e) = result {
            failed.push(format!("{name}: {e}"));
        }
    }
    if !failed.is_empty() {
        return Err(anyhow!("attack cells failed:\n  {}", failed.join("\n  ")).into());
    }
    write_run_manifest(
        out,
        "attack",
        json!({ "data": data_dir, "ensemble_dir": ensemble_dir, "target": base.id }),
        cfg,
    )?;
    Ok(())
}

/// Writes the metrics CSV to `out`, plus `correlation.json` and the run
/// manifest beside it.
pub fn evaluate(
    cfg: &RunConfig,
    data_dir: &Path,
    ensemble_dir: &Path,
    attacks_dir: &Path,
    out: &Path,
) -> CliResult<Vec<ReportRow>> {
    let (_, test) = load_split_data(data_dir, cfg)?;
    let dirs = find_ensembles(ensemble_dir)?;
    let cells = find_attack_cells(attacks_dir)?;
    let mut rows = Vec::new();
    let mut correlations = Vec::new();
    for dir in &dirs {
        let ens = read_ensemble(dir, cfg)?;
        let kind = ens.kind.as_str();
        let nat = evaluate_natural(&ens, &test)?;
        rows.push(ReportRow::new(kind, "none", 0.0, &nat));
        for set in &cells {
            let m = evaluate_attacked(&ens, set).with_context(|| {
                format!(
                    "{kind} on {}",
                    cell_dir_name(set.spec.family.as_str(), set.spec.epsilon)
                )
            })?;
            rows.push(ReportRow::new(
                kind,
                set.spec.family.as_str(),
                set.spec.epsilon,
                &m,
            ));
        }
        let caches: Vec<&FeatureCache> = ens.arms.iter().map(|a| &a.cache).collect();
        correlations.push(correlation_report(kind, &caches)?);
    }

    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    create_dir(parent)?;
    let mut w =
        csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    for r in &rows {
        w.serialize(r).map_err(anyhow::Error::from)?;
    }
    w.flush().map_err(anyhow::Error::from)?;
    fs::write(
        parent.join("correlation.json"),
        serde_json::to_string_pretty(&correlations).map_err(anyhow::Error::from)? + "\n",
    )
    .context("writing correlation.json")?;
    write_run_manifest(
        parent,
        "evaluate",
        json!({
            "data": data_dir,
            "ensemble_dir": ensemble_dir,
            "attacks": attacks_dir,
            "out": out,
        }),
        cfg,
    )?;
    Ok(rows)
}
