use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Adam, ArmRole, EnsembleKind, TrainConfig, NUM_ARMS};
use crate::autodiff::Graph;
use crate::classifier::{forward_graph, ArchConfig, BoundParams, ClassifierParams};
use crate::decorrelation::{build_cache, total_loss, FeatureCache};
use crate::error::{Error, Result};
use crate::fourier::{BandFilter, RingFilterBank};
use crate::rng::derive_seed;
use crate::signal_io::Dataset;
use crate::tensor::Tensor;

/// Per-epoch means of the loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub ce: f64,
    pub cor: Option<f64>,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedArm {
    pub id: String,
    pub role: ArmRole,
    pub params: ClassifierParams,
    pub filter: Option<BandFilter>,
    pub cache: FeatureCache,
    pub curve: Vec<CurveRow>,
}

#[derive(Clone, Debug)]
pub struct TrainedEnsemble {
    pub kind: EnsembleKind,
    pub arms: Vec<TrainedArm>,
}

pub fn arm_id(kind: EnsembleKind, arm: usize) -> String {
    format!("{kind}-arm{arm}")
}

/// Shuffled sample order split into `max(1, ⌊n/batch⌋)` batches whose
/// sizes differ by at most one, so none is smaller than `batch` (when
/// `n ≥ batch`).
pub fn epoch_batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let count = (n / batch.max(1)).max(1);
    let (base, extra) = (n / count, n % count);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let len = base + usize::from(b < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Trains arm `arm` of a `kind` ensemble. Decorrelating arms regress
/// against `caches` of all earlier arms.
pub fn train_arm(
    arm: usize,
    kind: EnsembleKind,
    arch: &ArchConfig,
    train: &Dataset,
    cfg: &TrainConfig,
    caches: &[FeatureCache],
    bank: &Arc<RingFilterBank>,
) -> Result<TrainedArm> {
    let role = kind.roles()[arm];
    cfg.validate(arch.feature_dim, role.decorrelate)?;
    if role.decorrelate && caches.len() < arm {
        return Err(Error::Config(format!(
            "arm {arm} needs caches of {arm} earlier arm(s), got {}",
            caches.len()
        )));
    }
    let prev = if role.decorrelate {
        &caches[..arm]
    } else {
        &[][..]
    };
    for c in prev {
        if c.features.rows() != train.len() {
            return Err(Error::MissingCacheRows {
                index: train.len().saturating_sub(1),
                rows: c.features.rows(),
            });
        }
    }
    let filter = role
        .band
        .map(|b| BandFilter::new(bank.clone(), b))
        .transpose()?;

    let mut params = ClassifierParams::init(arch, derive_seed(cfg.init_seed, &[arm as u64]))?;
    let mut opt = Adam::new(cfg.adam, &params.tensors);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    let labels = train.labels();

    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(
            train.len(),
            cfg.batch_size,
            derive_seed(cfg.shuffle_seed, &[arm as u64, epoch as u64]),
        );
        let (mut ce_sum, mut cor_sum, mut correct) = (0.0, 0.0, 0usize);
        for idx in &batches {
            let batch = train.batch(idx)?;
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &params, true);
            let x = g.constant(batch.x.clone());
            let (logits, feats) = forward_graph(&mut g, arch, &bound, x, filter.as_ref())?;
            let terms = total_loss(
                &mut g,
                logits,
                &batch.labels,
                feats,
                prev,
                idx,
                &cfg.decor,
                derive_seed(arm as u64, &[step]),
            )?;
            let mut grads = g.backward(terms.total)?;
            let grads: Vec<Tensor> = bound
                .vars
                .iter()
                .zip(&params.tensors)
                .map(|(&v, t)| {
                    grads
                        .take(v)
                        .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
                })
                .collect();
            opt.update(&mut params.tensors, &grads)?;

            let w = idx.len() as f64;
            ce_sum += g.value(terms.ce).item() * w;
            if let Some(c) = terms.cor {
                cor_sum += g.value(c).item() * w;
            }
            let preds = crate::classifier::argmax_rows(g.value(logits));
            correct += preds
                .iter()
                .zip(idx)
                .filter(|(p, &i)| **p == labels[i])
                .count();
            step += 1;
        }
        let n = train.len() as f64;
        curve.push(CurveRow {
            epoch,
            ce: ce_sum / n,
            cor: (role.decorrelate && cfg.decor.lambda != 0.0 && !prev.is_empty())
                .then_some(cor_sum / n),
            train_accuracy: correct as f64 / n,
        });
    }

    let id = arm_id(kind, arm);
    let cache = build_cache(&id, &params, filter.as_ref(), train)?;
    Ok(TrainedArm {
        id,
        role,
        params,
        filter,
        cache,
        curve,
    })
}

/// Trains arms 0, 1, 2 in order; each arm sees the caches of all earlier ones.
pub fn train_ensemble(
    kind: EnsembleKind,
    arch: &ArchConfig,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedEnsemble> {
    let bank = Arc::new(RingFilterBank::for_signal(arch.input_length, cfg.bank)?);
    let base = train_arm(0, kind, arch, train, cfg, &[], &bank)?;
    train_ensemble_from_base(kind, arch, train, cfg, &base)
}

/// Like [`train_ensemble`], reusing an already trained arm 0. Arm 0 is the
/// same cross-entropy model for every kind, so this yields identical results.
pub fn train_ensemble_from_base(
    kind: EnsembleKind,
    arch: &ArchConfig,
    train: &Dataset,
    cfg: &TrainConfig,
    base: &TrainedArm,
) -> Result<TrainedEnsemble> {
    if base.role != ArmRole::BASE || base.cache.features.rows() != train.len() {
        return Err(Error::Config(
            "arm 0 must be an unfiltered CE arm trained on this set".into(),
        ));
    }
    let bank = Arc::new(RingFilterBank::for_signal(arch.input_length, cfg.bank)?);
    let mut arm0 = base.clone();
    arm0.id = arm_id(kind, 0);
    arm0.cache.model_id = arm0.id.clone();
    let mut arms: Vec<TrainedArm> = vec![arm0];
    for k in 1..NUM_ARMS {
        let caches: Vec<FeatureCache> = arms.iter().map(|a| a.cache.clone()).collect();
        arms.push(train_arm(k, kind, arch, train, cfg, &caches, &bank)?);
    }
    Ok(TrainedEnsemble { kind, arms })
}
