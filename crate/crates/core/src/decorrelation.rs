//! Feature decorrelation losses and the frozen feature caches of earlier
//! ensemble arms.
//!
//! The regression statistic is `R² = 1 − SS_res/SS_total` where `SS_res`
//! is the OLS residual of the regressand on `[regressor, 1]` and
//! `SS_total` is the uncentered energy of the regressand. The training
//! loss is `log(SS_total + ε) − log(SS_res + ε)`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::classifier::{forward, ByteReader, ClassifierParams};
use crate::error::{Error, Result};
use crate::fourier::BandFilter;
use crate::linalg;
use crate::rng::derive_seed;
use crate::signal_io::Dataset;
use crate::tensor::Tensor;

const CACHE_MAGIC: &[u8; 8] = b"DNACACHE";
const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecorConfig {
    /// Random projection width.
    pub r: usize,
    pub lambda: f64,
    pub eps_stab: f64,
    /// Seed of the projection/branch stream, independent of data shuffling.
    pub seed: u64,
}

impl Default for DecorConfig {
    fn default() -> Self {
        Self {
            r: 50,
            lambda: 0.2,
            eps_stab: 1e-5,
            seed: 17,
        }
    }
}

impl DecorConfig {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.r == 0 || self.r > feature_dim {
            return Err(Error::Config(format!(
                "projection dim r={} must lie in [1, {feature_dim}]",
                self.r
            )));
        }
        if !(self.lambda >= 0.0) || !(self.eps_stab > 0.0) {
            return Err(Error::Config("lambda must be ≥ 0 and eps_stab > 0".into()));
        }
        Ok(())
    }
}

/// Features of one batch together with their training-set row indices.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub values: Tensor,
    pub sample_indices: Vec<usize>,
}

/// Frozen per-sample features of a trained arm over the whole training set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub model_id: String,
    /// Record ids in canonical training order; row `i` belongs to `sample_ids[i]`.
    pub sample_ids: Vec<String>,
    pub features: Tensor,
}

impl FeatureCache {
    pub fn rows(&self, idx: &[usize]) -> Result<Tensor> {
        let n = self.features.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::MissingCacheRows {
                index: bad,
                rows: n,
            });
        }
        Ok(self.features.select_rows(idx))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.model_id);
        out.extend_from_slice(&(self.sample_ids.len() as u64).to_le_bytes());
        for id in &self.sample_ids {
            put_str(&mut out, id);
        }
        out.extend_from_slice(&(self.features.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.features.cols() as u64).to_le_bytes());
        for v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CACHE_MAGIC {
            return Err(Error::Format("not a feature cache".into()));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "cache format version {version}, expected {CACHE_VERSION}"
            )));
        }
        let get_str = |r: &mut ByteReader| -> Result<String> {
            let n = r.u32()? as usize;
            String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
        };
        let model_id = get_str(&mut r)?;
        let n_ids = r.u64()? as usize;
        let sample_ids = (0..n_ids)
            .map(|_| get_str(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let data = (0..rows * cols)
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() || rows != n_ids {
            return Err(Error::Format("inconsistent feature cache".into()));
        }
        Ok(Self {
            model_id,
            sample_ids,
            features: Tensor::new(vec![rows, cols], data)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Features of every training record in dataset order, computed on the
/// arm's own (optionally band-filtered) view.
pub fn build_cache(
    model_id: &str,
    params: &ClassifierParams,
    filter: Option<&BandFilter>,
    train: &Dataset,
) -> Result<FeatureCache> {
    const CHUNK: usize = 128;
    let d = params.arch.feature_dim;
    let mut data = Vec::with_capacity(train.len() * d);
    let idx: Vec<usize> = (0..train.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = train.batch(chunk)?;
        let (_, feats) = forward(params, &batch, filter)?;
        data.extend_from_slice(feats.data());
    }
    Ok(FeatureCache {
        model_id: model_id.to_string(),
        sample_ids: train.records.iter().map(|r| r.id.clone()).collect(),
        features: Tensor::new(vec![train.len(), d], data)?,
    })
}

/// `1 − SS_res/SS_total` of `zt` regressed on `[zr, 1]`. Zero when `zt` is
/// identically zero.
pub fn correlation_r2(zr: &Tensor, zt: &Tensor) -> Result<f64> {
    let fit = linalg::least_squares(zr, zt)?;
    if fit.ss_total == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - fit.ss_res / fit.ss_total)
}

/// `log(SS_total + ε) − log(SS_res + ε)` recorded on `g`.
pub fn decor_loss(g: &mut Graph, zr: Var, zt: Var, eps: f64) -> Result<Var> {
    let ss = g.least_squares_residual(zr, zt)?;
    let res = g.index(ss, 0)?;
    let tot = g.index(ss, 1)?;
    let res = g.add_scalar(res, eps)?;
    let tot = g.add_scalar(tot, eps)?;
    let log_tot = g.log(tot)?;
    let log_res = g.log(res)?;
    g.sub(log_tot, log_res)
}

/// `D×r` matrix of i.i.d. `N(0, 1/D)` entries (standard deviation `D^{-1/2}`).
pub fn draw_projection(d: usize, r: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_projection_with(d, r, &mut rng)
}

fn draw_projection_with(d: usize, r: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
    let data = (0..d * r).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![d, r], data).expect("shape matches data")
}

/// Which feature batch acts as the (unprojected) regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Regress `Zi·R` on the trainable `Zk`.
    TrainableRegressor,
    /// Regress `Zk·R` on the frozen `Zi`.
    FrozenRegressor,
}

/// Branch and projection for one pair at one step.
pub fn draw_pair(d: usize, r: usize, pair_seed: u64) -> (Branch, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
    let branch = if rng.gen_bool(0.5) {
        Branch::TrainableRegressor
    } else {
        Branch::FrozenRegressor
    };
    (branch, draw_projection_with(d, r, &mut rng))
}

/// Decorrelation loss for a fixed branch and projection.
pub fn pair_loss_with(
    g: &mut Graph,
    zk: Var,
    zi: Var,
    branch: Branch,
    projection: &Tensor,
    eps: f64,
) -> Result<Var> {
    let proj = g.constant(projection.clone());
    match branch {
        Branch::TrainableRegressor => {
            let target = g.matmul(zi, proj)?;
            decor_loss(g, zk, target, eps)
        }
        Branch::FrozenRegressor => {
            let target = g.matmul(zk, proj)?;
            decor_loss(g, zi, target, eps)
        }
    }
}

/// Randomized pair loss: a fair coin picks the regressor and a fresh
/// Gaussian projection compresses the regressand.
pub fn pair_loss(
    g: &mut Graph,
    zk: Var,
    zi: Var,
    cfg: &DecorConfig,
    pair_seed: u64,
) -> Result<Var> {
    let d = g.value(zk).cols();
    if g.value(zi).shape() != g.value(zk).shape() {
        return Err(Error::shape(
            "pair_loss",
            format!("{:?} vs {:?}", g.value(zk).shape(), g.value(zi).shape()),
        ));
    }
    let (branch, proj) = draw_pair(d, cfg.r, pair_seed);
    pair_loss_with(g, zk, zi, branch, &proj, cfg.eps_stab)
}

/// Seed of the pair `(step, previous arm)` on the projection stream.
pub fn pair_seed(cfg: &DecorConfig, step_seed: u64, prev_arm: usize) -> u64 {
    derive_seed(cfg.seed, &[step_seed, prev_arm as u64])
}

/// Mean of the pair losses against every previously trained arm.
pub fn ensemble_decor_loss(
    g: &mut Graph,
    zk: Var,
    caches: &[FeatureCache],
    batch_indices: &[usize],
    cfg: &DecorConfig,
    step_seed: u64,
) -> Result<Var> {
    if caches.is_empty() {
        return Err(Error::Config(
            "decorrelation needs at least one previous arm".into(),
        ));
    }
    let mut acc: Option<Var> = None;
    for (i, cache) in caches.iter().enumerate() {
        let zi = g.constant(cache.rows(batch_indices)?);
        let l = pair_loss(g, zk, zi, cfg, pair_seed(cfg, step_seed, i))?;
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    g.scale(acc.expect("non-empty"), 1.0 / caches.len() as f64)
}

/// Loss terms recorded for one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub cor: Option<Var>,
}

/// `CE + λ·L_cor`; with `λ = 0` or no previous arms it is the CE node itself.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    zk: Var,
    caches: &[FeatureCache],
    batch_indices: &[usize],
    cfg: &DecorConfig,
    step_seed: u64,
) -> Result<LossTerms> {
    let ce = g.softmax_cross_entropy(logits, labels)?;
    if cfg.lambda == 0.0 || caches.is_empty() {
        return Ok(LossTerms {
            total: ce,
            ce,
            cor: None,
        });
    }
    let cor = ensemble_decor_loss(g, zk, caches, batch_indices, cfg, step_seed)?;
    let weighted = g.scale(cor, cfg.lambda)?;
    let total = g.add(ce, weighted)?;
    Ok(LossTerms {
        total,
        ce,
        cor: Some(cor),
    })
}
