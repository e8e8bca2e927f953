//! ℓ∞ PGD and smoothed (Gaussian-kernel) adversarial perturbations.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::classifier::{argmax_rows, forward_graph, BoundParams, ClassifierParams};
use crate::error::{Error, Result};
use crate::fourier::BandFilter;
use crate::signal_io::{write_signal, Dataset};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Pgd,
    Sap,
}

impl AttackFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackFamily::Pgd => "pgd",
            AttackFamily::Sap => "sap",
        }
    }
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Gaussian smoothing kernel: odd width `width`, standard deviation `sigma`
/// (both in samples).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub width: usize,
    pub sigma: f64,
}

pub fn default_kernel_bank() -> Vec<KernelSpec> {
    [5, 9, 13, 17, 21]
        .into_iter()
        .map(|width| KernelSpec {
            width,
            sigma: width as f64 / 4.0,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default)]
    pub kernels: Vec<KernelSpec>,
}

impl AttackSpec {
    /// 20 steps with `α = ε/10`.
    pub fn pgd(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Pgd,
            epsilon,
            alpha: epsilon / 10.0,
            steps: 20,
            kernels: Vec::new(),
        }
    }

    /// 20 steps with `α = ε/10` over the default five-kernel bank.
    pub fn sap(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Sap,
            kernels: default_kernel_bank(),
            ..Self::pgd(epsilon)
        }
    }

    pub fn new(family: AttackFamily, epsilon: f64) -> Self {
        match family {
            AttackFamily::Pgd => Self::pgd(epsilon),
            AttackFamily::Sap => Self::sap(epsilon),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.alpha >= 0.0) || self.steps == 0 {
            return Err(Error::Config(
                "attack needs ε ≥ 0, α ≥ 0 and at least one step".into(),
            ));
        }
        if self.family == AttackFamily::Sap {
            if self.kernels.is_empty() {
                return Err(Error::Config("SAP needs a non-empty kernel bank".into()));
            }
            for k in &self.kernels {
                if k.width % 2 == 0 || !(k.sigma > 0.0) {
                    return Err(Error::Config(format!(
                        "kernel width {} must be odd and σ {} positive",
                        k.width, k.sigma
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Discretized Gaussian centred at `(s−1)/2`, normalized to unit sum.
pub fn gaussian_kernel(width: usize, sigma: f64) -> Result<Vec<f64>> {
    if width.is_multiple_of(2) || !(sigma > 0.0) {
        return Err(Error::Config(format!(
            "gaussian kernel needs odd width and σ > 0, got ({width}, {sigma})"
        )));
    }
    let half = (width / 2) as isize;
    let raw: Vec<f64> = (-half..=half)
        .map(|d| {
            let d = d.unsigned_abs() as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Model under attack, with the band filter its inputs pass through (if any).
#[derive(Clone, Copy)]
pub struct AttackTarget<'a> {
    pub params: &'a ClassifierParams,
    pub filter: Option<&'a BandFilter>,
}

/// Projects `v` onto `[x0 − ε, x0 + ε]` so that the *computed* difference
/// `|v − x0|` is at most `ε`; plain clamping can overshoot by an ulp.
fn clip_ball(x0: f64, v: f64, eps: f64) -> f64 {
    let mut v = v.clamp(x0 - eps, x0 + eps);
    while (v - x0).abs() > eps {
        v = if v > x0 { v.next_down() } else { v.next_up() };
    }
    v
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sample_var(g: &mut Graph, x: &[f64], trainable: bool) -> Var {
    let t = Tensor::new(vec![1, 1, x.len()], x.to_vec()).expect("sample shape");
    if trainable {
        g.param(t)
    } else {
        g.constant(t)
    }
}

/// Cross-entropy of one sample.
pub fn sample_loss(target: AttackTarget, x: &[f64], y: usize) -> Result<f64> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, target.params, false);
    let xv = sample_var(&mut g, x, false);
    let (logits, _) = forward_graph(&mut g, &target.params.arch, &bound, xv, target.filter)?;
    let loss = g.softmax_cross_entropy(logits, &[y])?;
    Ok(g.value(loss).item())
}

fn input_gradient(target: AttackTarget, x: &[f64], y: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, target.params, false);
    let xv = sample_var(&mut g, x, true);
    let (logits, _) = forward_graph(&mut g, &target.params.arch, &bound, xv, target.filter)?;
    let loss = g.softmax_cross_entropy(logits, &[y])?;
    let mut grads = g.backward(loss)?;
    grads
        .take(xv)
        .map(Tensor::into_data)
        .ok_or(Error::NonFinite("attack gradient missing"))
}

/// Iterated signed-gradient ascent projected onto the ε-ball around `x`.
pub fn pgd(target: AttackTarget, x: &[f64], y: usize, spec: &AttackSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let eps = spec.epsilon;
    let mut adv = x.to_vec();
    if eps == 0.0 {
        return Ok(adv);
    }
    for _ in 0..spec.steps {
        let grad = input_gradient(target, &adv, y)?;
        for ((a, &x0), gv) in adv.iter_mut().zip(x).zip(grad) {
            *a = clip_ball(x0, *a + spec.alpha * sgn(gv), eps);
        }
    }
    Ok(adv)
}

/// `x + (1/M)·Σ θ ⊛ K_m` as graph nodes.
fn smoothed(g: &mut Graph, x: Var, theta: Var, kernels: &[Tensor]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for k in kernels {
        let width = k.shape()[2];
        let kv = g.constant(k.clone());
        let c = g.conv1d(theta, kv, None, 1, (width - 1) / 2)?;
        acc = Some(match acc {
            Some(a) => g.add(a, c)?,
            None => c,
        });
    }
    let avg = g.scale(acc.expect("non-empty bank"), 1.0 / kernels.len() as f64)?;
    g.add(x, avg)
}

fn kernel_tensors(spec: &AttackSpec) -> Result<Vec<Tensor>> {
    spec.kernels
        .iter()
        .map(|k| Tensor::new(vec![1, 1, k.width], gaussian_kernel(k.width, k.sigma)?))
        .collect()
}

/// Smoothed perturbation of `x` for a given latent `θ`.
pub fn render_sap(x: &[f64], theta: &[f64], spec: &AttackSpec) -> Result<Vec<f64>> {
    let kernels = kernel_tensors(spec)?;
    let mut g = Graph::new();
    let xv = sample_var(&mut g, x, false);
    let tv = sample_var(&mut g, theta, false);
    let out = smoothed(&mut g, xv, tv, &kernels)?;
    Ok(g.value(out).data().to_vec())
}

/// PGD over a latent `θ` rendered through an average of Gaussian smoothings.
/// The ε-ball bounds `θ`; with unit-sum non-negative kernels it also bounds
/// the induced perturbation.
pub fn sap(target: AttackTarget, x: &[f64], y: usize, spec: &AttackSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let eps = spec.epsilon;
    if eps == 0.0 {
        return Ok(x.to_vec());
    }
    let kernels = kernel_tensors(spec)?;
    let mut theta = vec![0.0; x.len()];
    for _ in 0..spec.steps {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, target.params, false);
        let xv = sample_var(&mut g, x, false);
        let tv = sample_var(&mut g, &theta, true);
        let adv = smoothed(&mut g, xv, tv, &kernels)?;
        let (logits, _) = forward_graph(&mut g, &target.params.arch, &bound, adv, target.filter)?;
        let loss = g.softmax_cross_entropy(logits, &[y])?;
        let mut grads = g.backward(loss)?;
        let grad = grads
            .take(tv)
            .ok_or(Error::NonFinite("attack gradient missing"))?;
        for (t, &gv) in theta.iter_mut().zip(grad.data()) {
            *t = (*t + spec.alpha * sgn(gv)).clamp(-eps, eps);
        }
    }
    // the kernel average already bounds δ by ε; this only absorbs rounding
    let adv = render_sap(x, &theta, spec)?;
    Ok(x.iter()
        .zip(adv)
        .map(|(&x0, v)| clip_ball(x0, v, eps))
        .collect())
}

pub fn attack_sample(
    target: AttackTarget,
    x: &[f64],
    y: usize,
    spec: &AttackSpec,
) -> Result<Vec<f64>> {
    match spec.family {
        AttackFamily::Pgd => pgd(target, x, y, spec),
        AttackFamily::Sap => sap(target, x, y, spec),
    }
}

/// Natural and perturbed test samples with the scoring mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackedSet {
    pub record_ids: Vec<String>,
    pub natural: Vec<Vec<f64>>,
    pub perturbed: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub target_model_id: String,
    pub spec: AttackSpec,
    /// Samples the base model classifies correctly in natural form.
    pub mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct AttackMeta {
    target_model_id: String,
    spec: AttackSpec,
}

impl AttackedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn linf(&self, i: usize) -> f64 {
        self.natural[i]
            .iter()
            .zip(&self.perturbed[i])
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i]).collect()
    }

    /// Writes `natural/`, `perturbed/`, `index.csv` and `attack.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["natural", "perturbed"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut index = String::from("record_id,label,masked,linf_delta\n");
        for i in 0..self.len() {
            let id = &self.record_ids[i];
            write_signal(
                &dir.join("natural").join(format!("{id}.txt")),
                &self.natural[i],
            )?;
            write_signal(
                &dir.join("perturbed").join(format!("{id}.txt")),
                &self.perturbed[i],
            )?;
            index.push_str(&format!(
                "{id},{},{},{}\n",
                self.labels[i],
                u8::from(self.mask[i]),
                self.linf(i)
            ));
        }
        let p = dir.join("index.csv");
        fs::write(&p, index).map_err(|e| Error::io(&p, e))?;
        let meta = AttackMeta {
            target_model_id: self.target_model_id.clone(),
            spec: self.spec.clone(),
        };
        let p = dir.join("attack.json");
        fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("attack.json");
        let meta: AttackMeta =
            serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        let mut rdr = csv::Reader::from_path(dir.join("index.csv"))?;
        let mut set = AttackedSet {
            record_ids: Vec::new(),
            natural: Vec::new(),
            perturbed: Vec::new(),
            labels: Vec::new(),
            target_model_id: meta.target_model_id,
            spec: meta.spec,
            mask: Vec::new(),
        };
        for row in rdr.records() {
            let row = row?;
            let bad = |what: &str| Error::Parse {
                path: dir.join("index.csv"),
                msg: format!("bad {what} in row {:?}", row),
            };
            let id = row.get(0).ok_or_else(|| bad("record_id"))?.to_string();
            let label = row
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("label"))?;
            let masked = match row.get(2) {
                Some("1") => true,
                Some("0") => false,
                _ => return Err(bad("masked")),
            };
            set.natural.push(crate::signal_io::read_signal_file(
                &dir.join("natural").join(format!("{id}.txt")),
            )?);
            set.perturbed.push(crate::signal_io::read_signal_file(
                &dir.join("perturbed").join(format!("{id}.txt")),
            )?);
            set.record_ids.push(id);
            set.labels.push(label);
            set.mask.push(masked);
        }
        Ok(set)
    }
}

/// Perturbs every test record against `target` and masks the samples the
/// base model classifies correctly in natural form.
pub fn craft_set(
    target: AttackTarget,
    target_model_id: &str,
    test: &Dataset,
    spec: &AttackSpec,
    base: AttackTarget,
) -> Result<AttackedSet> {
    spec.validate()?;
    let batch = test.full_batch()?;
    let mask = {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, base.params, false);
        let xv = g.constant(batch.x.clone());
        let (logits, _) = forward_graph(&mut g, &base.params.arch, &bound, xv, base.filter)?;
        argmax_rows(g.value(logits))
            .into_iter()
            .zip(&batch.labels)
            .map(|(p, &y)| p == y)
            .collect()
    };
    let perturbed = test
        .records
        .par_iter()
        .map(|r| attack_sample(target, &r.signal, r.label, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackedSet {
        record_ids: test.records.iter().map(|r| r.id.clone()).collect(),
        natural: test.records.iter().map(|r| r.signal.clone()).collect(),
        perturbed,
        labels: batch.labels,
        target_model_id: target_model_id.to_string(),
        spec: spec.clone(),
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ball_clip_is_exact(x0 in -50.0f64..50.0, v in -60.0f64..60.0, eps in 0.0f64..3.0) {
            let c = clip_ball(x0, v, eps);
            prop_assert!((c - x0).abs() <= eps);
            prop_assert!((c - v.clamp(x0 - eps, x0 + eps)).abs() <= 1e-12 * (1.0 + x0.abs()));
        }
    }

    #[test]
    fn degenerate_kernel() {
        assert_eq!(gaussian_kernel(1, 0.7).unwrap(), vec![1.0]);
    }

    #[test]
    fn kernels_are_symmetric_unit_sum() {
        for k in default_kernel_bank() {
            let v = gaussian_kernel(k.width, k.sigma).unwrap();
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..v.len() {
                assert_eq!(v[i], v[v.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn five_tap_unit_sigma_matches_formula() {
        let v = gaussian_kernel(5, 1.0).unwrap();
        let raw: Vec<f64> = [-2.0f64, -1.0, 0.0, 1.0, 2.0]
            .iter()
            .map(|d| (-d * d / 2.0).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        for (a, b) in v.iter().zip(&raw) {
            assert!((a - b / s).abs() < 1e-15);
        }
    }

    #[test]
    fn even_width_rejected() {
        assert!(gaussian_kernel(4, 1.0).is_err());
        assert!(gaussian_kernel(3, 0.0).is_err());
        let mut spec = AttackSpec::sap(0.1);
        spec.kernels[0].width = 6;
        assert!(spec.validate().is_err());
        spec.kernels.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn defaults() {
        let s = AttackSpec::sap(1.0);
        assert_eq!(s.steps, 20);
        assert!((s.alpha - 0.1).abs() < 1e-15);
        assert_eq!(s.kernels.len(), 5);
        assert_eq!(
            s.kernels[4],
            KernelSpec {
                width: 21,
                sigma: 5.25
            }
        );
    }
}
