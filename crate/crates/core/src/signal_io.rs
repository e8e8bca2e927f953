//! Dataset ingestion, deterministic synthetic ECG-like strips,
//! crop/pad + z-score preprocessing and stratified splitting.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub signal: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub num_classes: usize,
    /// Original label strings, indexed by dense class id.
    pub label_names: Vec<String>,
    /// Common signal length once preprocessed.
    pub fixed_length: Option<usize>,
    pub norm: Option<NormStats>,
}

/// Single-channel signals `[N×1×L]` with their labels.
#[derive(Clone, Debug)]
pub struct SignalBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl SignalBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn signal_len(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn signal(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            num_classes: self.num_classes,
            label_names: self.label_names.clone(),
            fixed_length: self.fixed_length,
            norm: self.norm,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Stacks the selected records into a batch. All must share one length.
    pub fn batch(&self, idx: &[usize]) -> Result<SignalBatch> {
        let l = idx
            .first()
            .map(|&i| self.records[i].signal.len())
            .unwrap_or(self.fixed_length.unwrap_or(0));
        let mut data = Vec::with_capacity(idx.len() * l);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let r = &self.records[i];
            if r.signal.len() != l {
                return Err(Error::shape(
                    "batch",
                    format!(
                        "record {} has length {}, expected {l}",
                        r.id,
                        r.signal.len()
                    ),
                ));
            }
            data.extend_from_slice(&r.signal);
            labels.push(r.label);
        }
        Ok(SignalBatch {
            x: Tensor::new(vec![idx.len(), 1, l], data)?,
            labels,
        })
    }

    pub fn full_batch(&self) -> Result<SignalBatch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

fn read_signal(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {}: unparsable float {line:?}", lineno + 1),
        })?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: "empty signal".into(),
        });
    }
    Ok(out)
}

/// Writes one decimal float per line using the shortest exact representation.
pub fn write_signal(path: &Path, signal: &[f64]) -> Result<()> {
    let mut buf = String::with_capacity(signal.len() * 20);
    for v in signal {
        buf.push_str(&format!("{v}\n"));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_signal_file(path: &Path) -> Result<Vec<f64>> {
    read_signal(path)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    record_id: String,
    label: String,
    path: String,
}

/// Loads a `record_id,label,path` manifest. Relative paths resolve against
/// the manifest's directory; labels become dense indices in order of first
/// appearance.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(manifest).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(
            manifest,
            std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        ),
        _ => Error::Csv(e),
    })?;
    let headers = rdr.headers()?.clone();
    for col in ["record_id", "label", "path"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Parse {
                path: manifest.to_path_buf(),
                msg: format!("manifest is missing the `{col}` column"),
            });
        }
    }
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    let mut label_names = Vec::new();
    let mut records = Vec::new();
    for row in rdr.deserialize() {
        let row: ManifestRow = row?;
        let next = label_names.len();
        let label = *label_ids.entry(row.label.clone()).or_insert_with(|| {
            label_names.push(row.label.clone());
            next
        });
        let p = PathBuf::from(&row.path);
        let p = if p.is_absolute() { p } else { base.join(p) };
        records.push(Record {
            id: row.record_id,
            signal: read_signal(&p)?,
            label,
        });
    }
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(Dataset {
        records,
        num_classes: label_names.len(),
        label_names,
        fixed_length: None,
        norm: None,
    })
}

/// Writes `manifest.csv` and `signals/<id>.txt` under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let sig_dir = dir.join("signals");
    fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(["record_id", "label", "path"])?;
    for r in &dataset.records {
        let rel = format!("signals/{}.txt", r.id);
        write_signal(&dir.join(&rel), &r.signal)?;
        let label = dataset
            .label_names
            .get(r.label)
            .cloned()
            .unwrap_or_else(|| r.label.to_string());
        w.write_record([r.id.as_str(), label.as_str(), rel.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub records_per_class: usize,
    pub length: usize,
    pub sample_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            records_per_class: 50,
            length: 512,
            sample_rate: 128.0,
        }
    }
}

const CLASS_NAMES: [&str; 4] = ["regular", "fibrillation", "noisy", "wander"];

struct BeatShape {
    p_amp: f64,
    qrs_sigma: f64,
    rr_jitter: f64,
    mean_rr: f64,
}

fn add_bump(sig: &mut [f64], fs: f64, center: f64, sigma: f64, amp: f64) {
    let lo = ((center - 5.0 * sigma) * fs).floor().max(0.0) as usize;
    let hi = (((center + 5.0 * sigma) * fs).ceil().max(0.0) as usize).min(sig.len());
    for (t, v) in sig.iter_mut().enumerate().take(hi).skip(lo) {
        let d = t as f64 / fs - center;
        *v += amp * (-d * d / (2.0 * sigma * sigma)).exp();
    }
}

fn beat_train(rng: &mut ChaCha8Rng, sig: &mut [f64], fs: f64, shape: &BeatShape) {
    let dur = sig.len() as f64 / fs;
    let gain = rng.gen_range(0.85..1.15);
    let mut t = -rng.gen_range(0.0..shape.mean_rr);
    while t < dur + 0.5 {
        let r_amp = gain * rng.gen_range(0.9..1.1);
        if shape.p_amp > 0.0 {
            add_bump(sig, fs, t - 0.16, 0.025, shape.p_amp * gain);
        }
        add_bump(
            sig,
            fs,
            t - 1.6 * shape.qrs_sigma,
            0.6 * shape.qrs_sigma,
            -0.12 * r_amp,
        );
        add_bump(sig, fs, t, shape.qrs_sigma, r_amp);
        add_bump(
            sig,
            fs,
            t + 1.6 * shape.qrs_sigma,
            0.6 * shape.qrs_sigma,
            -0.2 * r_amp,
        );
        add_bump(sig, fs, t + 0.28, 0.045, 0.3 * gain);
        let jitter = 1.0 + shape.rr_jitter * rng.sample::<f64, _>(rand_distr::StandardNormal);
        t += (shape.mean_rr * jitter).max(0.3);
    }
}

fn synth_record(rng: &mut ChaCha8Rng, class: usize, cfg: &SynthConfig) -> Vec<f64> {
    let fs = cfg.sample_rate;
    let n = cfg.length;
    let mut sig = vec![0.0; n];
    let regular = BeatShape {
        p_amp: 0.15,
        qrs_sigma: 0.022,
        rr_jitter: 0.03,
        mean_rr: 60.0 / rng.gen_range(60.0..90.0),
    };
    match class {
        0 | 2 => beat_train(rng, &mut sig, fs, &regular),
        1 => {
            let shape = BeatShape {
                p_amp: 0.0,
                qrs_sigma: 0.012,
                rr_jitter: 0.22,
                mean_rr: 60.0 / rng.gen_range(75.0..115.0),
            };
            beat_train(rng, &mut sig, fs, &shape);
            // fibrillatory baseline
            let f = rng.gen_range(5.0..8.0);
            let ph = rng.gen_range(0.0..2.0 * PI);
            let a = rng.gen_range(0.04..0.08);
            for (t, v) in sig.iter_mut().enumerate() {
                *v += a * (2.0 * PI * f * t as f64 / fs + ph).sin();
            }
        }
        _ => {
            beat_train(rng, &mut sig, fs, &regular);
            sig.iter_mut().for_each(|v| *v *= 0.4);
            let f = rng.gen_range(0.15..0.5);
            let ph = rng.gen_range(0.0..2.0 * PI);
            let a = rng.gen_range(1.0..1.6);
            for (t, v) in sig.iter_mut().enumerate() {
                *v += a * (2.0 * PI * f * t as f64 / fs + ph).sin();
            }
        }
    }
    if class == 2 {
        // broadband noise at 5 dB SNR relative to the clean strip
        let p_sig = sig.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let std = (p_sig / 10f64.powf(0.5)).sqrt();
        let noise = Normal::new(0.0, std).expect("finite noise std");
        sig.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    let floor = Normal::new(0.0, 0.02).expect("finite noise std");
    sig.iter_mut().for_each(|v| *v += floor.sample(rng));
    sig
}

/// Deterministic ECG-like strips. Class 0 is a regular beat train, class 1
/// an irregular train without P waves, class 2 the regular train at 5 dB
/// SNR, class 3 a baseline-wander-dominated strip.
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    if !(2..=4).contains(&cfg.num_classes) {
        return Err(Error::Config(format!(
            "num_classes must be 2, 3 or 4, got {}",
            cfg.num_classes
        )));
    }
    if cfg.records_per_class == 0 || cfg.length == 0 || !(cfg.sample_rate > 0.0) {
        return Err(Error::Config(
            "records_per_class, length and sample_rate must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(cfg.num_classes * cfg.records_per_class);
    for class in 0..cfg.num_classes {
        for i in 0..cfg.records_per_class {
            records.push(Record {
                id: format!("syn{class}_{i:04}"),
                signal: synth_record(&mut rng, class, cfg),
                label: class,
            });
        }
    }
    Ok(Dataset {
        records,
        num_classes: cfg.num_classes,
        label_names: CLASS_NAMES[..cfg.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        fixed_length: Some(cfg.length),
        norm: None,
    })
}

/// Center crop or symmetric zero pad to `len`.
pub fn fit_length(signal: &[f64], len: usize) -> Vec<f64> {
    let n = signal.len();
    if n >= len {
        let start = (n - len) / 2;
        signal[start..start + len].to_vec()
    } else {
        let left = (len - n) / 2;
        let mut out = vec![0.0; len];
        out[left..left + n].copy_from_slice(signal);
        out
    }
}

/// Mean/std over every sample of every record after fitting to `len`.
pub fn fit_normalization(train: &Dataset, len: usize) -> NormStats {
    let mut sum = 0.0;
    let mut count = 0usize;
    let fitted: Vec<Vec<f64>> = train
        .records
        .iter()
        .map(|r| fit_length(&r.signal, len))
        .collect();
    for s in &fitted {
        sum += s.iter().sum::<f64>();
        count += s.len();
    }
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    let var = fitted
        .iter()
        .flat_map(|s| s.iter())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count.max(1) as f64;
    NormStats {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    }
}

/// Crops/pads every record to `len` and z-scores with `stats`.
pub fn preprocess(dataset: &Dataset, len: usize, stats: NormStats) -> Dataset {
    let std = stats.std.max(STD_FLOOR);
    let records = dataset
        .records
        .iter()
        .map(|r| Record {
            id: r.id.clone(),
            signal: fit_length(&r.signal, len)
                .into_iter()
                .map(|v| (v - stats.mean) / std)
                .collect(),
            label: r.label,
        })
        .collect();
    Dataset {
        records,
        num_classes: dataset.num_classes,
        label_names: dataset.label_names.clone(),
        fixed_length: Some(len),
        norm: Some(NormStats {
            mean: stats.mean,
            std,
        }),
    }
}

/// Preprocesses a split using statistics of its training half only.
pub fn preprocess_split(train: &Dataset, test: &Dataset, len: usize) -> (Dataset, Dataset) {
    let stats = fit_normalization(train, len);
    (preprocess(train, len, stats), preprocess(test, len, stats))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Label-stratified split; both halves keep dataset order.
pub fn split_indices(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, r) in dataset.records.iter().enumerate() {
        by_class[r.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Config(format!(
                "class {class} has {} record(s); at least 2 are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_train =
            ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let s = split_indices(dataset, train_fraction, seed)?;
    Ok((dataset.subset(&s.train), dataset.subset(&s.test)))
}

/// `record_id,split` listing, one row per record.
pub fn write_split(dataset: &Dataset, split: &SplitIndices, path: &Path) -> Result<()> {
    let mut rows: Vec<(usize, &str)> = split
        .train
        .iter()
        .map(|&i| (i, "train"))
        .chain(split.test.iter().map(|&i| (i, "test")))
        .collect();
    rows.sort_unstable();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("record_id,split\n");
    for (i, s) in rows {
        out.push_str(&format!("{},{s}\n", dataset.records[i].id));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_split(dataset: &Dataset, path: &Path) -> Result<SplitIndices> {
    let pos: HashMap<&str, usize> = dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let mut rdr = csv::Reader::from_path(path)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let id = row.get(0).unwrap_or_default();
        let &i = pos.get(id).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("unknown record id {id:?}"),
        })?;
        match row.get(1) {
            Some("train") => train.push(i),
            Some("test") => test.push(i),
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    msg: format!("bad split tag {other:?} for {id}"),
                })
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: &[usize]) -> Dataset {
        Dataset {
            records: labels
                .iter()
                .enumerate()
                .map(|(i, &l)| Record {
                    id: format!("r{i}"),
                    signal: vec![i as f64; 4],
                    label: l,
                })
                .collect(),
            num_classes: labels.iter().max().map_or(0, |m| m + 1),
            label_names: vec![],
            fixed_length: Some(4),
            norm: None,
        }
    }

    #[test]
    fn pads_symmetrically_and_crops_centered() {
        assert_eq!(
            fit_length(&[1.0, 2.0], 6),
            vec![0.0, 0.0, 1.0, 2.0, 0.0, 0.0]
        );
        assert_eq!(
            fit_length(&[1.0, 2.0, 3.0, 4.0, 5.0], 3),
            vec![2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn constant_signal_normalizes_to_zero() {
        let mut d = tiny(&[0]);
        d.records[0].signal = vec![3.0; 10];
        let stats = fit_normalization(&d, 10);
        assert_eq!(stats.std, STD_FLOOR);
        let p = preprocess(&d, 10, stats);
        assert!(p.records[0].signal.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_counts_are_stratified() {
        let labels: Vec<usize> = (0..150).map(|i| i / 50).collect();
        let d = tiny(&labels);
        let s = split_indices(&d, 0.9, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (135, 15));
        for c in 0..3 {
            assert_eq!(s.train.iter().filter(|&&i| labels[i] == c).count(), 45);
            assert_eq!(s.test.iter().filter(|&&i| labels[i] == c).count(), 5);
        }
        assert_eq!(s, split_indices(&d, 0.9, 1).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..150).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_singleton_class_and_bad_fraction() {
        let d = tiny(&[0, 0, 1]);
        assert!(split_indices(&d, 0.9, 0).is_err());
        let d = tiny(&[0, 0, 1, 1]);
        assert!(split_indices(&d, 1.0, 0).is_err());
        assert!(split_indices(&d, 0.0, 0).is_err());
    }

    #[test]
    fn synth_is_deterministic_with_expected_counts() {
        let cfg = SynthConfig::default();
        let a = synthesize(&cfg, 9).unwrap();
        let b = synthesize(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 150);
        for c in 0..3 {
            assert_eq!(a.records.iter().filter(|r| r.label == c).count(), 50);
        }
        assert_ne!(a, synthesize(&cfg, 10).unwrap());
        assert!(a.records.iter().all(|r| r.signal.len() == 512));
    }

    #[test]
    fn synth_rejects_bad_class_counts() {
        for n in [1, 5] {
            let cfg = SynthConfig {
                num_classes: n,
                ..Default::default()
            };
            assert!(synthesize(&cfg, 0).is_err());
        }
    }
}
