#![allow(dead_code, clippy::needless_range_loop)]

use dna_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Max abs difference divided by the largest magnitude in either vector.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

/// Central finite differences of a scalar function of several inputs,
/// compared with the graph adjoints. Returns the worst relative error over
/// all inputs.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();

    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Solves `A·X = B` by Gauss-Jordan elimination with partial pivoting.
pub fn solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| a[i].iter().chain(&b[i]).copied().collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                if f != 0.0 {
                    for c in 0..n + m {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
    }
    aug.into_iter().map(|row| row[n..].to_vec()).collect()
}

/// `(SS_res, SS_total)` of `zt` regressed on `[zr, 1]` via the normal
/// equations `(AᵀA)β = AᵀY`.
pub fn normal_equations_fit(zr: &Tensor, zt: &Tensor) -> (f64, f64) {
    let (n, p, q) = (zr.rows(), zr.cols(), zt.cols());
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = zr.row(i).to_vec();
            row.push(1.0);
            row
        })
        .collect();
    let ata: Vec<Vec<f64>> = (0..=p)
        .map(|r| {
            (0..=p)
                .map(|c| (0..n).map(|i| a[i][r] * a[i][c]).sum())
                .collect()
        })
        .collect();
    let aty: Vec<Vec<f64>> = (0..=p)
        .map(|r| {
            (0..q)
                .map(|c| (0..n).map(|i| a[i][r] * zt.row(i)[c]).sum())
                .collect()
        })
        .collect();
    let beta = solve(&ata, &aty);
    let mut ss_res = 0.0;
    for i in 0..n {
        for c in 0..q {
            let fit: f64 = (0..=p).map(|r| a[i][r] * beta[r][c]).sum();
            ss_res += (zt.row(i)[c] - fit).powi(2);
        }
    }
    (ss_res, zt.sum_sq())
}

pub mod fixtures {
    use dna_core::classifier::ArchConfig;
    use dna_core::ensemble::{train_arm, EnsembleKind, TrainConfig, TrainedArm};
    use dna_core::fourier::RingFilterBank;
    use dna_core::signal_io::{preprocess_split, split, synthesize, Dataset, SynthConfig};
    use std::sync::Arc;

    /// Small preprocessed train/test split of the synthetic generator.
    pub fn small_split(per_class: usize) -> (Dataset, Dataset) {
        let synth = SynthConfig {
            records_per_class: per_class,
            ..Default::default()
        };
        let data = synthesize(&synth, 11).unwrap();
        let (tr, te) = split(&data, 0.75, 5).unwrap();
        preprocess_split(&tr, &te, synth.length)
    }

    /// A briefly trained unfiltered CE arm.
    pub fn quick_base(train: &Dataset, epochs: usize) -> TrainedArm {
        let arch = ArchConfig::default();
        let cfg = TrainConfig {
            epochs,
            ..Default::default()
        };
        let bank = Arc::new(RingFilterBank::for_signal(arch.input_length, cfg.bank).unwrap());
        train_arm(0, EnsembleKind::Cor, &arch, train, &cfg, &[], &bank).unwrap()
    }
}
