mod common;

use common::*;
use dna_core::fft::{fft, ifft};
use dna_core::linalg::least_squares;
use dna_core::tensor::matmul;
use dna_core::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn matmul_identity_and_hand_case() {
    let mut r = rng(1);
    let b = random_tensor(&mut r, &[3, 4]);
    assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let c = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
    assert_eq!(matmul(&a, &c).unwrap().data(), &[3.0, 7.0]);
    assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
}

#[test]
fn matmul_gradient() {
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[5, 4]);
    let b = random_tensor(&mut r, &[4, 3]);
    let w = random_tensor(&mut r, &[5, 3]);
    let err = grad_check(&[a, b], 1e-6, |g, v| {
        let p = g.matmul(v[0], v[1]).unwrap();
        // weight the product so every output entry contributes differently
        let wv = g.constant(w.clone());
        let s = g.add(p, wv).unwrap();
        g.l2_norm_sq(s).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

fn conv_value(x: &[f64], w: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(vec![1, 1, x.len()], x.to_vec()).unwrap());
    let wv = g.constant(Tensor::new(vec![1, 1, w.len()], w.to_vec()).unwrap());
    let out = g.conv1d(xv, wv, None, stride, pad).unwrap();
    g.value(out).data().to_vec()
}

#[test]
fn conv1d_hand_cases() {
    let x = [0.5, -1.0, 2.0, 4.0];
    assert_eq!(conv_value(&x, &[1.0], 1, 0), x.to_vec());
    assert_eq!(
        conv_value(&[1.0, 2.0, 3.0], &[1.0, 1.0], 1, 0),
        vec![3.0, 5.0]
    );
    // L' = floor((L + 2p − k)/s) + 1
    assert_eq!(conv_value(&[0.0; 10], &[1.0; 3], 2, 1).len(), 5);
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(vec![1, 1, 3]));
    let wv = g.constant(Tensor::zeros(vec![1, 1, 6]));
    assert!(g.conv1d(xv, wv, None, 1, 1).is_err());
}

#[test]
fn conv1d_gradient() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[2, 1, 16]);
    let w = random_tensor(&mut r, &[3, 1, 5]);
    let b = random_tensor(&mut r, &[3]);
    let err = grad_check(&[x, w, b], 1e-6, |g, v| {
        let y = g.conv1d(v[0], v[1], Some(v[2]), 2, 2).unwrap();
        g.l2_norm_sq(y).unwrap()
    });
    assert!(err < 1e-6, "{err}");

    let x = random_tensor(&mut r, &[2, 3, 11]);
    let w = random_tensor(&mut r, &[2, 3, 4]);
    let err = grad_check(&[x, w], 1e-6, |g, v| {
        let y = g.conv1d(v[0], v[1], None, 1, 3).unwrap();
        let y = g.global_avg_pool(y).unwrap();
        g.l2_norm_sq(y).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn scalar_ops_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let v = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let n = g.l2_norm_sq(v).unwrap();
    assert_eq!(g.value(n).item(), 25.0);
    let m = g.mean(v).unwrap();
    assert_eq!(g.value(m).item(), 3.5);
    assert!(matches!(g.log(x), Err(Error::LogDomain(_))));
}

#[test]
fn log_gradient_at_two() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.log(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert!((grads.get(x).unwrap().item() - 0.5).abs() < 1e-15);
    let fd = ((2.0f64 + 1e-6).ln() - (2.0f64 - 1e-6).ln()) / 2e-6;
    assert!((fd - 0.5).abs() < 1e-9);
}

#[test]
fn scalar_ops_gradients() {
    let mut r = rng(4);
    // keep relu inputs away from the kink
    let x = Tensor::new(
        vec![2, 4],
        (0..8)
            .map(|_| {
                let v: f64 = r.gen_range(0.1..1.0);
                if r.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
    .unwrap();
    let bias = random_tensor(&mut r, &[4]);
    let err = grad_check(&[x, bias], 1e-6, |g, v| {
        let a = g.relu(v[0]).unwrap();
        let b = g.add_row_bias(a, v[1]).unwrap();
        let sq = g.l2_norm_sq(b).unwrap();
        let c = g.add_scalar(sq, 1.5).unwrap();
        let l = g.log(c).unwrap();
        let s = g.scale(v[0], 0.7).unwrap();
        let m = g.mean(s).unwrap();
        let d = g.sub(l, m).unwrap();
        let e = g.index(b, 3).unwrap();
        g.add(d, e).unwrap()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(vec![1, 3]));
    let ce = g.softmax_cross_entropy(l, &[1]).unwrap();
    assert!((g.value(ce).item() - 3f64.ln()).abs() < 1e-15);

    let l = g.constant(Tensor::new(vec![1, 3], vec![20.0, 0.0, 0.0]).unwrap());
    let ce = g.softmax_cross_entropy(l, &[0]).unwrap();
    assert!(g.value(ce).item() < 1e-8);
    assert!(matches!(
        g.softmax_cross_entropy(l, &[3]),
        Err(Error::LabelOutOfRange { .. })
    ));
}

#[test]
fn cross_entropy_direct_formula_and_gradient() {
    let mut r = rng(5);
    let logits = random_tensor(&mut r, &[4, 3]);
    let labels = [2usize, 0, 1, 1];
    let mut direct = 0.0;
    for i in 0..4 {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        direct += -(row[labels[i]].exp() / z).ln();
    }
    direct /= 4.0;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.softmax_cross_entropy(l, &labels).unwrap();
    assert!(((g.value(ce).item() - direct) / direct).abs() < 1e-10);

    let err = grad_check(&[logits], 1e-6, |g, v| {
        g.softmax_cross_entropy(v[0], &labels).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn adjoints_are_linear() {
    let mut r = rng(6);
    let a = random_tensor(&mut r, &[3, 4]);
    let b = random_tensor(&mut r, &[4, 2]);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let bv = g.constant(b.clone());
        let p = g.matmul(av, bv).unwrap();
        let l1 = g.l2_norm_sq(p).unwrap();
        let l2 = g.mean(av).unwrap();
        let out = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(out).unwrap().get(av).unwrap().clone()
    };
    let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..g12.len() {
        assert!((g12.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn constants_receive_no_adjoint() {
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(3.0));
    let s = g.add(a, c).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(a).unwrap().item(), 1.0);
}

#[test]
fn fft_roundtrip_random_256() {
    let mut r = rng(7);
    let x: Vec<f64> = (0..256).map(|_| r.gen_range(-3.0..3.0)).collect();
    let back = ifft(&fft(&x));
    let err = x
        .iter()
        .zip(&back)
        .fold(0.0f64, |m, (a, b)| m.max((a - b.re).abs()).max(b.im.abs()));
    assert!(err < 1e-10, "{err}");
}

proptest! {
    #[test]
    fn fft_parseval_and_roundtrip(x in prop::collection::vec(-10.0f64..10.0, 1..200)) {
        let spec = fft(&x);
        let e_time: f64 = x.iter().map(|v| v * v).sum();
        let e_freq: f64 = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / x.len() as f64;
        prop_assert!((e_time - e_freq).abs() <= 1e-9 * e_time.max(1e-12));
        let back = ifft(&spec);
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b.re).abs() < 1e-10 * scale);
        }
    }

    #[test]
    fn residual_is_a_contraction(seed in 0u64..1000, n in 6usize..30, p in 1usize..4, q in 1usize..3) {
        prop_assume!(n > p + 1);
        let mut r = rng(seed);
        let zr = random_tensor(&mut r, &[n, p]);
        let zt = random_tensor(&mut r, &[n, q]);
        let fit = least_squares(&zr, &zt).unwrap();
        prop_assert!(fit.ss_res >= 0.0);
        prop_assert!(fit.ss_res <= fit.ss_total + 1e-12);
    }
}

#[test]
fn least_squares_exact_linear_relation() {
    let mut r = rng(8);
    let zr = random_tensor(&mut r, &[20, 3]);
    let w = random_tensor(&mut r, &[3, 2]);
    let b = [0.7, -1.3];
    let mut zt = matmul(&zr, &w).unwrap();
    for (i, v) in zt.data_mut().iter_mut().enumerate() {
        *v += b[i % 2];
    }
    let fit = least_squares(&zr, &zt).unwrap();
    assert!(
        fit.ss_res < 1e-16 * fit.ss_total,
        "{} vs {}",
        fit.ss_res,
        fit.ss_total
    );
}

#[test]
fn least_squares_intercept_only() {
    let mut r = rng(9);
    let zr = Tensor::zeros(vec![12, 3]);
    let mut zt = random_tensor(&mut r, &[12, 2]);
    for c in 0..2 {
        let mean: f64 = (0..12).map(|i| zt.row(i)[c]).sum::<f64>() / 12.0;
        for i in 0..12 {
            zt.data_mut()[i * 2 + c] -= mean;
        }
    }
    let fit = least_squares(&zr, &zt).unwrap();
    assert!((fit.ss_res - fit.ss_total).abs() < 1e-12 * fit.ss_total);
    assert!((fit.ss_total - zt.sum_sq()).abs() < 1e-15);
}

#[test]
fn least_squares_underdetermined() {
    let zr = Tensor::zeros(vec![4, 3]);
    let zt = Tensor::zeros(vec![4, 1]);
    assert!(matches!(
        least_squares(&zr, &zt),
        Err(Error::Underdetermined { rows: 4, cols: 4 })
    ));
}

#[test]
fn least_squares_matches_normal_equations() {
    let mut r = rng(10);
    let zr = random_tensor(&mut r, &[20, 3]);
    let zt = random_tensor(&mut r, &[20, 2]);
    let fit = least_squares(&zr, &zt).unwrap();
    let (res, tot) = normal_equations_fit(&zr, &zt);
    assert!(((fit.ss_res - res) / res).abs() < 1e-8);
    assert!(((fit.ss_total - tot) / tot).abs() < 1e-12);
}

#[test]
fn least_squares_gradients() {
    let mut r = rng(11);
    let zr = random_tensor(&mut r, &[20, 3]);
    let zt = random_tensor(&mut r, &[20, 2]);
    for (wr, wt) in [(1.0, 0.0), (0.0, 1.0), (0.8, -0.3)] {
        let err = grad_check(&[zr.clone(), zt.clone()], 1e-6, |g, v| {
            let ss = g.least_squares_residual(v[0], v[1]).unwrap();
            let res = g.index(ss, 0).unwrap();
            let tot = g.index(ss, 1).unwrap();
            let a = g.scale(res, wr).unwrap();
            let b = g.scale(tot, wt).unwrap();
            g.add(a, b).unwrap()
        });
        assert!(err < 1e-5, "weights ({wr}, {wt}): {err}");
    }
}

#[test]
fn nan_is_an_error_state() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(f64::MAX));
    assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite(_))));
}
