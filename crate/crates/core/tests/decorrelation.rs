mod common;

use common::*;
use dna_core::decorrelation::*;
use dna_core::tensor::matmul;
use dna_core::{Graph, Tensor};

fn cfg() -> DecorConfig {
    DecorConfig::default()
}

#[test]
fn r2_of_independent_features_is_small() {
    let mut r = rng(20);
    let zr = random_tensor(&mut r, &[80, 50]);
    let zt = random_tensor(&mut r, &[80, 64]);
    let got = correlation_r2(&zr, &zt).unwrap();
    let (res, tot) = normal_equations_fit(&zr, &zt);
    assert!((got - (1.0 - res / tot)).abs() < 1e-8);
    assert!((0.0..1.0).contains(&got));
}

#[test]
fn r2_of_linear_copy_is_one() {
    let mut r = rng(21);
    let zr = random_tensor(&mut r, &[40, 4]);
    let w = random_tensor(&mut r, &[4, 3]);
    let zt = matmul(&zr, &w).unwrap();
    assert!((correlation_r2(&zr, &zt).unwrap() - 1.0).abs() < 1e-10);
    assert_eq!(
        correlation_r2(&zr, &Tensor::zeros(vec![40, 2])).unwrap(),
        0.0
    );
}

#[test]
fn decor_loss_perfect_fit_and_gradient() {
    let mut r = rng(22);
    let zr = random_tensor(&mut r, &[20, 3]);
    let mut g = Graph::new();
    let a = g.constant(zr.clone());
    let b = g.constant(zr.clone());
    let l = decor_loss(&mut g, a, b, 1e-5).unwrap();
    let tot = zr.sum_sq();
    let expected = (tot + 1e-5).ln() - (1e-5f64).ln();
    assert!((g.value(l).item() - expected).abs() < 1e-6);

    let zt = random_tensor(&mut r, &[20, 2]);
    let err = grad_check(&[zr, zt], 1e-6, |g, v| {
        decor_loss(g, v[0], v[1], 1e-5).unwrap()
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn projection_entries_have_the_right_scale() {
    // 64×15625 = 10⁶ draws
    let p = draw_projection(64, 15_625, 5);
    let n = p.len() as f64;
    let mean = p.data().iter().sum::<f64>() / n;
    let var = p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-3);
    assert!((var.sqrt() - 0.125).abs() < 0.125 * 0.01, "{}", var.sqrt());
    assert_eq!(draw_projection(4, 3, 9), draw_projection(4, 3, 9));
    assert_ne!(draw_projection(4, 3, 9), draw_projection(4, 3, 10));
}

#[test]
fn pair_loss_with_identity_projection_is_decor_loss() {
    let mut r = rng(23);
    let zk = random_tensor(&mut r, &[30, 4]);
    let zi = random_tensor(&mut r, &[30, 4]);
    let eye = Tensor::identity(4);
    for branch in [Branch::TrainableRegressor, Branch::FrozenRegressor] {
        let mut g = Graph::new();
        let k = g.constant(zk.clone());
        let i = g.constant(zi.clone());
        let got = pair_loss_with(&mut g, k, i, branch, &eye, 1e-5).unwrap();
        let want = match branch {
            Branch::TrainableRegressor => decor_loss(&mut g, k, i, 1e-5).unwrap(),
            Branch::FrozenRegressor => decor_loss(&mut g, i, k, 1e-5).unwrap(),
        };
        assert_eq!(g.value(got).item(), g.value(want).item());
    }
}

#[test]
fn pair_loss_of_twins_is_large() {
    let mut r = rng(24);
    let z = random_tensor(&mut r, &[100, 8]);
    let c = DecorConfig { r: 4, ..cfg() };
    for seed in 0..10 {
        let mut g = Graph::new();
        let k = g.constant(z.clone());
        let i = g.constant(z.clone());
        let l = pair_loss(&mut g, k, i, &c, seed).unwrap();
        assert!(g.value(l).item() > 5.0, "{}", g.value(l).item());
    }
}

#[test]
fn branch_is_a_fair_coin() {
    let n = 10_000;
    let hits = (0..n)
        .filter(|&s| draw_pair(4, 2, s).0 == Branch::TrainableRegressor)
        .count();
    let frac = hits as f64 / n as f64;
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
}

fn cache(id: &str, features: Tensor) -> FeatureCache {
    FeatureCache {
        model_id: id.into(),
        sample_ids: (0..features.rows()).map(|i| format!("s{i}")).collect(),
        features,
    }
}

#[test]
fn ensemble_loss_is_the_mean_over_previous_arms() {
    let mut r = rng(25);
    let c = DecorConfig { r: 3, ..cfg() };
    let zk = random_tensor(&mut r, &[40, 6]);
    let caches = vec![
        cache("a", random_tensor(&mut r, &[50, 6])),
        cache("b", random_tensor(&mut r, &[50, 6])),
    ];
    let idx: Vec<usize> = (5..45).collect();
    let step = 77;

    let mut g = Graph::new();
    let k = g.constant(zk.clone());
    let got = ensemble_decor_loss(&mut g, k, &caches, &idx, &c, step).unwrap();
    let mut manual = 0.0;
    for (i, ch) in caches.iter().enumerate() {
        let zi = g.constant(ch.features.select_rows(&idx));
        let l = pair_loss(&mut g, k, zi, &c, pair_seed(&c, step, i)).unwrap();
        manual += g.value(l).item();
    }
    assert!((g.value(got).item() - manual / 2.0).abs() < 1e-12);

    // one previous arm: the mean is that arm's pair loss
    let l1 = ensemble_decor_loss(&mut g, k, &caches[..1], &idx, &c, step).unwrap();
    let zi = g.constant(caches[0].features.select_rows(&idx));
    let p = pair_loss(&mut g, k, zi, &c, pair_seed(&c, step, 0)).unwrap();
    assert_eq!(g.value(l1).item(), g.value(p).item());

    // identical caches contribute identical values
    let twins = vec![caches[0].clone(), caches[0].clone()];
    let lt = ensemble_decor_loss(&mut g, k, &twins, &idx, &c, step).unwrap();
    let zi = g.constant(caches[0].features.select_rows(&idx));
    let p1 = pair_loss(&mut g, k, zi, &c, pair_seed(&c, step, 1)).unwrap();
    let want = (g.value(p).item() + g.value(p1).item()) / 2.0;
    assert!((g.value(lt).item() - want).abs() < 1e-12);
}

#[test]
fn missing_cache_rows_are_an_error() {
    let c = cache("a", Tensor::zeros(vec![5, 2]));
    assert!(c.rows(&[0, 4]).is_ok());
    assert!(c.rows(&[5]).is_err());
}

#[test]
fn total_loss_weighting() {
    let mut r = rng(26);
    let logits = random_tensor(&mut r, &[40, 3]);
    let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
    let zk = random_tensor(&mut r, &[40, 6]);
    let caches = vec![cache("a", random_tensor(&mut r, &[40, 6]))];
    let idx: Vec<usize> = (0..40).collect();

    let eval = |lambda: f64| {
        let c = DecorConfig {
            r: 3,
            lambda,
            ..cfg()
        };
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let k = g.constant(zk.clone());
        let t = total_loss(&mut g, l, &labels, k, &caches, &idx, &c, 3).unwrap();
        let cor = t.cor.map(|v| g.value(v).item());
        (
            t.total == t.ce,
            g.value(t.total).item(),
            g.value(t.ce).item(),
            cor,
        )
    };

    let (same_node, total, ce, cor) = eval(0.0);
    assert!(same_node && cor.is_none());
    assert_eq!(total, ce);

    let (_, total, ce, cor) = eval(0.2);
    let cor = cor.unwrap();
    assert!((total - (ce + 0.2 * cor)).abs() < 1e-12);

    let (_, t1, _, _) = eval(1.0);
    let (_, t2, _, _) = eval(2.0);
    assert!(((t2 - t1) - cor).abs() < 1e-12);
}

#[test]
fn frozen_features_receive_no_adjoint() {
    let mut r = rng(27);
    let zk = random_tensor(&mut r, &[30, 5]);
    let zi = random_tensor(&mut r, &[30, 5]);
    let c = DecorConfig { r: 2, ..cfg() };
    for seed in 0..6 {
        let mut g = Graph::new();
        let k = g.param(zk.clone());
        let i = g.constant(zi.clone());
        let l = pair_loss(&mut g, k, i, &c, seed).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(i).is_none());
        assert!(grads.get(k).unwrap().max_abs() > 0.0);
    }
}

#[test]
fn pair_loss_gradient_both_branches() {
    let mut r = rng(28);
    let zk = random_tensor(&mut r, &[20, 3]);
    let zi = random_tensor(&mut r, &[20, 3]);
    let proj = draw_projection(3, 2, 4);
    for branch in [Branch::TrainableRegressor, Branch::FrozenRegressor] {
        let err = grad_check(std::slice::from_ref(&zk), 1e-6, |g, v| {
            let i = g.constant(zi.clone());
            pair_loss_with(g, v[0], i, branch, &proj, 1e-5).unwrap()
        });
        assert!(err < 1e-5, "{branch:?}: {err}");
    }
}

#[test]
fn cache_roundtrip() {
    let mut r = rng(29);
    let c = cache("dec-arm0", random_tensor(&mut r, &[7, 3]));
    let back = FeatureCache::from_bytes(&c.to_bytes()).unwrap();
    assert_eq!(back.model_id, c.model_id);
    assert_eq!(back.sample_ids, c.sample_ids);
    assert_eq!(back.features, c.features);
    let bytes = c.to_bytes();
    assert!(FeatureCache::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}
