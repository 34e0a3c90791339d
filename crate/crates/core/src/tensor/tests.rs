use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn param(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r).to_param()
}

/// Contracts `y` with fixed random weights so every output coordinate gets
/// a distinct upstream gradient.
fn project(y: &Tensor, seed: u64) -> Tensor {
    let w = Tensor::randn(y.shape(), 1.0, &mut rng(seed));
    y.mul(&w).unwrap().sum()
}

fn check_unary(name: &str, shape: &[usize], op: impl Fn(&Tensor) -> Tensor) {
    for seed in 0..5 {
        let x = param(shape, &mut rng(seed));
        let err = grad_check(|x| project(&op(x), 99), &x, H);
        assert!(err < TOL, "{name} seed {seed}: {err}");
    }
}

#[test]
fn unary_ops_pass_grad_check() {
    check_unary("scale", &[3, 4], |x| x.scale(-1.7));
    check_unary("add_scalar", &[3, 4], |x| x.add_scalar(0.3));
    check_unary("transpose", &[3, 4], |x| x.transpose().unwrap());
    check_unary("reshape", &[3, 4], |x| x.reshape(&[2, 6]).unwrap());
    check_unary("slice0", &[5, 4], |x| x.slice(0, 1, 4).unwrap());
    check_unary("slice1", &[5, 4], |x| x.slice(1, 2, 4).unwrap());
    check_unary("gather_cols", &[3, 4], |x| x.gather_cols(&[3, 0, 0, 2, 1]).unwrap());
    check_unary("softmax", &[3, 5], |x| x.softmax(1).unwrap());
    check_unary("softmax axis 0", &[3, 5], |x| x.softmax(0).unwrap());
    check_unary("layer_norm", &[3, 6], |x| x.layer_norm(1e-5));
    check_unary("relu", &[4, 4], |x| x.relu());
    check_unary("sigmoid", &[4, 4], |x| x.sigmoid());
    check_unary("exp", &[4, 4], |x| x.exp());
    check_unary("log", &[4, 4], |x| x.mul(x).unwrap().add_scalar(0.5).log());
    check_unary("sum", &[3, 3], |x| x.sum());
    check_unary("mean", &[3, 3], |x| x.mean());
    check_unary("mean_rows", &[4, 3], |x| x.mean_rows().unwrap());
    check_unary("dropout", &[2, 3], |x| x.dropout_with_mask(vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0]).unwrap());
    check_unary("self mul", &[3, 3], |x| x.mul(x).unwrap());
}

#[test]
fn binary_ops_pass_grad_check() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let a = param(&[3, 4], &mut r);
        let b = param(&[4, 2], &mut r);
        let c = param(&[3, 4], &mut r);
        let row = param(&[4], &mut r);
        let checks: Vec<(&str, f64)> = vec![
            ("matmul a", grad_check(|a| project(&a.matmul(&b).unwrap(), 1), &a, H)),
            ("matmul b", grad_check(|b| project(&a.matmul(b).unwrap(), 1), &b, H)),
            ("add", grad_check(|a| project(&a.add(&c).unwrap(), 2), &a, H)),
            ("sub", grad_check(|c| project(&a.sub(c).unwrap(), 3), &c, H)),
            ("mul", grad_check(|a| project(&a.mul(&c).unwrap(), 4), &a, H)),
            ("add_row x", grad_check(|a| project(&a.add_row(&row).unwrap(), 5), &a, H)),
            ("add_row r", grad_check(|row| project(&a.add_row(row).unwrap(), 5), &row, H)),
            ("mul_row x", grad_check(|a| project(&a.mul_row(&row).unwrap(), 6), &a, H)),
            ("mul_row r", grad_check(|row| project(&a.mul_row(row).unwrap(), 6), &row, H)),
            ("concat0", grad_check(|a| project(&Tensor::concat(&[a.clone(), c.clone(), a.clone()], 0).unwrap(), 7), &a, H)),
            ("concat1", grad_check(|c| project(&Tensor::concat(&[a.clone(), c.clone()], 1).unwrap(), 8), &c, H)),
            ("embedding", grad_check(|t| project(&t.embedding_lookup(&[1, 0, 1, 3]).unwrap(), 9), &a.transpose().unwrap().to_param(), H)),
        ];
        for (name, err) in checks {
            assert!(err < TOL, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn losses_pass_grad_check() {
    for seed in 0..5 {
        let mut r = rng(200 + seed);
        let logits = param(&[4, 7], &mut r);
        let err = grad_check(|l| cross_entropy(l, &[3, 0, 9, 6], 9).unwrap(), &logits, H);
        assert!(err < TOL, "cross_entropy seed {seed}: {err}");
        let s = param(&[3], &mut r);
        for label in [0.0, 1.0] {
            let err = grad_check(|s| bce_logits(s, label), &s, H);
            assert!(err < TOL, "bce seed {seed}: {err}");
        }
    }
    let s = Tensor::param(&[], vec![0.3]).unwrap();
    assert!(grad_check(|s| bce_logits(s, 1.0), &s, 1e-4) < 1e-4);
}

#[test]
fn composite_softmax_cross_entropy_passes_grad_check() {
    let mut r = rng(7);
    let x = param(&[5, 6], &mut r);
    let w = param(&[6, 11], &mut r);
    let f = |w: &Tensor| {
        let h = x.matmul(w).unwrap().layer_norm(1e-5).relu();
        let p = h.softmax(1).unwrap();
        cross_entropy(&p.scale(3.0), &[1, 2, 3, 4, 0], 99).unwrap()
    };
    assert!(grad_check(f, &w, H) < TOL);
}

#[test]
fn polynomial_grad_check_is_tight() {
    let x = param(&[10], &mut rng(3));
    assert!(grad_check(|x| x.mul(x).unwrap().sum(), &x, 1e-4) < 1e-6);
}

#[test]
fn straight_through_forwards_hard_values_and_soft_gradients() {
    let soft = Tensor::param(&[1, 3], vec![0.2, 0.5, 0.3]).unwrap();
    let hard = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let y = Tensor::straight_through(&hard, &soft).unwrap();
    assert_eq!(y.to_vec(), vec![0.0, 1.0, 0.0]);
    let w = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    y.mul(&w).unwrap().sum().backward();
    assert_eq!(soft.grad().unwrap(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn forward_values() {
    let x = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
    assert_eq!(x.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
    let c = Tensor::from_vec(&[1, 4], vec![3.0; 4]).unwrap();
    assert!(c.layer_norm(1e-5).to_vec().iter().all(|&v| v == 0.0));
    let a = Tensor::randn(&[4, 3], 1.0, &mut rng(1));
    assert_eq!(Tensor::eye(4).matmul(&a).unwrap().to_vec(), a.to_vec());
}

#[test]
fn row_normalizations_hold_tightly() {
    let x = Tensor::randn(&[20, 17], 5.0, &mut rng(11));
    for row in x.softmax(1).unwrap().to_vec().chunks(17) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for row in x.layer_norm(1e-12).to_vec().chunks(17) {
        let mean = row.iter().sum::<f64>() / 17.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_values() {
    let uniform = Tensor::zeros(&[3, 277]);
    let loss = cross_entropy(&uniform, &[0, 100, 276], 0).unwrap().item();
    assert!((loss - (277f64).ln()).abs() < 1e-12);
    assert!((loss - 5.624).abs() < 1e-3);

    let mut d = vec![0.0; 2 * 5];
    d[2] = 1000.0;
    d[5 + 4] = 1000.0;
    let sharp = Tensor::from_vec(&[2, 5], d).unwrap();
    assert!(cross_entropy(&sharp, &[2, 4], 9).unwrap().item() < 1e-12);

    assert_eq!(cross_entropy(&uniform, &[0, 0, 0], 0).unwrap_err(), TensorError::AllIgnored);
}

#[test]
fn bce_values() {
    let zero = Tensor::scalar(0.0);
    for label in [0.0, 1.0] {
        assert!((bce_logits(&zero, label).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }
    assert!(bce_logits(&Tensor::scalar(20.0), 1.0).item() < 1e-8);
    assert!(bce_logits(&Tensor::scalar(-800.0), 1.0).item().is_finite());
    assert!((bce_logits(&Tensor::scalar(-800.0), 1.0).item() - 800.0).abs() < 1e-9);
}

#[test]
fn shape_errors_name_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = a.matmul(&b).unwrap_err();
    assert_eq!(err.to_string(), "shape mismatch in matmul: [2, 3] vs [2, 3]");
    assert!(a.add(&Tensor::zeros(&[3, 2])).is_err());
    assert!(a.add_row(&Tensor::zeros(&[2])).is_err());
    assert!(a.embedding_lookup(&[2]).is_err());
    assert!(Tensor::from_vec(&[2, 2], vec![1.0]).is_err());
}

#[test]
fn shared_subexpressions_accumulate() {
    // y = x·x + 3x with x used three times
    let x = Tensor::param(&[1], vec![2.0]).unwrap();
    let y = x.mul(&x).unwrap().add(&x.scale(3.0)).unwrap().sum();
    y.backward();
    assert_eq!(x.grad().unwrap(), vec![7.0]);
    // a second backward accumulates
    y.backward();
    assert_eq!(x.grad().unwrap(), vec![14.0]);
}

#[test]
fn every_reachable_leaf_gets_a_gradient() {
    let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
    // b only reaches the loss through a zero mask
    let y = a.sum().add(&b.dropout_with_mask(vec![0.0, 0.0]).unwrap().sum()).unwrap();
    y.backward();
    assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
    assert_eq!(b.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    let y = no_grad(|| x.scale(2.0));
    assert!(!y.requires_grad());
    assert!(x.scale(2.0).requires_grad());
    assert!(!x.detach().requires_grad());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(5);
        let a = Tensor::randn(&[6, 6], 1.0, &mut r);
        let b = Tensor::randn(&[6, 6], 1.0, &mut r);
        a.matmul(&b).unwrap().softmax(1).unwrap().layer_norm(1e-5).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), std::slice::from_ref(&p));
    opt.step(std::slice::from_ref(&p)).unwrap();
    assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5]);
    assert_eq!(opt.state.m[0], vec![0.0; 3]);
    assert_eq!(opt.state.v[0], vec![0.0; 3]);
    assert_eq!(opt.state.step, 1);
}

#[test]
fn adam_first_step_matches_hand_computation() {
    let cfg = AdamConfig { lr: 0.01, ..Default::default() };
    let p = Tensor::param(&[2], vec![0.0, 0.0]).unwrap();
    let mut opt = Adam::new(cfg, std::slice::from_ref(&p));
    let g = [0.5, -3.0];
    *p.0.grad.borrow_mut() = Some(g.to_vec());
    opt.step(std::slice::from_ref(&p)).unwrap();
    for (x, g) in p.to_vec().iter().zip(g) {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps)
        let expected = -cfg.lr * g / (g.abs() + cfg.eps);
        assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
    }
    assert!(p.grad().is_none());
}

#[test]
fn adam_constant_gradient_steps_approach_lr() {
    let cfg = AdamConfig { lr: 1e-3, ..Default::default() };
    let p = Tensor::param(&[1], vec![0.0]).unwrap();
    let mut opt = Adam::new(cfg, std::slice::from_ref(&p));
    let mut prev = 0.0;
    let mut last_step = 0.0;
    for _ in 0..500 {
        *p.0.grad.borrow_mut() = Some(vec![-0.37]);
        opt.step(std::slice::from_ref(&p)).unwrap();
        last_step = p.item() - prev;
        prev = p.item();
    }
    assert!((last_step / cfg.lr - 1.0).abs() < 1e-6, "{last_step}");
}

#[test]
fn adam_rejects_mismatched_params() {
    let p = Tensor::param(&[2], vec![0.0; 2]).unwrap();
    let q = Tensor::param(&[3], vec![0.0; 3]).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), std::slice::from_ref(&p));
    assert!(matches!(opt.step(&[q]), Err(TensorError::ShapeMismatch { .. })));
}
