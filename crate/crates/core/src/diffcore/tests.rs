use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences of `f` around `x`, one coordinate at a time.
fn finite_diff(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Relative error with a 1e-3 magnitude floor; finite differences carry
/// ~1e-9 absolute noise, so exact zeros (dead ReLUs) need a floor.
fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i, av).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn log_softmax_of_zeros() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(vec![0.0; 3]));
    let out = g.log_softmax(v);
    for &x in g.value(out).data() {
        assert!((x + 3f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn masked_sum_picks_masked_entries() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(vec![2.0, 5.0, 7.0]));
    let out = g.masked_sum(v, &[1.0, 0.0, 1.0]).unwrap();
    assert_eq!(g.value(out).data(), &[9.0]);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn zero_norm_is_degenerate() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(g.l2_normalize(a), Err(Error::Degenerate(_))));
    // floored variant stays finite
    let out = g.l2_normalize_floored(a, 1e-12).unwrap();
    assert!(g.value(out).is_finite());
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.param(rand_tensor(&mut rng, &[4, 5]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn gradient_of_half_squared_norm_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = rand_tensor(&mut rng, &[1, 6]);
    let mut g = Graph::new();
    let x = g.param(xv.clone());
    let xt = g.transpose(x).unwrap();
    let sq = g.matmul(x, xt).unwrap();
    let loss = g.scale(sq, 0.5);
    let grads = g.backward(loss).unwrap();
    for (a, b) in grads.get(x).unwrap().data().iter().zip(xv.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
}

/// Two-layer network exercising every primitive; returns a scalar.
fn two_layer(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, mask: &[f64]) -> Var {
    let h = g.matmul(x, w1).unwrap();
    let h = g.add_bias(h, b1).unwrap();
    let h = g.relu(h);
    let o = g.matmul(h, w2).unwrap();
    let n = g.l2_normalize(o).unwrap();
    let n = g.scale(n, 3.0);
    let ls = g.log_softmax(n);
    let picked = g.pick(ls, &[0, 2, 1]).unwrap();
    let ms = g.masked_sum(n, mask).unwrap();
    let ms2 = g.masked_sum(n, &mask.iter().map(|m| 1.0 - m).collect::<Vec<_>>()).unwrap();
    let cat = g.concat(&[ms, ms2]).unwrap();
    let cls = g.log_softmax(cat);
    let a = g.sum(picked);
    let b = g.sum(cls);
    let t = g.add(a, b).unwrap();
    g.scale(t, -1.0)
}

#[test]
fn two_layer_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask = [1.0, 0.0, 1.0, 0.0];
    for _ in 0..20 {
        let xs = rand_tensor(&mut rng, &[3, 5]);
        let w1s = rand_tensor(&mut rng, &[5, 6]);
        let b1s = rand_tensor(&mut rng, &[6]);
        let w2s = rand_tensor(&mut rng, &[6, 4]);

        let eval = |x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor| {
            let mut g = Graph::new();
            let (x, w1, b1, w2) = (
                g.constant(x.clone()),
                g.constant(w1.clone()),
                g.constant(b1.clone()),
                g.constant(w2.clone()),
            );
            let l = two_layer(&mut g, x, w1, b1, w2, &mask);
            g.value(l).item()
        };

        let mut g = Graph::new();
        let (x, w1, b1, w2) = (
            g.param(xs.clone()),
            g.param(w1s.clone()),
            g.param(b1s.clone()),
            g.param(w2s.clone()),
        );
        let l = two_layer(&mut g, x, w1, b1, w2, &mask);
        let grads = g.backward(l).unwrap();

        let h = 1e-6;
        let fx = finite_diff(&xs, h, |t| eval(t, &w1s, &b1s, &w2s));
        let fw1 = finite_diff(&w1s, h, |t| eval(&xs, t, &b1s, &w2s));
        let fb1 = finite_diff(&b1s, h, |t| eval(&xs, &w1s, t, &w2s));
        let fw2 = finite_diff(&w2s, h, |t| eval(&xs, &w1s, &b1s, t));
        for (var, fd) in [(x, fx), (w1, fw1), (b1, fb1), (w2, fw2)] {
            let err = max_rel_err(grads.get(var).unwrap(), &fd);
            assert!(err < 1e-5, "relative error {err}");
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let xs = rand_tensor(&mut rng, &[2, 4]);
        let ws = rand_tensor(&mut rng, &[4, 3]);
        let build = |g: &mut Graph, which: u8| {
            let x = g.constant(xs.clone());
            let w = g.param(ws.clone());
            let h = g.matmul(x, w).unwrap();
            let a = {
                let r = g.relu(h);
                g.sum(r)
            };
            let b = {
                let ls = g.log_softmax(h);
                let p = g.pick(ls, &[1, 2]).unwrap();
                g.sum(p)
            };
            let l = match which {
                0 => a,
                1 => b,
                _ => g.add(a, b).unwrap(),
            };
            (w, l)
        };
        let mut grads = Vec::new();
        for which in 0..3 {
            let mut g = Graph::new();
            let (w, l) = build(&mut g, which);
            grads.push(g.backward(l).unwrap().take(w).unwrap());
        }
        for i in 0..ws.len() {
            let lhs = grads[2].data()[i];
            let rhs = grads[0].data()[i] + grads[1].data()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}

#[test]
fn sgd_plain_step_subtracts_gradient() {
    let mut params = vec![Param::new("w", Tensor::vector(vec![1.0, 2.0]))];
    let grads = vec![Tensor::vector(vec![0.5, -0.25])];
    let mut st = OptimizerState::new(SgdConfig {
        learning_rate: 1.0,
        momentum: 0.0,
        weight_decay: 0.0,
    })
    .unwrap();
    sgd_step(&mut params, &grads, &mut st).unwrap();
    assert_eq!(params[0].value.data(), &[0.5, 2.25]);
}

#[test]
fn sgd_weight_decay_shrinks() {
    let lr = 0.1;
    let mut params = vec![Param::new("w", Tensor::vector(vec![3.0, -4.0]))];
    let grads = vec![Tensor::zeros(&[2])];
    let mut st = OptimizerState::new(SgdConfig {
        learning_rate: lr,
        momentum: 0.0,
        weight_decay: 2e-4,
    })
    .unwrap();
    sgd_step(&mut params, &grads, &mut st).unwrap();
    let f = 1.0 - lr * 2e-4;
    assert!((params[0].value.data()[0] - 3.0 * f).abs() < 1e-15);
    assert!((params[0].value.data()[1] + 4.0 * f).abs() < 1e-15);
}

#[test]
fn sgd_momentum_unrolls() {
    let g = 0.75;
    let mut params = vec![Param::new("w", Tensor::scalar(0.0))];
    let grads = vec![Tensor::scalar(g)];
    let mut st = OptimizerState::new(SgdConfig {
        learning_rate: 1.0,
        momentum: 0.9,
        weight_decay: 0.0,
    })
    .unwrap();
    sgd_step(&mut params, &grads, &mut st).unwrap();
    sgd_step(&mut params, &grads, &mut st).unwrap();
    assert!((params[0].value.item() + 2.9 * g).abs() < 1e-12);
}

#[test]
fn sgd_rejects_non_finite_gradient_by_name() {
    let mut params = vec![
        Param::new("a", Tensor::scalar(1.0)),
        Param::new("layer.weight", Tensor::scalar(1.0)),
    ];
    let grads = vec![Tensor::scalar(0.0), Tensor::scalar(f64::NAN)];
    let mut st = OptimizerState::new(SgdConfig::default()).unwrap();
    let err = sgd_step(&mut params, &grads, &mut st).unwrap_err();
    assert!(err.to_string().contains("layer.weight"));
    assert_eq!(params[0].value.item(), 1.0);
}

proptest! {
    #[test]
    fn l2_normalize_has_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..16)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(v));
        let n = g.l2_normalize(a).unwrap();
        prop_assert!((g.value(n).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_lr_is_identity(
        p in prop::collection::vec(-10f64..10.0, 1..8),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads = vec![Tensor::vector(p.iter().map(|_| rng.random_range(-5.0..5.0)).collect())];
        let before = Tensor::vector(p);
        let mut params = vec![Param::new("p", before.clone())];
        let mut st = OptimizerState::new(SgdConfig { learning_rate: 0.0, ..SgdConfig::default() }).unwrap();
        sgd_step(&mut params, &grads, &mut st).unwrap();
        sgd_step(&mut params, &grads, &mut st).unwrap();
        prop_assert_eq!(&params[0].value, &before);
    }
}
