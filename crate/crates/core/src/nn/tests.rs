use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(r, c, data).unwrap()
}

/// Central finite difference of `f` w.r.t. every entry of parameter `name`.
fn fd_grad(store: &ParamStore, name: &str, h: f64, f: &dyn Fn(&ParamStore) -> f64) -> Vec<f64> {
    let mut work = store.clone();
    let n = store.get(name).unwrap().numel();
    (0..n)
        .map(|i| {
            let orig = work.get(name).unwrap().data()[i];
            let mut at = |d: f64| {
                work.get_mut(name).unwrap().data_mut()[i] = orig + d;
                f(&work)
            };
            // Fourth-order central stencil.
            let g = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            g
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn matmul_identity_and_selector() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let i2 = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
    let m = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let sel = g.input(Tensor::row(&[1.0, 0.0])).unwrap();
    let col = g.input(Tensor::from_rows(&[vec![2.0], vec![5.0]]).unwrap()).unwrap();
    let q = g.matmul(sel, col).unwrap();
    assert_eq!(g.value(q).data(), &[2.0]);

    assert!(matches!(g.matmul(col, col), Err(crate::Error::Dimension(_))));
}

#[test]
fn matmul_grad_is_ones_times_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(&mut rng, 3, 3));
    store.insert("b", rand_tensor(&mut rng, 3, 3));
    let loss = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let a = g.param("a").unwrap();
        let b = g.param("b").unwrap();
        let p = g.matmul(a, b).unwrap();
        let l = g.sum(p).unwrap();
        (g.value(l).item(), g.backward(l).unwrap())
    };
    let (_, grads) = loss(&store);
    let ga = grads.get(&store, "a").unwrap();
    let b = store.get("b").unwrap();
    for i in 0..3 {
        for k in 0..3 {
            let expected: f64 = (0..3).map(|j| b.get(k, j)).sum();
            assert!((ga.get(i, k) - expected).abs() < 1e-12);
        }
    }
    let fd = fd_grad(&store, "a", 1e-5, &|s| loss(s).0);
    for (a, n) in ga.data().iter().zip(&fd) {
        assert!(rel_err(*a, *n) <= 1e-6, "{a} vs {n}");
    }
}

#[test]
fn elementwise_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::row(&[-1.0, 2.0])).unwrap();
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);

    let z = g.input(Tensor::row(&[0.0, 0.0])).unwrap();
    let s = g.softmax(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[3, 3])).unwrap();
    assert!(matches!(g.concat_cols(a, b), Err(crate::Error::Dimension(_))));
}

#[test]
fn softmax_rows_sum_to_one_and_log_softmax_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let mut t = rand_tensor(&mut rng, 5, 7);
    t.data_mut()[0] = 800.0;
    let x = g.input(t).unwrap();
    let s = g.softmax(x).unwrap();
    let ls = g.log_softmax(x).unwrap();
    for r in 0..5 {
        let row = g.value(s).row_slice(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (p, lp) in row.iter().zip(g.value(ls).row_slice(r)) {
            if *p > 1e-300 {
                assert!((p.ln() - lp).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn layer_norm_rows_are_standardised() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    store.insert("g", Tensor::full(&[1, 8], 1.0));
    store.insert("b", Tensor::zeros(&[1, 8]));
    let mut g = Graph::new(&store);
    let x = g.input(rand_tensor(&mut rng, 4, 8)).unwrap();
    let (gain, bias) = (g.param("g").unwrap(), g.param("b").unwrap());
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    for r in 0..4 {
        let row = g.value(y).row_slice(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn grl_forward_is_identity_and_backward_scales() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::row(&[1.5, -2.0]));
    let mut g = Graph::new(&store);
    let w = g.param("w").unwrap();
    let r = g.gradient_reversal(w, -1.0).unwrap();
    assert_eq!(g.value(r).data(), &[1.5, -2.0]);

    // Incoming gradient [1, −2] via a dot with constants.
    let a = g.input(Tensor::row(&[1.0, -2.0])).unwrap();
    let p = g.mul(r, a).unwrap();
    let l = g.sum(p).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(&store, "w").unwrap().data(), &[-1.0, 2.0]);
}

#[test]
fn grl_sign_matches_negated_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    store.insert("w", rand_tensor(&mut rng, 1, 4));
    let a = rand_tensor(&mut rng, 1, 4);
    let build = |s: &ParamStore, coeff: Option<f64>| {
        let mut g = Graph::new(s);
        let w = g.param("w").unwrap();
        let x = match coeff {
            Some(c) => g.gradient_reversal(w, c).unwrap(),
            None => w,
        };
        let av = g.input(a.clone()).unwrap();
        let p = g.mul(x, av).unwrap();
        let l = g.sum(p).unwrap();
        (g.value(l).item(), g.backward(l).unwrap())
    };
    let (_, grads) = build(&store, Some(-1.0));
    let fd = fd_grad(&store, "w", 1e-5, &|s| build(s, None).0);
    for ((gw, n), ai) in grads.get(&store, "w").unwrap().data().iter().zip(&fd).zip(a.data()) {
        assert!((gw + ai).abs() < 1e-12);
        assert!(rel_err(*gw, -n) < 1e-8);
    }
}

#[test]
fn backward_scalar_examples() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(3.0));
    let mut g = Graph::new(&store);
    let w = g.param("w").unwrap();
    let sq = g.mul(w, w).unwrap();
    let grads = g.backward(sq).unwrap();
    assert_eq!(grads.get(&store, "w").unwrap().item(), 6.0);

    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(1.0));
    let mut g = Graph::new(&store);
    let w = g.param("w").unwrap();
    let neg = g.scale(w, -1.0).unwrap();
    let r = g.relu(neg).unwrap();
    let grads = g.backward(r).unwrap();
    assert_eq!(grads.get(&store, "w").unwrap().item(), 0.0);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::row(&[1.0, 2.0]));
    let mut g = Graph::new(&store);
    let w = g.param("w").unwrap();
    assert!(matches!(g.backward(w), Err(crate::Error::Contract(_))));
}

fn mlp_store(seed: u64) -> (ParamStore, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert_uniform("l1.w", 4, 6, &mut rng);
    store.insert("l1.b", rand_tensor(&mut rng, 1, 6));
    store.insert_uniform("l2.w", 6, 3, &mut rng);
    store.insert("l2.b", rand_tensor(&mut rng, 1, 3));
    store.insert("ln.g", rand_tensor(&mut rng, 1, 6));
    store.insert("ln.b", rand_tensor(&mut rng, 1, 6));
    (store, rand_tensor(&mut rng, 5, 4))
}

/// Two-layer MLP touching every differentiable op in the graph.
fn mlp_loss(s: &ParamStore, x: &Tensor, coeff: f64) -> (f64, Grads) {
    let mut g = Graph::new(s);
    let x = g.input(x.clone()).unwrap();
    let w1 = g.param("l1.w").unwrap();
    let b1 = g.param("l1.b").unwrap();
    let h = g.matmul(x, w1).unwrap();
    let h = g.add_row(h, b1).unwrap();
    let (lg, lb) = (g.param("ln.g").unwrap(), g.param("ln.b").unwrap());
    let h = g.layer_norm(h, lg, lb, 1e-6).unwrap();
    let h = g.relu(h).unwrap();
    let ctx = g.context_stack(h, 3).unwrap();
    let left = g.slice_cols(ctx, 0, 6).unwrap();
    let mid = g.slice_cols(ctx, 6, 12).unwrap();
    let h = g.mul(left, mid).unwrap();
    let h = g.add(h, mid).unwrap();
    let pooled = g.max_pool_rows(h).unwrap();
    let att = g.matmul_nt(pooled, pooled).unwrap();
    let att = g.softmax(att).unwrap();
    let mixed = g.matmul(att, pooled).unwrap();
    let mean = g.mean_rows(mixed).unwrap();
    let rev = g.gradient_reversal(mean, coeff).unwrap();
    let w2 = g.param("l2.w").unwrap();
    let b2 = g.param("l2.b").unwrap();
    let o = g.matmul(rev, w2).unwrap();
    let o = g.add_row(o, b2).unwrap();
    let lp = g.log_softmax(o).unwrap();
    let ce = g.class_loss(lp, 1, 0.5).unwrap();
    let b = g.broadcast_rows(mean, 2).unwrap();
    let c = g.concat_cols(b, b).unwrap();
    let sub = g.sub(c, c).unwrap();
    let sq = g.mul(c, c).unwrap();
    let sq = g.add(sq, sub).unwrap();
    let reg = g.sum(sq).unwrap();
    let l = g.weighted_sum(&[(ce, 1.0), (reg, 0.1)]).unwrap();
    (g.value(l).item(), g.backward(l).unwrap())
}

#[test]
fn mlp_gradients_match_finite_differences_over_seeds() {
    for seed in 0..20 {
        let (store, x) = mlp_store(seed);
        let (_, grads) = mlp_loss(&store, &x, 1.0);
        for name in ["l1.w", "l1.b", "l2.w", "l2.b", "ln.g", "ln.b"] {
            let fd = fd_grad(&store, name, 1e-4, &|s| mlp_loss(s, &x, 1.0).0);
            for (a, n) in grads.get(&store, name).unwrap().data().iter().zip(&fd) {
                assert!(rel_err(*a, *n) <= 1e-4, "seed {seed} {name}: {a} vs {n}");
            }
        }
    }
}

#[test]
fn grl_plus_one_is_bit_identical_to_no_grl() {
    let (store, x) = mlp_store(42);
    let build = |with_grl: bool| {
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone()).unwrap();
        let w1 = g.param("l1.w").unwrap();
        let h = g.matmul(xv, w1).unwrap();
        let h = g.relu(h).unwrap();
        let h = if with_grl { g.gradient_reversal(h, 1.0).unwrap() } else { h };
        let m = g.mean_rows(h).unwrap();
        let w2 = g.param("l2.w").unwrap();
        let o = g.matmul(m, w2).unwrap();
        let lp = g.log_softmax(o).unwrap();
        let l = g.class_loss(lp, 2, 0.0).unwrap();
        g.backward(l).unwrap()
    };
    let (a, b) = (build(true), build(false));
    for name in ["l1.w", "l2.w"] {
        let (ga, gb) = (a.get(&store, name).unwrap(), b.get(&store, name).unwrap());
        assert!(ga.data().iter().zip(gb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn grl_antisymmetry_and_determinism() {
    let (store, x) = mlp_store(9);
    let (l1, pos) = mlp_loss(&store, &x, 0.7);
    let (l2, neg) = mlp_loss(&store, &x, -0.7);
    assert_eq!(l1.to_bits(), l2.to_bits());
    // Only l1.w/l1.b/ln.* sit upstream of the reversal; the regulariser also
    // reaches them, so compare the reversed path through l2-side params only
    // where the sole route is the reversal.
    for name in ["l2.w", "l2.b"] {
        assert_eq!(pos.get(&store, name).unwrap(), neg.get(&store, name).unwrap());
    }
    let (l3, again) = mlp_loss(&store, &x, 0.7);
    assert_eq!(l1.to_bits(), l3.to_bits());
    for name in ["l1.w", "l1.b", "l2.w", "l2.b", "ln.g", "ln.b"] {
        assert_eq!(pos.get(&store, name).unwrap(), again.get(&store, name).unwrap());
    }
}

#[test]
fn grl_negation_is_exact_when_it_is_the_only_route() {
    let (store, x) = mlp_store(4);
    let build = |c: f64| {
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone()).unwrap();
        let w1 = g.param("l1.w").unwrap();
        let b1 = g.param("l1.b").unwrap();
        let h = g.matmul(xv, w1).unwrap();
        let h = g.add_row(h, b1).unwrap();
        let h = g.relu(h).unwrap();
        let m = g.mean_rows(h).unwrap();
        let r = g.gradient_reversal(m, c).unwrap();
        let w2 = g.param("l2.w").unwrap();
        let o = g.matmul(r, w2).unwrap();
        let lp = g.log_softmax(o).unwrap();
        let l = g.class_loss(lp, 0, 0.5).unwrap();
        g.backward(l).unwrap()
    };
    let (pos, neg) = (build(1.3), build(-1.3));
    for name in ["l1.w", "l1.b"] {
        let (p, n) = (pos.get(&store, name).unwrap(), neg.get(&store, name).unwrap());
        assert!(p.data().iter().zip(n.data()).all(|(a, b)| *a == -*b));
    }
    assert_eq!(pos.get(&store, "l2.w"), neg.get(&store, "l2.w"));
}
