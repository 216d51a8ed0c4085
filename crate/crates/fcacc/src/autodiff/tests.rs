use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{max_grad_err, numeric_gradient, Graph, Var};

fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Build the graph once for the analytic gradient, then rebuild per FD probe.
fn check<F>(inputs: Vec<ArrayD<f64>>, build: F, tol: f64)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root);

    let numeric = numeric_gradient(
        |xs| {
            let mut g2 = Graph::new();
            let vs: Vec<Var> = xs.iter().map(|a| g2.leaf(a.clone())).collect();
            let r = build(&mut g2, &vs);
            g2.scalar(r)
        },
        &inputs,
        1e-5,
    );

    for (i, v) in vars.iter().enumerate() {
        let a = grads.get_or_zeros(*v, inputs[i].shape());
        let err = max_grad_err(&a, &numeric[i]);
        assert!(err < tol, "input {i}: grad err {err}");
    }
}

#[test]
fn grad_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_array(&[3, 4], &mut rng);
    let b = rand_array(&[3, 4], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let sc = g.scale(m, 0.7);
        let af = g.affine(sc, v[0], 1.3, -0.4);
        g.mean_all(af)
    }, 1e-6);
}

#[test]
fn grad_mul_const_and_weighted_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_array(&[2, 5], &mut rng);
    let c = rand_array(&[2, 5], &mut rng);
    let w = rand_array(&[2, 5], &mut rng).mapv(f64::abs);
    check(vec![a], move |g, v| {
        let m = g.mul_const(v[0], c.clone());
        g.mean_weighted(m, w.clone())
    }, 1e-6);
}

#[test]
fn weighted_mean_all_zero_weights_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
    let m = g.mean_weighted(x, ArrayD::zeros(IxDyn(&[2, 2])));
    assert_eq!(g.scalar(m), 0.0);
    let grads = g.backward(m);
    assert!(grads.get_or_zeros(x, &[2, 2]).iter().all(|&v| v == 0.0));
}

#[test]
fn grad_add_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_array(&[2, 3, 4], &mut rng);
    let b = rand_array(&[3], &mut rng);
    check(vec![x, b], |g, v| {
        let y = g.add_bias(v[0], v[1], 1);
        g.mean_all(y)
    }, 1e-6);
}

#[test]
fn grad_matmul_and_bmm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_array(&[3, 4], &mut rng);
    let b = rand_array(&[4, 2], &mut rng);
    check(vec![a, b], |g, v| {
        let y = g.matmul(v[0], v[1]);
        g.mean_all(y)
    }, 1e-6);

    let a = rand_array(&[2, 3, 4], &mut rng);
    let b = rand_array(&[2, 4, 5], &mut rng);
    check(vec![a, b], |g, v| {
        let y = g.bmm(v[0], v[1]);
        g.mean_all(y)
    }, 1e-6);
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_array(&[2, 4, 3], &mut rng);
    check(vec![x.clone()], |g, v| {
        let t = g.swap_axes(v[0], 0, 1);
        let r = g.reshape(t, &[4, 6]);
        g.mean_all(r)
    }, 1e-6);
    check(vec![x], |g, v| {
        let s = g.slice_axis1(v[0], 1, 2);
        g.mean_all(s)
    }, 1e-6);
}

#[test]
fn grad_concat_and_diag() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_array(&[2, 3, 3], &mut rng);
    let b = rand_array(&[2, 3, 2], &mut rng);
    check(vec![a.clone(), b], |g, v| {
        let c = g.concat_last(&[v[0], v[1]]);
        g.mean_all(c)
    }, 1e-6);
    check(vec![a], |g, v| {
        let d = g.diag12(v[0]);
        g.mean_all(d)
    }, 1e-6);
}

#[test]
fn grad_gathers() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_array(&[3, 4, 2], &mut rng);
    let idx1 = Arc::new(ndarray::arr2(&[[1, 0, 3, 3], [2, 2, 0, 1], [0, 1, 2, 3]]));
    check(vec![x.clone()], |g, v| {
        let y = g.gather_axis1(v[0], idx1.clone());
        g.mean_all(y)
    }, 1e-6);
    let idx0 = Arc::new(ndarray::arr2(&[[2, 1, 0, 0], [0, 0, 1, 2], [1, 2, 2, 1]]));
    check(vec![x], |g, v| {
        let y = g.gather_axis0(v[0], idx0.clone());
        g.mean_all(y)
    }, 1e-6);
}

#[test]
fn lse_masked_matches_naive_and_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_array(&[2, 3, 4], &mut rng);
    let mask = Arc::new(ndarray::arr2(&[
        [true, false, true, true],
        [false, true, false, false],
        [true, true, true, false],
    ]));

    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone());
    let y = g.lse_masked3(xv, mask.clone());
    for a in 0..2 {
        for r in 0..3 {
            let naive: f64 = (0..4)
                .filter(|&c| mask[[r, c]])
                .map(|c| x[[a, r, c]].exp())
                .sum::<f64>()
                .ln();
            let got = g.value(y)[[a, r]];
            assert!((naive - got).abs() < 1e-12, "({a},{r}): {naive} vs {got}");
        }
    }

    check(vec![x.clone()], |g, v| {
        let y = g.lse_masked3(v[0], mask.clone());
        g.mean_all(y)
    }, 1e-6);

    // huge logits stay finite thanks to max subtraction
    let big = x.mapv(|v| v * 500.0);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(big);
    let y = g.lse_masked3(xv, mask.clone());
    assert!(g.value(y).iter().all(|v| v.is_finite()));
}

#[test]
fn lse_masked_empty_row_is_zero_with_zero_grad() {
    let x = ndarray::arr3(&[[[5.0, -2.0]]]).into_dyn();
    let mask = Arc::new(ndarray::arr2(&[[false, false]]));
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x);
    let y = g.lse_masked3(xv, mask);
    assert_eq!(g.value(y)[[0, 0]], 0.0);
    let m = g.mean_all(y);
    let grads = g.backward(m);
    assert!(grads.get_or_zeros(xv, &[1, 1, 2]).iter().all(|&v| v == 0.0));
}

#[test]
fn grad_gelu() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_array(&[4, 5], &mut rng).mapv(|v| v * 3.0);
    check(vec![x], |g, v| {
        let y = g.gelu(v[0]);
        g.mean_all(y)
    }, 1e-5);
}

#[test]
fn grad_max_axis1() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_array(&[3, 5, 2], &mut rng);
    check(vec![x.clone()], |g, v| {
        let y = g.max_axis1(v[0]);
        g.mean_all(y)
    }, 1e-6);

    // permutation invariance of the pooled value
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone());
    let y = g.max_axis1(xv);
    let perm: Vec<usize> = vec![4, 2, 0, 3, 1];
    let xp = ndarray::ArrayD::from_shape_fn(IxDyn(&[3, 5, 2]), |ix| x[[ix[0], perm[ix[1]], ix[2]]]);
    let mut g2 = Graph::<f64>::new();
    let xv2 = g2.leaf(xp);
    let y2 = g2.max_axis1(xv2);
    assert_eq!(g.value(y), g2.value(y2));
}

#[test]
fn grad_cluster_sqdist() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = rand_array(&[4, 3], &mut rng);
    let p = ndarray::Array2::from_shape_fn((4, 2), |_| rng.random::<f64>());
    let mu = ndarray::Array2::from_shape_fn((2, 3), |_| rng.random::<f64>() - 0.5);
    check(vec![z], move |g, v| g.cluster_sqdist(v[0], p.clone(), mu.clone()), 1e-6);
}

#[test]
fn conv1d_matches_naive_and_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &dilation in &[1usize, 2, 4] {
        let (b, c, l, o, k) = (2usize, 3usize, 9usize, 4usize, 3usize);
        let x = rand_array(&[b, c, l], &mut rng);
        let w = rand_array(&[o, c, k], &mut rng);
        let bias = rand_array(&[o], &mut rng);

        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let bv = g.leaf(bias.clone());
        let y = g.conv1d(xv, wv, bv, dilation);
        assert_eq!(g.value(y).shape(), &[b, o, l]);

        let pad = (k - 1) * dilation / 2;
        for bi in 0..b {
            for oi in 0..o {
                for li in 0..l {
                    let mut acc = bias[[oi]];
                    for ci in 0..c {
                        for ki in 0..k {
                            let src = li as isize + (ki * dilation) as isize - pad as isize;
                            if src >= 0 && (src as usize) < l {
                                acc += w[[oi, ci, ki]] * x[[bi, ci, src as usize]];
                            }
                        }
                    }
                    let got = g.value(y)[[bi, oi, li]];
                    assert!((acc - got).abs() < 1e-12, "d={dilation} ({bi},{oi},{li})");
                }
            }
        }

        check(vec![x, w, bias], |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], dilation);
            g.mean_all(y)
        }, 1e-5);
    }
}

#[test]
fn addn_sums_scalars() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(ndarray::arr0(1.5).into_dyn());
    let b = g.leaf(ndarray::arr0(-0.5).into_dyn());
    let c = g.leaf(ndarray::arr0(2.0).into_dyn());
    let s = g.addn(&[a, b, c]);
    assert_eq!(g.scalar(s), 3.0);
    let grads = g.backward(s);
    for v in [a, b, c] {
        assert_eq!(grads.get_or_zeros(v, &[]).iter().next().copied(), Some(1.0));
    }
}

#[test]
fn grad_accumulates_on_reused_node() {
    // x used twice: d/dx (x*x + x) = 2x + 1
    let x = ndarray::arr1(&[0.3, -0.7]).into_dyn();
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone());
    let sq = g.mul(xv, xv);
    let s = g.add(sq, xv);
    let m = g.mean_all(s);
    let grads = g.backward(m);
    let got = grads.get_or_zeros(xv, &[2]);
    for i in 0..2 {
        let want = (2.0 * x[[i]] + 1.0) / 2.0;
        assert!((got[[i]] - want).abs() < 1e-12);
    }
}
