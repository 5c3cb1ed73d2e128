//! Forward values of every graph op against naive loops, and reverse-mode
//! gradients against central differences.

use memroute::gradcheck::{grad_check, DEFAULT_STEP};
use memroute::{Graph, Rng, Tensor, Var};
use proptest::prelude::*;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Rng::seed(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.range(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn eval<F: Fn(&mut Graph<f64>, Var) -> memroute::Result<Var>>(
    x: &Tensor<f64>,
    f: F,
) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v).unwrap();
    g.value(out).clone()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(t64(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.constant(t64(&[2, 2], &[2., 3., 4., 5.]));
    let out = g.matmul(i, m).unwrap();
    assert_eq!(g.value(out).data(), &[2., 3., 4., 5.]);

    let a = g.constant(t64(&[1, 2], &[1., 2.]));
    let b = g.constant(t64(&[2, 1], &[3., 4.]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let mut expect = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expect[i * 2 + j] += a.at(&[i, k]) * b.at(&[k, j]);
            }
        }
    }
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let out = g.matmul(av, bv).unwrap();
    assert_close(g.value(out).data(), &expect, 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 2]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn batched_matmul_broadcasts_single_matrix() {
    let a = random(&[2, 3, 4], 3);
    let b = random(&[4, 5], 4);
    let out = eval(&a, |g, x| {
        let w = g.constant(b.clone());
        g.matmul(x, w)
    });
    assert_eq!(out.shape(), &[2, 3, 5]);
    for t in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let e: f64 = (0..4).map(|k| a.at(&[t, i, k]) * b.at(&[k, j])).sum();
                assert!((out.at(&[t, i, j]) - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let out = eval(&t64(&[3], &[0., 0., 0.]), |g, x| g.softmax(x, 0));
    assert_close(out.data(), &[1. / 3.; 3], 1e-15);

    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_f64(vec![2], &[1000., 0.]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0f32, 0.0]);

    let x = [1.0f64, 2.0, 3.0];
    let z: f64 = x.iter().map(|v| v.exp()).sum();
    let oracle: Vec<f64> = x.iter().map(|v| v.exp() / z).collect();
    let mut g = Graph::<f32>::new();
    let xv = g.constant(Tensor::from_f64(vec![3], &x).unwrap());
    let y = g.softmax(xv, 0).unwrap();
    assert_close(&g.value(y).to_f64_vec(), &oracle, 1e-7);
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = random(&[5, 7], 9).map(|v| v * 20.0);
    let y = eval(&x, |g, v| g.softmax(v, 1));
    for r in 0..5 {
        let s: f64 = (0..7).map(|c| y.at(&[r, c])).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let y32 = {
        let mut g = Graph::<f32>::new();
        let v = g.constant(x.cast::<f32>());
        let o = g.softmax(v, 1).unwrap();
        g.value(o).clone()
    };
    for r in 0..5 {
        let s: f64 = (0..7).map(|c| y32.at(&[r, c]) as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    // softmax along a middle axis
    let x = random(&[2, 3, 4], 10);
    let y = eval(&x, |g, v| g.softmax(v, 1));
    for a in 0..2 {
        for c in 0..4 {
            let s: f64 = (0..3).map(|b| y.at(&[a, b, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn log_softmax_examples() {
    let out = eval(&t64(&[2], &[0., 0.]), |g, x| g.log_softmax(x, 0));
    assert_close(out.data(), &[-std::f64::consts::LN_2; 2], 1e-15);

    let x = random(&[4, 6], 11).map(|v| v * 5.0);
    let ls = eval(&x, |g, v| g.log_softmax(v, 1));
    let sm = eval(&x, |g, v| g.softmax(v, 1));
    assert_close(ls.data(), &sm.map(f64::ln).to_f64_vec(), 1e-6);

    let z = (5.0f64.exp() + 1.0f64.exp()).ln();
    let mut g = Graph::<f32>::new();
    let xv = g.constant(Tensor::from_f64(vec![2], &[5., 1.]).unwrap());
    let y = g.log_softmax(xv, 0).unwrap();
    assert_close(&g.value(y).to_f64_vec(), &[5. - z, 1. - z], 1e-6);
}

#[test]
fn layer_norm_examples() {
    let gain = Tensor::<f64>::ones(vec![4]);
    let bias = Tensor::<f64>::zeros(vec![4]);
    let run = |x: &Tensor<f64>, gain: &Tensor<f64>, bias: &Tensor<f64>, eps: f64| {
        eval(x, |g, v| {
            let (gv, bv) = (g.constant(gain.clone()), g.constant(bias.clone()));
            g.layer_norm(v, gv, bv, eps)
        })
    };
    let out = run(&Tensor::full(vec![4], 3.5), &gain, &bias, 1e-6);
    assert!(out.data().iter().all(|&v| v == 0.0));

    let out = run(
        &t64(&[2], &[1., -1.]),
        &Tensor::ones(vec![2]),
        &Tensor::zeros(vec![2]),
        0.0,
    );
    assert_close(out.data(), &[1., -1.], 1e-15);

    let x = random(&[8], 12).map(|v| v * 3.0 + 1.0);
    let out = run(&x, &Tensor::ones(vec![8]), &Tensor::zeros(vec![8]), 1e-12);
    let mean = out.sum() / 8.0;
    let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-7);
    assert!((var - 1.0).abs() < 1e-5);

    // affine part
    let gain = random(&[8], 13);
    let bias = random(&[8], 14);
    let affine = run(&x, &gain, &bias, 1e-12);
    for k in 0..8 {
        assert!(
            (affine.data()[k] - (out.data()[k] * gain.data()[k] + bias.data()[k])).abs() < 1e-12
        );
    }
}

fn naive_dwconv(x: &Tensor<f64>, k: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (kh, kw) = (k.shape()[1], k.shape()[2]);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = 0.0;
                    for i in 0..kh as isize {
                        for j in 0..kw as isize {
                            let sy = y + i - (kh / 2) as isize;
                            let sx = xx + j - (kw / 2) as isize;
                            if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                acc += k.at(&[ci, i as usize, j as usize])
                                    * x.at(&[bi, ci, sy as usize, sx as usize]);
                            }
                        }
                    }
                    out[((bi * c + ci) * h + y as usize) * w + xx as usize] = acc;
                }
            }
        }
    }
    out
}

fn dwconv(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    eval(x, |g, v| {
        let kv = g.constant(k.clone());
        g.depthwise_conv2d(v, kv)
    })
}

#[test]
fn depthwise_conv_examples() {
    let x = random(&[1, 2, 5, 5], 20);
    let mut one_hot = Tensor::<f64>::zeros(vec![2, 3, 3]);
    one_hot.data_mut()[4] = 1.0;
    one_hot.data_mut()[13] = 1.0;
    assert_eq!(dwconv(&x, &one_hot), x);

    let constant = Tensor::<f64>::full(vec![1, 2, 5, 5], 0.7);
    let out = dwconv(&constant, &Tensor::ones(vec![2, 3, 3]));
    for c in 0..2 {
        for y in 1..4 {
            for xx in 1..4 {
                assert!((out.at(&[0, c, y, xx]) - 9.0 * 0.7).abs() < 1e-12);
            }
        }
    }

    let k = random(&[2, 3, 3], 21);
    assert_close(dwconv(&x, &k).data(), &naive_dwconv(&x, &k), 1e-6);
}

#[test]
fn even_kernels_are_config_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 4, 4]));
    let k = g.constant(Tensor::zeros(vec![1, 2, 2]));
    assert!(matches!(
        g.depthwise_conv2d(x, k),
        Err(memroute::Error::Config(_))
    ));
    let x = g.constant(Tensor::zeros(vec![1, 1, 4]));
    let k = g.constant(Tensor::zeros(vec![2]));
    assert!(matches!(g.conv1d(x, k), Err(memroute::Error::Config(_))));
}

fn conv1d(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    eval(x, |g, v| {
        let kv = g.constant(k.clone());
        g.conv1d(v, kv)
    })
}

#[test]
fn conv1d_examples() {
    let x = random(&[2, 1, 16], 30);
    assert_eq!(conv1d(&x, &t64(&[3], &[0., 1., 0.])), x);

    let out = conv1d(
        &t64(&[1, 1, 4], &[1., 1., 1., 1.]),
        &t64(&[3], &[1., 1., 1.]),
    );
    assert_eq!(out.data(), &[2., 3., 3., 2.]);

    let k = random(&[5], 31);
    let mut expect = vec![0.0; 32];
    for r in 0..2 {
        for c in 0..16isize {
            for j in 0..5isize {
                let s = c + j - 2;
                if (0..16).contains(&s) {
                    expect[r * 16 + c as usize] +=
                        k.data()[j as usize] * x.data()[r * 16 + s as usize];
                }
            }
        }
    }
    assert_close(conv1d(&x, &k).data(), &expect, 1e-6);
}

#[test]
fn backward_examples() {
    let x = random(&[6], 40);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 1.0));

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_close(
        g.grad(v).unwrap().data(),
        &x.map(|e| 2.0 * e).to_f64_vec(),
        1e-15,
    );
}

#[test]
fn backward_error_paths() {
    let mut g = Graph::<f64>::new();
    let v = g.param(Tensor::ones(vec![3]));
    let c = g.constant(Tensor::ones(vec![3]));
    assert!(g.backward(v).is_err(), "non-scalar loss");
    let s = g.sum(c).unwrap();
    assert!(g.backward(s).is_err(), "detached loss");
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert!(g.backward(s).is_err(), "repeat without reset");
    g.reset_grads();
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    // trainable leaf unrelated to the loss still gets a (zero) gradient
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::ones(vec![2]));
    let b = g.param(Tensor::ones(vec![2]));
    let s = g.sum(a).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(b).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(vec![2], 1e30));
    let err = g.mul(x, x).unwrap_err();
    assert!(matches!(err, memroute::Error::NonFinite { op: "mul" }));
}

#[test]
fn tape_is_topologically_ordered() {
    let mut g = Graph::<f64>::new();
    let a = g.param(random(&[3], 1));
    let b = g.mul(a, a).unwrap();
    let c = g.add(b, a).unwrap();
    assert!(a.index() < b.index() && b.index() < c.index());
    assert_eq!(g.len(), 3);
}

#[test]
fn gradcheck_examples() {
    let x = t64(&[3], &[1., 2., 3.]);
    let err = grad_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            g.sum(sq)
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let err = grad_check(
        |g, v| {
            let s = g.softmax(v, 0)?;
            let sq = g.mul(s, s)?;
            g.sum(sq)
        },
        &random(&[5], 41),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

/// Weighted sum with fixed random weights so every output element matters.
fn weighted(g: &mut Graph<f64>, v: Var, seed: u64) -> memroute::Result<Var> {
    let w = g.constant(random(g.shape(v), seed));
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn check(name: &str, shape: &[usize], f: impl Fn(&mut Graph<f64>, Var) -> memroute::Result<Var>) {
    let err = grad_check(
        |g, v| {
            let y = f(g, v)?;
            weighted(g, y, 99)
        },
        &random(shape, 7),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{name}: relative error {err}");
}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let other = random(&[2, 5], 50);
    let row = random(&[5], 51);
    check("add", &[2, 5], |g, v| {
        let o = g.constant(other.clone());
        g.add(v, o)
    });
    check("add-rhs-broadcast", &[5], |g, v| {
        let o = g.constant(other.clone());
        g.add(o, v)
    });
    check("sub", &[2, 5], |g, v| {
        let o = g.constant(row.clone());
        g.sub(v, o)
    });
    check("sub-rhs", &[5], |g, v| {
        let o = g.constant(other.clone());
        g.sub(o, v)
    });
    check("mul", &[2, 5], |g, v| {
        let o = g.constant(row.clone());
        g.mul(v, o)
    });
    check("mul-rhs-broadcast", &[5], |g, v| {
        let o = g.constant(other.clone());
        g.mul(o, v)
    });
    check("affine", &[10], |g, v| g.affine(v, -1.5, 0.25));
    check("matmul-lhs", &[2, 5], |g, v| {
        let w = g.constant(random(&[5, 3], 52));
        g.matmul(v, w)
    });
    check("matmul-rhs", &[5, 3], |g, v| {
        let a = g.constant(random(&[2, 4, 5], 53));
        g.matmul(a, v)
    });
    check("matmul-batched", &[2, 2, 5], |g, v| {
        let w = g.constant(random(&[2, 5, 2], 54));
        g.matmul(v, w)
    });
    check("transpose", &[2, 5], |g, v| g.transpose(v));
    check("permute", &[2, 5], |g, v| {
        let r = g.reshape(v, &[1, 2, 5])?;
        g.permute(r, &[2, 0, 1])
    });
    check("broadcast_to", &[5], |g, v| g.broadcast_to(v, &[2, 5]));
    check("softmax", &[2, 5], |g, v| g.softmax(v, 1));
    check("softmax-axis0", &[2, 5], |g, v| g.softmax(v, 0));
    check("log_softmax", &[2, 5], |g, v| g.log_softmax(v, 1));
    check("layer_norm-x", &[2, 5], |g, v| {
        let (a, b) = (g.constant(random(&[5], 55)), g.constant(random(&[5], 56)));
        g.layer_norm(v, a, b, 1e-6)
    });
    check("layer_norm-gain", &[5], |g, v| {
        let (x, b) = (
            g.constant(random(&[2, 5], 57)),
            g.constant(random(&[5], 58)),
        );
        g.layer_norm(x, v, b, 1e-6)
    });
    check("layer_norm-bias", &[5], |g, v| {
        let (x, a) = (
            g.constant(random(&[2, 5], 59)),
            g.constant(random(&[5], 60)),
        );
        g.layer_norm(x, a, v, 1e-6)
    });
    check("sigmoid", &[10], |g, v| g.sigmoid(v));
    check("gelu", &[10], |g, v| g.gelu(v));
    check("abs", &[10], |g, v| g.abs(v));
    check("mean", &[10], |g, v| g.mean(v));
    check("mean_axis", &[2, 5], |g, v| g.mean_axis(v, 1));
    check("mean_axis0", &[2, 5], |g, v| g.mean_axis(v, 0));
    check("concat", &[2, 5], |g, v| {
        let o = g.constant(random(&[2, 3], 61));
        g.concat(&[o, v, v], 1)
    });
    check("narrow", &[2, 5], |g, v| g.narrow(v, 1, 1, 3));
    check("split", &[10], |g, v| {
        let p = g.split(v, 0, &[4, 6])?;
        g.mul(p[0], p[0])
    });
    check("index_select", &[5, 2], |g, v| {
        g.index_select(v, 0, &[4, 0, 4, 2])
    });
    check("index_scatter", &[3, 2], |g, v| {
        g.index_scatter(v, 0, &[4, 0, 2], 5)
    });
    check("dwconv-x", &[1, 2, 3, 3], |g, v| {
        let k = g.constant(random(&[2, 3, 3], 62));
        g.depthwise_conv2d(v, k)
    });
    check("dwconv-kernel", &[2, 3, 3], |g, v| {
        let x = g.constant(random(&[2, 2, 3, 3], 63));
        g.depthwise_conv2d(x, v)
    });
    check("conv1d-x", &[2, 1, 5], |g, v| {
        let k = g.constant(random(&[3], 64));
        g.conv1d(v, k)
    });
    check("conv1d-kernel", &[3], |g, v| {
        let x = g.constant(random(&[2, 1, 5], 65));
        g.conv1d(x, v)
    });
    // frozen is held at the base point, as the routing replay does
    let frozen = random(&[10], 7);
    check("straight_through", &[10], |g, v| {
        let hard = Tensor::full(vec![10], 1.0);
        g.straight_through(v, &hard, &frozen)
    });
}

#[test]
fn straight_through_forward_is_hard_value() {
    let mut g = Graph::<f32>::new();
    let soft = g.param(Tensor::from_f64(vec![3], &[0.3, 0.7, 0.123456]).unwrap());
    let hard = Tensor::from_f64(vec![3], &[0.0, 1.0, 1.0]).unwrap();
    let frozen = g.value(soft).clone();
    let st = g.straight_through(soft, &hard, &frozen).unwrap();
    assert_eq!(g.value(st), &hard);
}

#[test]
fn index_ops_reject_bad_indices() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![3, 2]));
    assert!(g.index_select(x, 0, &[3]).is_err());
    assert!(g.index_scatter(x, 0, &[0, 0, 1], 4).is_err());
    assert!(g.index_scatter(x, 0, &[0, 1, 4], 4).is_err());
}

proptest! {
    #[test]
    fn scatter_inverts_gather_for_permutations(n in 1usize..8, d in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::seed(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.below(i + 1));
        }
        let x = random(&[n, d], seed);
        let back = eval(&x, |g, v| {
            let gathered = g.index_select(v, 0, &idx)?;
            g.index_scatter(gathered, 0, &idx, n)
        });
        prop_assert_eq!(back, x);
    }

    #[test]
    fn softmax_sums_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = vals.len();
        let y = eval(&t64(&[n], &vals), |g, v| g.softmax(v, 0));
        prop_assert!((y.sum() - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|&p| p > 0.0 && p <= 1.0));
    }
}
