use memroute::attention::{attend, attend_subset, attention_cost, AttentionParams};
use memroute::params::bind;
use memroute::{Graph, Rng, Tensor};
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

fn run(x: &Tensor<f64>, p: &AttentionParams<Tensor<f64>>, heads: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = bind(p, &mut g, false);
    let out = attend(&mut g, xv, &pv, heads).unwrap();
    g.value(out).clone()
}

fn mm(a: &[f64], rows: usize, inner: usize, w: &Tensor<f64>) -> Vec<f64> {
    let cols = w.shape()[1];
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = (0..inner).map(|k| a[i * inner + k] * w.at(&[k, j])).sum();
        }
    }
    out
}

/// Loop-based attention for one sample `[N,D]`.
fn naive(
    x: &[f64],
    n: usize,
    dim: usize,
    p: &AttentionParams<Tensor<f64>>,
    heads: usize,
) -> Vec<f64> {
    let d = dim / heads;
    let q = mm(x, n, dim, &p.wq);
    let k = mm(x, n, dim, &p.wk);
    let v = mm(x, n, dim, &p.wv);
    let mut ctx = vec![0.0; n * dim];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..d)
                        .map(|c| q[i * dim + h * d + c] * k[j * dim + h * d + c])
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                ctx[i * dim + h * d + c] = (0..n).map(|j| e[j] / z * v[j * dim + h * d + c]).sum();
            }
        }
    }
    mm(&ctx, n, dim, &p.wo)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn single_token_is_value_then_output_projection() {
    let p = AttentionParams::<Tensor<f64>>::init(8, &mut Rng::seed(1));
    let x = random(&[1, 1, 8], 2);
    let out = run(&x, &p, 2);
    let expect = mm(&mm(x.data(), 1, 8, &p.wv), 1, 8, &p.wo);
    assert_close(out.data(), &expect, 1e-12);
}

#[test]
fn identical_tokens_give_identical_rows() {
    let p = AttentionParams::<Tensor<f64>>::init(8, &mut Rng::seed(3));
    let row = random(&[8], 4);
    let x = Tensor::new(vec![1, 5, 8], row.data().repeat(5)).unwrap();
    let out = run(&x, &p, 4);
    let expect = mm(&mm(row.data(), 1, 8, &p.wv), 1, 8, &p.wo);
    for i in 0..5 {
        assert_close(&out.data()[i * 8..(i + 1) * 8], &expect, 1e-12);
    }
}

#[test]
fn matches_per_head_loops() {
    let p = AttentionParams::<Tensor<f64>>::init(12, &mut Rng::seed(5));
    let x = random(&[2, 7, 12], 6);
    let out = run(&x, &p, 3);
    for b in 0..2 {
        let expect = naive(&x.data()[b * 84..(b + 1) * 84], 7, 12, &p, 3);
        assert_close(&out.data()[b * 84..(b + 1) * 84], &expect, 1e-12);
    }
}

#[test]
fn head_count_must_divide_width() {
    let p = AttentionParams::<Tensor<f64>>::init(8, &mut Rng::seed(0));
    let mut g = Graph::new();
    let xv = g.constant(random(&[1, 3, 8], 1));
    let pv = bind(&p, &mut g, false);
    assert!(matches!(
        attend(&mut g, xv, &pv, 3),
        Err(memroute::Error::Config(_))
    ));
}

#[test]
fn full_subset_reproduces_global_attention_bitwise() {
    let p = AttentionParams::<Tensor<f64>>::init(8, &mut Rng::seed(7));
    let x = random(&[2, 6, 8], 8);
    let full = run(&x, &p, 2);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let pv = bind(&p, &mut g, false);
    let idx = vec![(0..6).collect::<Vec<_>>(); 2];
    let parts = attend_subset(&mut g, xv, &idx, &pv, 2).unwrap();
    for (b, part) in parts.iter().enumerate() {
        assert_eq!(
            g.value(part.unwrap()).data(),
            &full.data()[b * 48..(b + 1) * 48]
        );
    }
}

#[test]
fn subset_equals_attention_over_gathered_rows() {
    let p = AttentionParams::<Tensor<f64>>::init(8, &mut Rng::seed(9));
    let x = random(&[2, 6, 8], 10);
    let idx = vec![vec![0, 2, 5], vec![]];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = bind(&p, &mut g, false);
    let parts = attend_subset(&mut g, xv, &idx, &pv, 2).unwrap();
    assert!(parts[1].is_none());
    let rows: Vec<f64> = idx[0]
        .iter()
        .flat_map(|&i| x.data()[i * 8..(i + 1) * 8].to_vec())
        .collect();
    let expect = naive(&rows, 3, 8, &p, 2);
    assert_close(g.value(parts[0].unwrap()).data(), &expect, 1e-12);
}

#[test]
fn subset_rejects_bad_indices() {
    let p = AttentionParams::<Tensor<f64>>::init(8, &mut Rng::seed(0));
    let mut g = Graph::new();
    let xv = g.constant(random(&[1, 4, 8], 1));
    let pv = bind(&p, &mut g, false);
    assert!(attend_subset(&mut g, xv, &[vec![2, 1]], &pv, 2).is_err());
    assert!(attend_subset(&mut g, xv, &[vec![1, 1]], &pv, 2).is_err());
    assert!(attend_subset(&mut g, xv, &[vec![4]], &pv, 2).is_err());
    assert!(attend_subset(&mut g, xv, &[vec![0], vec![1]], &pv, 2).is_err());
}

#[test]
fn map_bytes_quadratic_law() {
    for n in [1u64, 7, 196, 1024] {
        let full = attention_cost(n, 6, 384, 4).map_bytes;
        assert_eq!(full, 4 * 6 * n * n);
        assert_eq!(attention_cost(2 * n, 6, 384, 4).map_bytes, 4 * full);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permutation_equivariant(seed in 0u64..1000, n in 1usize..7) {
        let p = AttentionParams::<Tensor<f64>>::init(8, &mut Rng::seed(seed));
        let x = random(&[1, n, 8], seed + 1);
        let mut rng = Rng::seed(seed + 2);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let px = Tensor::new(vec![1, n, 8], perm.iter().flat_map(|&i| x.data()[i * 8..(i + 1) * 8].to_vec()).collect()).unwrap();
        let out = run(&x, &p, 2);
        let pout = run(&px, &p, 2);
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                prop_assert!((pout.data()[r * 8 + c] - out.data()[i * 8 + c]).abs() < 1e-12);
            }
        }
    }
}
