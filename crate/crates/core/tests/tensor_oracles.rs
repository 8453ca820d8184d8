#![allow(clippy::needless_range_loop)]

mod common;

use common::{jacobi_eigen, jacobi_psd_sqrt, matmul_f64, random_psd};
use nextshot::tensor::{
    adaln_modulate, eigen_sym_f64, finite_diff_grad, layer_norm, masked_attention, masked_attention_blocks,
    psd_sqrt_f64, read_tensor, sym_psd_sqrt, write_tensor, KeyPattern, Rng, Tensor, LN_EPS,
};
use proptest::prelude::*;

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.get2(i, t) as f64 * b.get2(t, j) as f64;
            }
        }
    }
    out
}

fn scalar_attention(q: &Tensor, k: &Tensor, v: &Tensor, allowed: &dyn Fn(usize, usize) -> bool) -> Vec<f64> {
    let (n, d) = (q.rows(), q.cols());
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let scores: Vec<Option<f64>> = (0..n)
            .map(|j| {
                allowed(i, j)
                    .then(|| (0..d).map(|c| q.get2(i, c) as f64 * k.get2(j, c) as f64).sum::<f64>() / (d as f64).sqrt())
            })
            .collect();
        let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
        let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
        for (j, s) in scores.iter().enumerate() {
            if let Some(s) = s {
                let p = (s - max).exp() / z;
                for c in 0..d {
                    out[i * d + c] += p * v.get2(j, c) as f64;
                }
            }
        }
    }
    out
}

fn max_rel(a: &[f32], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        prop_assert_eq!(c.shape(), &[m, n]);
        prop_assert!(max_rel(c.data(), &triple_loop(&a, &b)) < 1e-5);
    }

    #[test]
    fn masked_attention_matches_scalar_softmax(n in 1usize..10, d in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let q = Tensor::randn(&[n, d], 1.5, &mut rng);
        let k = Tensor::randn(&[n, d], 1.5, &mut rng);
        let v = Tensor::randn(&[n, d], 1.0, &mut rng);
        let mut mask = Tensor::from_fn(&[n, n], |_| if rng.bernoulli(0.6) { 1.0 } else { 0.0 });
        for i in 0..n {
            let keep = rng.below(n);
            mask.set2(i, keep, 1.0);
        }
        let got = masked_attention(&q, &k, &v, &mask).unwrap();
        let want = scalar_attention(&q, &k, &v, &|i, j| mask.get2(i, j) != 0.0);
        prop_assert!(max_rel(got.data(), &want) < 1e-5);
    }

    #[test]
    fn adaln_matches_scalar_formula(n in 1usize..6, d in 2usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[n, d], 2.0, &mut rng);
        let scale = Tensor::randn(&[d], 0.5, &mut rng);
        let shift = Tensor::randn(&[d], 0.5, &mut rng);
        let gate = Tensor::randn(&[d], 0.5, &mut rng);
        let m = adaln_modulate(&x, &scale, &shift, &gate).unwrap();
        let mut want = Vec::new();
        for i in 0..n {
            let row: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for c in 0..d {
                let norm = (row[c] - mean) / (var + LN_EPS).sqrt();
                want.push(norm * (1.0 + scale.data()[c] as f64) + shift.data()[c] as f64);
            }
        }
        prop_assert!(max_rel(m.out.data(), &want) < 1e-5);
        prop_assert_eq!(m.gate, gate);
    }

    #[test]
    fn layer_norm_rows_are_standardized(n in 1usize..5, d in 4usize..32, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[n, d], 3.0, &mut rng);
        let y = layer_norm(&x).unwrap();
        for i in 0..n {
            let r = y.row(i);
            let mean = r.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn tensor_file_round_trip(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let t = Tensor::randn(&shape, 1.0, &mut rng);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }
}

#[test]
fn block_attention_matches_dense_bit_exactly() {
    let layout = nextshot::layout::build_layout(2, 3, 3, 4, 4).unwrap();
    let mask = nextshot::ham::build_ham(&layout);
    let mut rng = Rng::new(8);
    let n = layout.total();
    let (q, k, v) = (
        Tensor::randn(&[n, 5], 1.0, &mut rng),
        Tensor::randn(&[n, 5], 1.0, &mut rng),
        Tensor::randn(&[n, 5], 1.0, &mut rng),
    );
    let dense = masked_attention(&q, &k, &v, &mask.dense).unwrap();
    let blocks = masked_attention_blocks(&q, &k, &v, mask.as_ref()).unwrap();
    assert_eq!(dense, blocks);
    assert_eq!(mask.num_tokens(), n);
}

#[test]
fn fully_masked_row_is_an_error() {
    let q = Tensor::zeros(&[2, 2]);
    let mask = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(masked_attention(&q, &q, &q, &mask).is_err());
}

#[test]
fn psd_sqrt_agrees_with_jacobi_on_100_matrices() {
    let mut rng = Rng::new(2024);
    for case in 0..100 {
        let n = 1 + case % 8;
        let rank = 1 + rng.below(n + 2);
        let a = random_psd(n, rank, &mut rng);
        let ours = psd_sqrt_f64(&a, n).unwrap();
        let oracle = jacobi_psd_sqrt(&a, n);
        let scale = a.iter().fold(1f64, |m, v| m.max(v.abs())).sqrt();
        let err = ours.iter().zip(&oracle).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5 * scale, "case {case} (n={n}, rank={rank}): error {err:e}");
        let sq = matmul_f64(&ours, &ours, n);
        let back = sq.iter().zip(&a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(back < 1e-8 * scale * scale, "case {case}: S·S differs by {back:e}");
    }
}

#[test]
fn eigenvalues_agree_with_jacobi() {
    let mut rng = Rng::new(7);
    for n in 1..10 {
        let g: Vec<f64> = (0..n * n).map(|_| rng.normal() as f64).collect();
        let a: Vec<f64> = (0..n * n).map(|i| g[i] + g[(i % n) * n + i / n]).collect();
        let (vals, _) = eigen_sym_f64(&a, n);
        let (mut oracle, _) = jacobi_eigen(&a, n);
        oracle.sort_by(f64::total_cmp);
        for (x, y) in vals.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()), "n={n}: {x} vs {y}");
        }
    }
}

#[test]
fn sym_psd_sqrt_rejects_bad_input() {
    let nonsym = Tensor::matrix(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
    assert!(sym_psd_sqrt(&nonsym).is_err());
    let indefinite = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
    assert!(sym_psd_sqrt(&indefinite).is_err());
    let rect = Tensor::zeros(&[2, 3]);
    assert!(sym_psd_sqrt(&rect).is_err());
    let diag = Tensor::matrix(2, 2, vec![4.0, 0.0, 0.0, 9.0]).unwrap();
    assert_eq!(sym_psd_sqrt(&diag).unwrap().data(), &[2.0, 0.0, 0.0, 3.0]);
}

#[test]
fn finite_differences_of_a_quadratic() {
    let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
    let g = finite_diff_grad(|t| t.data().iter().map(|&v| (v as f64).powi(2)).sum(), &x, 1e-3).unwrap();
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-3);
    }
    assert!(finite_diff_grad(|_| 0.0, &x, 1.0).is_err());
}

#[test]
fn substreams_are_deterministic_and_distinct() {
    let root = Rng::new(11);
    let draw = |mut r: Rng| (0..4).map(|_| r.uniform()).collect::<Vec<_>>();
    assert_eq!(draw(root.substream("a")), draw(Rng::new(11).substream("a")));
    assert_ne!(draw(root.substream("a")), draw(root.substream("b")));
    assert_ne!(draw(root.substream_indexed("a", 0)), draw(root.substream_indexed("a", 1)));
}
