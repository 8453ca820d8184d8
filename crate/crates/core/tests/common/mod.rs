#![allow(dead_code)]

use nextshot::tensor::{Rng, Tensor};

/// Cyclic Jacobi eigensolver for symmetric matrices. Returns eigenvalues and
/// the eigenvector matrix (columns), unsorted.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// PSD square root through the Jacobi eigendecomposition.
pub fn jacobi_psd_sqrt(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, v) = jacobi_eigen(a, n);
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = (0..n).map(|k| v[i * n + k] * vals[k].max(0.0).sqrt() * v[j * n + k]).sum();
        }
    }
    s
}

pub fn matmul_f64(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| a[i * n + k] * b[k * n + j]).sum();
        }
    }
    out
}

/// Random symmetric PSD matrix `G·Gᵀ` with `G` of size `n × rank`.
pub fn random_psd(n: usize, rank: usize, rng: &mut Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..n * rank).map(|_| rng.normal() as f64).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..rank).map(|k| g[i * rank + k] * g[j * rank + k]).sum();
        }
    }
    a
}

/// Fréchet distance between the Gaussian fits of two sets, computed with the
/// Jacobi oracle: `‖μa−μb‖² + tr Σa + tr Σb − 2 tr sqrt(Σa^½ Σb Σa^½)`.
pub fn oracle_fid(a: &[Vec<f64>], b: &[Vec<f64>], shrinkage: f64) -> f64 {
    let d = a[0].len();
    let stats = |s: &[Vec<f64>]| {
        let n = s.len() as f64;
        let mu: Vec<f64> = (0..d).map(|j| s.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let mut cov = vec![0.0; d * d];
        for x in s {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (x[i] - mu[i]) * (x[j] - mu[j]) / (n - 1.0);
                }
            }
        }
        for i in 0..d {
            cov[i * d + i] += shrinkage;
        }
        (mu, cov)
    };
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let sa = jacobi_psd_sqrt(&ca, d);
    let inner = matmul_f64(&matmul_f64(&sa, &cb, d), &sa, d);
    let root = jacobi_psd_sqrt(&inner, d);
    let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let tr = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    mean + tr(&ca) + tr(&cb) - 2.0 * tr(&root)
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

pub mod grad {
    use nextshot::caci::{caci_plan, ConditioningMode};
    use nextshot::diffusion::{
        batch_loss_and_grad, build_input, codes_for_model, noise_target, training_loss, TrainingSample,
    };
    use nextshot::model::{encode_image, model_forward, ModelConfig, ModelWeights};
    use nextshot::tensor::{finite_diff_grad, Rng, Tensor};
    use nextshot::world::{make_pair, EditPattern};

    /// Model with every trainable tensor drawn from `N(0, 0.3²)`, so no
    /// gradient path is blocked by the zero initialization.
    pub fn randomized(config: &ModelConfig, seed: u64) -> ModelWeights {
        let mut w = ModelWeights::init(config, seed).unwrap();
        let mut rng = Rng::new(seed ^ 0xabcd);
        for t in w.trainable_mut() {
            for v in t.data_mut() {
                *v = 0.3 * rng.normal();
            }
        }
        w
    }

    pub fn sample(w: &ModelWeights, seed: u64, t: f32) -> TrainingSample {
        let pair = make_pair(seed, EditPattern::CutIn, w.config.image_size).unwrap();
        let mut rng = Rng::new(seed);
        let p = w.config.patch_size;
        let cond = encode_image(&pair.cond, p).unwrap();
        let tgt = encode_image(&pair.tgt, p).unwrap();
        let noised = noise_target(&tgt, t, &mut rng).unwrap();
        let codes = codes_for_model(w, &pair.prompt, 0.0, &mut rng, false).unwrap();
        TrainingSample { input: build_input(w, &codes, &cond, &noised.zt, t).unwrap(), target: noised.velocity() }
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
        num / a.frobenius().max(b.frobenius()).max(1e-12)
    }

    /// Relative Frobenius error between the analytic gradient and a
    /// Richardson-extrapolated central difference, per trainable tensor.
    pub fn gradient_errors(config: &ModelConfig, mode: ConditioningMode) -> Vec<(String, f64, f64)> {
        let w = randomized(config, 11);
        let plan = caci_plan(mode);
        let batch = vec![sample(&w, 3, 0.37)];
        let (_, grads) = batch_loss_and_grad(&w, &batch, &plan).unwrap();
        let names: Vec<String> = w.trainable().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), grads.0.len());
        let s = &batch[0];
        names
            .into_iter()
            .enumerate()
            .map(|(i, name)| {
                let x0 = w.trainable()[i].1.clone();
                let loss = |x: &Tensor| {
                    let mut probe = w.clone();
                    *probe.trainable_mut()[i] = x.clone();
                    training_loss(&model_forward(&s.input, &plan, &probe).unwrap(), &s.input.layout, &s.target).unwrap()
                };
                let d1 = finite_diff_grad(loss, &x0, 4e-3).unwrap();
                let d2 = finite_diff_grad(loss, &x0, 8e-3).unwrap();
                let fd = Tensor::new(
                    d1.shape().to_vec(),
                    d1.data().iter().zip(d2.data()).map(|(a, b)| (4.0 * a - b) / 3.0).collect(),
                )
                .unwrap();
                (name, rel_err(&grads.0[i], &fd), fd.frobenius())
            })
            .collect()
    }
}
