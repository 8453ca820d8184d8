//! Symmetric eigendecomposition (Householder tridiagonalization followed by
//! implicit QL) and the PSD square root built on it. Works in `f64`.

use super::Tensor;
use crate::error::{Error, Result};

const SYM_TOL: f64 = 1e-6;
const NEG_EIG_TOL: f64 = 1e-8;

/// Reduces the symmetric matrix held in `v` (row-major, n×n) to tridiagonal
/// form. On return `v` holds the orthogonal transform, `d` the diagonal and
/// `e` the sub-diagonal.
fn tridiagonalize(v: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    let at = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|v| v.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in j + 1..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL iterations on the tridiagonal `(d, e)`, accumulating rotations
/// into `v`.
fn ql_implicit(v: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    let at = |i: usize, j: usize| i * n + j;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            loop {
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[at(k, i + 1)];
                        v[at(k, i + 1)] = s * v[at(k, i)] + c * h;
                        v[at(k, i)] = c * v[at(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

/// Eigenvalues (ascending) and eigenvectors (columns of a row-major n×n
/// matrix) of a symmetric `f64` matrix.
pub fn eigen_sym_f64(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut v = a.to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, n, &mut d, &mut e);
    ql_implicit(&mut v, n, &mut d, &mut e);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
    let vals = order.iter().map(|&i| d[i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + new_col] = v[r * n + old_col];
        }
    }
    (vals, vecs)
}

fn check_symmetric(a: &[f64], n: usize) -> Result<()> {
    let scale = a.iter().fold(1f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            let gap = (a[i * n + j] - a[j * n + i]).abs();
            if gap > SYM_TOL * scale {
                return Err(Error::Matrix {
                    property: "symmetric",
                    detail: format!("entries ({i},{j}) and ({j},{i}) differ by {gap:e}"),
                });
            }
        }
    }
    Ok(())
}

/// Symmetric PSD square root of an `f64` matrix.
pub fn psd_sqrt_f64(a: &[f64], n: usize) -> Result<Vec<f64>> {
    check_symmetric(a, n)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sym_psd_sqrt input".into()));
    }
    let (vals, vecs) = eigen_sym_f64(a, n);
    let top = vals.iter().fold(0f64, |m, v| m.max(v.abs()));
    let floor = -NEG_EIG_TOL * top.max(1.0);
    if let Some(&bad) = vals.iter().find(|&&l| l < floor) {
        return Err(Error::Matrix {
            property: "positive semidefinite",
            detail: format!("eigenvalue {bad:e} below tolerance {floor:e}"),
        });
    }
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (k, r) in roots.iter().enumerate() {
                acc += vecs[i * n + k] * r * vecs[j * n + k];
            }
            s[i * n + j] = acc;
            s[j * n + i] = acc;
        }
    }
    Ok(s)
}

fn square_f64(m: &Tensor) -> Result<(Vec<f64>, usize)> {
    let (r, c) = m.dims2()?;
    if r != c {
        return Err(Error::Matrix { property: "square", detail: format!("{r}x{c}") });
    }
    Ok((m.data().iter().map(|&v| v as f64).collect(), r))
}

/// Eigenvalues (ascending) and eigenvector matrix of a symmetric matrix.
pub fn sym_eigen(m: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (a, n) = square_f64(m)?;
    check_symmetric(&a, n)?;
    let (vals, vecs) = eigen_sym_f64(&a, n);
    Ok((vals, Tensor::new(vec![n, n], vecs.into_iter().map(|v| v as f32).collect())?))
}

/// The symmetric PSD matrix `S` with `S·S = m`. Eigenvalues slightly below
/// zero from round-off are clamped.
pub fn sym_psd_sqrt(m: &Tensor) -> Result<Tensor> {
    let (a, n) = square_f64(m)?;
    let s = psd_sqrt_f64(&a, n)?;
    Tensor::new(vec![n, n], s.into_iter().map(|v| v as f32).collect())
}
