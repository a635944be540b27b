//! Independent reference implementations used as oracles by the test suites.
//!
//! Everything in this crate is deliberately naive: plain index loops and
//! textbook Jacobi iterations, sharing no code with the `gridflow` library.
//! It exists so that dual-route checks (fast implementation vs. slow
//! reference) stay genuinely two-route.

use ndarray::{Array2, Array4};

/// Mean over (t, h, w) of the squared Euclidean distance between
/// corresponding points of two `[T, Gh, Gw, 2]` grids. Naive loop form.
pub fn mse_naive(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let (t_len, gh, gw, _) = a.dim();
    assert_eq!(a.dim(), b.dim(), "grid shape mismatch");
    let mut acc = 0.0;
    for t in 0..t_len {
        for i in 0..gh {
            for j in 0..gw {
                let dx = a[[t, i, j, 0]] - b[[t, i, j, 0]];
                let dy = a[[t, i, j, 1]] - b[[t, i, j, 1]];
                acc += dx * dx + dy * dy;
            }
        }
    }
    acc / (t_len * gh * gw) as f64
}

/// Scene sample variance: mean over (k, t, h, w) of the squared deviation of
/// each sample from the pointwise mean over samples. Two-pass loop form.
pub fn kappa_naive(samples: &[Array4<f64>]) -> f64 {
    let k_len = samples.len();
    assert!(k_len >= 1);
    let (t_len, gh, gw, _) = samples[0].dim();
    let mut acc = 0.0;
    for t in 0..t_len {
        for i in 0..gh {
            for j in 0..gw {
                for c in 0..2 {
                    let mut mean = 0.0;
                    for s in samples {
                        mean += s[[t, i, j, c]];
                    }
                    mean /= k_len as f64;
                    for s in samples {
                        let d = s[[t, i, j, c]] - mean;
                        acc += d * d;
                    }
                }
            }
        }
    }
    acc / (k_len * t_len * gh * gw) as f64
}

/// Classic two-sided Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors) with `a = v * diag(l) * v^T`,
/// eigenvalues sorted descending.
pub fn jacobi_eigen_sym(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[[p, j]];
                    let mqj = m[[q, j]];
                    m[[p, j]] = c * mpj - s * mqj;
                    m[[q, j]] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| m[[i, i]]).collect();
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, dst]] = v[[r, src]];
        }
    }
    (vals, vecs)
}

/// One-sided Jacobi SVD. Returns (u, sigma, v) with `a = u * diag(sigma) * v^T`,
/// singular values sorted descending. `u` is m x n, `v` is n x n (thin form).
pub fn jacobi_svd(a: &Array2<f64>) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
    let (m, n) = a.dim();
    let mut w = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    app += w[[i, p]] * w[[i, p]];
                    aqq += w[[i, q]] * w[[i, q]];
                    apq += w[[i, p]] * w[[i, q]];
                }
                if apq.abs() <= 1e-15 * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wip = w[[i, p]];
                    let wiq = w[[i, q]];
                    w[[i, p]] = c * wip - s * wiq;
                    w[[i, q]] = s * wip + c * wiq;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| w[[i, j]] * w[[i, j]]).sum::<f64>().sqrt())
        .collect();
    let mut u = Array2::<f64>::zeros((m, n));
    for j in 0..n {
        if sigma[j] > 0.0 {
            for i in 0..m {
                u[[i, j]] = w[[i, j]] / sigma[j];
            }
        }
    }
    // sort descending
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let sigma_sorted: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let mut u_sorted = Array2::<f64>::zeros((m, n));
    let mut v_sorted = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..m {
            u_sorted[[i, dst]] = u[[i, src]];
        }
        for i in 0..n {
            v_sorted[[i, dst]] = v[[i, src]];
        }
    }
    sigma = sigma_sorted;
    (u_sorted, sigma, v_sorted)
}

/// Rank-`k` truncated-SVD reconstruction via the Jacobi SVD above.
pub fn rank_k_reconstruction(a: &Array2<f64>, k: usize) -> Array2<f64> {
    let (m, n) = a.dim();
    let (u, sigma, v) = jacobi_svd(a);
    let r = k.min(n);
    let mut out = Array2::<f64>::zeros((m, n));
    for j in 0..r {
        for row in 0..m {
            for col in 0..n {
                out[[row, col]] += sigma[j] * u[[row, j]] * v[[col, j]];
            }
        }
    }
    out
}

/// Reference low-rank trajectory score for a single object's track matrix:
/// Frobenius norm of the rank-`k` truncation residual, scaled by
/// sqrt(#entries).
pub fn lrtl_naive(tracks: &Array2<f64>, k: usize) -> f64 {
    let approx = rank_k_reconstruction(tracks, k);
    let (m, n) = tracks.dim();
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..n {
            let d = tracks[[i, j]] - approx[[i, j]];
            acc += d * d;
        }
    }
    (acc / (m * n) as f64).sqrt()
}

/// Singular values only (descending), via the Jacobi SVD.
pub fn singular_values(a: &Array2<f64>) -> Vec<f64> {
    jacobi_svd(a).1
}

/// Reference squared Fréchet distance between two Gaussians with dense
/// covariances, computed with the Jacobi eigensolver throughout.
pub fn frechet_naive(mu1: &[f64], cov1: &Array2<f64>, mu2: &[f64], cov2: &Array2<f64>) -> f64 {
    let n = mu1.len();
    let mean_term: f64 = (0..n).map(|i| (mu1[i] - mu2[i]) * (mu1[i] - mu2[i])).sum();
    let s1_half = sqrtm(cov1);
    let inner = s1_half.dot(cov2).dot(&s1_half);
    let (vals, _) = jacobi_eigen_sym(&symmetrize(&inner));
    let trace_sqrt: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr1: f64 = (0..n).map(|i| cov1[[i, i]]).sum();
    let tr2: f64 = (0..n).map(|i| cov2[[i, i]]).sum();
    mean_term + tr1 + tr2 - 2.0 * trace_sqrt
}

fn sqrtm(a: &Array2<f64>) -> Array2<f64> {
    let (vals, vecs) = jacobi_eigen_sym(&symmetrize(a));
    let n = a.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let s = vals[k].max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += s * vecs[[i, k]] * vecs[[j, k]];
            }
        }
    }
    out
}

fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    out
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
