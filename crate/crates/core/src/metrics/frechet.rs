//! Squared Fréchet distance between Gaussian summaries of motion features.
//!
//! d^2 = |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))
//!
//! Covariances carry a ridge (eps * I): with few samples per side the raw
//! covariance is rank-deficient and the ridge keeps the square root defined.
//! Two exact representations are supported:
//!
//! * `Dense` — the d x d matrix, square root via symmetric
//!   eigendecomposition of S1^(1/2) S2 S1^(1/2).
//! * `Factored` — S = F^T F + ridge * I with F the centered sample matrix
//!   scaled by 1/sqrt(n-1). The product S1 S2 leaves the joint sample
//!   subspace invariant and acts as ridge^2 on its complement, so its
//!   nonzero spectrum is computed on an m-dimensional basis (m <= n1 + n2),
//!   which keeps high-dimensional feature spaces tractable.
//!
//! Both paths compute the same quantity; their agreement is tested.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default covariance ridge.
pub const COV_RIDGE: f64 = 1e-6;

/// Eigenvalues below this are treated as numerical error.
const NEG_EIG_TOL: f64 = -1e-8;

#[derive(Debug, Clone)]
pub enum CovRepr {
    /// Explicit symmetric PSD matrix (ridge already added).
    Dense(DMatrix<f64>),
    /// S = factors^T * factors + ridge * I, factors: [n, d].
    Factored { factors: DMatrix<f64>, ridge: f64 },
}

#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: CovRepr,
}

impl GaussianSummary {
    pub fn dense(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() != mean.len() {
            return Err(Error::Shape("covariance does not match mean".into()));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-9 * (1.0 + cov.abs().max()) {
            return Err(Error::Validation(format!(
                "covariance is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        Ok(Self {
            mean,
            cov: CovRepr::Dense(cov),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn trace(&self) -> f64 {
        match &self.cov {
            CovRepr::Dense(c) => c.trace(),
            CovRepr::Factored { factors, ridge } => {
                factors.iter().map(|v| v * v).sum::<f64>() + ridge * self.dim() as f64
            }
        }
    }

    /// Materializes the dense covariance (small dimensions only).
    fn to_dense(&self) -> DMatrix<f64> {
        match &self.cov {
            CovRepr::Dense(c) => c.clone(),
            CovRepr::Factored { factors, ridge } => {
                let mut c = factors.transpose() * factors;
                for i in 0..c.nrows() {
                    c[(i, i)] += ridge;
                }
                c
            }
        }
    }
}

/// Sample mean and ridged covariance of feature vectors (rows).
/// Dimensions up to `dense_limit` use the dense representation; larger ones
/// stay factored. Covariance normalization is 1/(n-1).
pub fn fit_gaussian(features: &[DVector<f64>], ridge: f64) -> Result<GaussianSummary> {
    const DENSE_LIMIT: usize = 64;
    let n = features.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "gaussian fit needs >= 2 feature vectors, got {n}"
        )));
    }
    let d = features[0].len();
    let mut mean = DVector::<f64>::zeros(d);
    for f in features {
        if f.len() != d {
            return Err(Error::Shape("feature dimensions differ".into()));
        }
        mean += f;
    }
    mean /= n as f64;
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let mut factors = DMatrix::<f64>::zeros(n, d);
    for (i, f) in features.iter().enumerate() {
        for j in 0..d {
            factors[(i, j)] = (f[j] - mean[j]) * scale;
        }
    }
    if d <= DENSE_LIMIT {
        let mut cov = factors.transpose() * &factors;
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        GaussianSummary::dense(mean, cov)
    } else {
        Ok(GaussianSummary {
            mean,
            cov: CovRepr::Factored { factors, ridge },
        })
    }
}

fn clipped_sqrt_eigs(eigs: &DVector<f64>) -> Result<f64> {
    let mut acc = 0.0;
    for &l in eigs.iter() {
        if l < NEG_EIG_TOL {
            return Err(Error::Numeric(format!(
                "matrix square root saw eigenvalue {l:.3e} < {NEG_EIG_TOL:.0e}"
            )));
        }
        acc += l.max(0.0).sqrt();
    }
    Ok(acc)
}

fn sqrtm(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    for &l in eig.eigenvalues.iter() {
        if l < NEG_EIG_TOL {
            return Err(Error::Numeric(format!(
                "covariance eigenvalue {l:.3e} < {NEG_EIG_TOL:.0e}"
            )));
        }
    }
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
}

/// tr((S1 S2)^(1/2)) for dense covariances.
fn trace_sqrt_dense(c1: &DMatrix<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    let half = sqrtm(c1)?;
    let inner = &half * c2 * &half;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    clipped_sqrt_eigs(&eig.eigenvalues)
}

/// tr((S1 S2)^(1/2)) for factored covariances, exact in the joint sample
/// subspace plus the ridge contribution on its complement.
fn trace_sqrt_factored(
    f1: &DMatrix<f64>,
    r1: f64,
    f2: &DMatrix<f64>,
    r2: f64,
    d: usize,
) -> Result<f64> {
    // orthonormal basis of span(rows of f1 and f2) via modified Gram-Schmidt
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for source in [f1, f2] {
        for i in 0..source.nrows() {
            let mut v = source.row(i).transpose();
            let orig = v.norm();
            if orig < 1e-300 {
                continue;
            }
            for b in &basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
            if v.norm() > 1e-10 * orig.max(1.0) {
                v /= v.norm();
                basis.push(v);
            }
        }
    }
    let m = basis.len();
    if m == 0 {
        // both covariances are pure ridge
        return Ok((r1 * r2).sqrt() * d as f64);
    }
    let mut q = DMatrix::<f64>::zeros(d, m);
    for (j, b) in basis.iter().enumerate() {
        q.set_column(j, b);
    }
    // A = Q^T S1 Q, B = Q^T S2 Q (m x m, symmetric PSD)
    let restrict = |f: &DMatrix<f64>, ridge: f64| -> DMatrix<f64> {
        let fq = f * &q; // [n, m]
        let mut a = fq.transpose() * fq;
        for i in 0..m {
            a[(i, i)] += ridge;
        }
        a
    };
    let a = restrict(f1, r1);
    let b = restrict(f2, r2);
    let a_half = sqrtm(&a)?;
    let inner = &a_half * b * &a_half;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let on_subspace = clipped_sqrt_eigs(&eig.eigenvalues)?;
    Ok(on_subspace + (r1 * r2).sqrt() * (d - m) as f64)
}

/// Squared Fréchet distance between two Gaussian summaries.
pub fn frechet_gaussian(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::Shape(format!(
            "gaussian dims differ: {} vs {}",
            g1.dim(),
            g2.dim()
        )));
    }
    let mean_term = (&g1.mean - &g2.mean).norm_squared();
    let trace_sqrt = match (&g1.cov, &g2.cov) {
        (
            CovRepr::Factored {
                factors: f1,
                ridge: r1,
            },
            CovRepr::Factored {
                factors: f2,
                ridge: r2,
            },
        ) => trace_sqrt_factored(f1, *r1, f2, *r2, g1.dim())?,
        _ => trace_sqrt_dense(&g1.to_dense(), &g2.to_dense())?,
    };
    Ok(mean_term + g1.trace() + g2.trace() - 2.0 * trace_sqrt)
}

/// FVMD between two sets of per-video feature vectors.
pub fn fvmd(generated: &[DVector<f64>], reference: &[DVector<f64>], ridge: f64) -> Result<f64> {
    let g1 = fit_gaussian(generated, ridge)?;
    let g2 = fit_gaussian(reference, ridge)?;
    frechet_gaussian(&g1, &g2)
}

/// Scene-conditional FVMD: computed within each scene, averaged over scenes.
/// Each entry pairs one scene's generated features with its simulated ones.
pub fn fvmd_scene(
    per_scene: &[(Vec<DVector<f64>>, Vec<DVector<f64>>)],
    ridge: f64,
) -> Result<f64> {
    if per_scene.is_empty() {
        return Err(Error::Validation("fvmd_scene over no scenes".into()));
    }
    let mut acc = 0.0;
    for (generated, simulated) in per_scene {
        acc += fvmd(generated, simulated, ridge)?;
    }
    Ok(acc / per_scene.len() as f64)
}
