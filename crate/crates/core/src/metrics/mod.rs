//! Evaluation metrics: the MSE aggregation family, Best-of-K, scene sample
//! variance, the low-rank trajectory score, and the Fréchet motion metrics.
//!
//! All values are reported in px^2 at the reference resolution except the
//! Fréchet distances, which are dimensionless.

mod features;
mod frechet;

pub use features::{motion_features, FeatureConfig};
pub use frechet::{fit_gaussian, frechet_gaussian, fvmd, fvmd_scene, CovRepr, GaussianSummary, COV_RIDGE};

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{tracks_for_object, ObjectMaskGrid, TrajectoryGrid};

/// Best-of-K pairing semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Per simulated future, the best generated match; averaged. Measures
    /// coverage of the simulated modes.
    Coverage,
    /// Single lowest error over all generated x simulated pairs.
    GlobalMin,
}

/// MSE aggregation over K samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MseMode {
    /// Error of the pointwise mean trajectory.
    MeanT,
    /// Mean of the per-sample errors.
    Mean,
    /// Best per-sample error.
    Min,
}

/// One evaluation run's scalar results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fvmd: f64,
    pub fvmd_scene: f64,
    pub best_of_k: f64,
    pub lrtl: f64,
    pub kappa: f64,
    pub mse_meant: f64,
    pub mse_mean: f64,
    pub mse_min: f64,
}

impl MetricReport {
    pub fn all_finite(&self) -> bool {
        [
            self.fvmd,
            self.fvmd_scene,
            self.best_of_k,
            self.lrtl,
            self.kappa,
            self.mse_meant,
            self.mse_mean,
            self.mse_min,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean over (t, h, w) of the squared Euclidean distance between
/// corresponding points, in px^2.
pub fn mse(a: &TrajectoryGrid, b: &TrajectoryGrid) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::Shape(format!(
            "mse over {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    let n_points = a.t_len() * a.grid_h() * a.grid_w();
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n_points as f64)
}

/// Aggregated MSE of K samples against one ground truth.
pub fn aggregate_mse(samples: &[TrajectoryGrid], gt: &TrajectoryGrid, mode: MseMode) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("aggregate_mse over an empty sample list".into()));
    }
    match mode {
        MseMode::MeanT => {
            let mut mean = samples[0].data().clone();
            for s in &samples[1..] {
                mean += s.data();
            }
            mean /= samples.len() as f64;
            let mean = TrajectoryGrid::new(mean, gt.stride())?;
            mse(&mean, gt)
        }
        MseMode::Mean => {
            let mut acc = 0.0;
            for s in samples {
                acc += mse(s, gt)?;
            }
            Ok(acc / samples.len() as f64)
        }
        MseMode::Min => {
            let mut best = f64::INFINITY;
            for s in samples {
                best = best.min(mse(s, gt)?);
            }
            Ok(best)
        }
    }
}

/// Best-of-K between generated and simulated futures of one image.
pub fn best_of_k(
    generated: &[TrajectoryGrid],
    simulated: &[TrajectoryGrid],
    pairing: Pairing,
) -> Result<f64> {
    if generated.is_empty() || simulated.is_empty() {
        return Err(Error::Validation("best_of_k needs non-empty sample lists".into()));
    }
    let best_for = |sim: &TrajectoryGrid| -> Result<f64> {
        let mut best = f64::INFINITY;
        for gen in generated {
            best = best.min(mse(gen, sim)?);
        }
        Ok(best)
    };
    match pairing {
        Pairing::Coverage => {
            let mut acc = 0.0;
            for sim in simulated {
                acc += best_for(sim)?;
            }
            Ok(acc / simulated.len() as f64)
        }
        Pairing::GlobalMin => {
            let mut best = f64::INFINITY;
            for sim in simulated {
                best = best.min(best_for(sim)?);
            }
            Ok(best)
        }
    }
}

/// Scene sample variance: mean over (k, t, h, w) of the squared deviation
/// from the pointwise mean over samples (both coordinates summed).
pub fn kappa(samples: &[TrajectoryGrid]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("kappa over an empty sample list".into()));
    }
    let k = samples.len();
    let dim = samples[0].data().dim();
    let mut mean = samples[0].data().clone();
    for s in &samples[1..] {
        if s.data().dim() != dim {
            return Err(Error::Shape("kappa samples disagree on shape".into()));
        }
        mean += s.data();
    }
    mean /= k as f64;
    let mut acc = 0.0;
    for s in samples {
        acc += s
            .data()
            .iter()
            .zip(mean.iter())
            .map(|(x, m)| (x - m) * (x - m))
            .sum::<f64>();
    }
    let (t, gh, gw, _) = dim;
    Ok(acc / (k * t * gh * gw) as f64)
}

/// Rank used by the low-rank trajectory score.
pub const LRTL_RANK: usize = 5;

/// Frobenius residual of the rank-5 truncated-SVD reconstruction of one
/// object's `[N, 2T]` track matrix, scaled by sqrt(#entries).
pub fn lrtl_object(tracks: &Array2<f64>) -> f64 {
    let (n, m) = tracks.dim();
    if n <= LRTL_RANK {
        // rank(M) <= N <= 5: the truncation is exact
        return 0.0;
    }
    let mat = DMatrix::from_row_iterator(n, m, tracks.iter().cloned());
    let svd = mat.svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let residual_sq: f64 = sv.iter().skip(LRTL_RANK).map(|s| s * s).sum();
    (residual_sq / (n * m) as f64).sqrt()
}

/// LRTL of a grid: mean over foreground objects of the per-object score.
pub fn lrtl(grid: &TrajectoryGrid, masks: &ObjectMaskGrid) -> Result<f64> {
    let ids = masks.object_ids();
    if ids.is_empty() {
        return Err(Error::MetricUndefined(
            "lrtl needs at least one foreground object".into(),
        ));
    }
    let mut acc = 0.0;
    for id in &ids {
        let tracks = tracks_for_object(grid, masks, *id)?;
        acc += lrtl_object(&tracks);
    }
    Ok(acc / ids.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridflow_testkit::{kappa_naive, lrtl_naive, mse_naive, singular_values};
    use ndarray::{Array2 as NdArray2, Array4};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64, t: usize, gh: usize, gw: usize) -> TrajectoryGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array4::from_shape_simple_fn((t, gh, gw, 2), || rng.gen_range(-50.0..50.0));
        TrajectoryGrid::new(data, 2).unwrap()
    }

    fn shifted(g: &TrajectoryGrid, dx: f64, dy: f64) -> TrajectoryGrid {
        let mut data = g.data().clone();
        for mut p in data.rows_mut() {
            p[0] += dx;
            p[1] += dy;
        }
        TrajectoryGrid::new(data, g.stride()).unwrap()
    }

    #[test]
    fn mse_examples_and_symmetry() {
        let a = random_grid(1, 3, 4, 4);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = shifted(&a, 3.0, 4.0);
        assert!((mse(&a, &b).unwrap() - 25.0).abs() < 1e-9);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        let c = random_grid(2, 3, 4, 5);
        assert!(matches!(mse(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn mse_matches_naive_reference() {
        for seed in 0..5 {
            let a = random_grid(seed, 4, 3, 5);
            let b = random_grid(seed + 100, 4, 3, 5);
            let fast = mse(&a, &b).unwrap();
            let naive = mse_naive(a.data(), b.data());
            assert!((fast - naive).abs() < 1e-10);
        }
    }

    #[test]
    fn aggregate_modes() {
        let gt = random_grid(3, 2, 2, 2);
        // K = 1: all modes agree
        let s = vec![random_grid(4, 2, 2, 2)];
        let m = mse(&s[0], &gt).unwrap();
        for mode in [MseMode::MeanT, MseMode::Mean, MseMode::Min] {
            assert!((aggregate_mse(&s, &gt, mode).unwrap() - m).abs() < 1e-12);
        }
        // gt +- d: MeanT cancels, Mean = Min = |d|^2
        let plus = shifted(&gt, 1.5, -2.0);
        let minus = shifted(&gt, -1.5, 2.0);
        let pair = vec![plus, minus];
        let d2 = 1.5 * 1.5 + 2.0 * 2.0;
        assert!(aggregate_mse(&pair, &gt, MseMode::MeanT).unwrap() < 1e-18);
        assert!((aggregate_mse(&pair, &gt, MseMode::Mean).unwrap() - d2).abs() < 1e-9);
        assert!((aggregate_mse(&pair, &gt, MseMode::Min).unwrap() - d2).abs() < 1e-9);
        // Min <= Mean on random samples
        let many: Vec<_> = (0..5).map(|i| random_grid(10 + i, 2, 2, 2)).collect();
        assert!(
            aggregate_mse(&many, &gt, MseMode::Min).unwrap()
                <= aggregate_mse(&many, &gt, MseMode::Mean).unwrap()
        );
        assert!(aggregate_mse(&[], &gt, MseMode::Mean).is_err());
    }

    #[test]
    fn best_of_k_examples() {
        let sims: Vec<_> = (0..3).map(|i| random_grid(20 + i, 2, 2, 2)).collect();
        // identical lists -> 0 (diagonal match)
        assert_eq!(best_of_k(&sims, &sims, Pairing::Coverage).unwrap(), 0.0);
        // single pair -> mse
        let g = vec![random_grid(30, 2, 2, 2)];
        let s1 = vec![sims[0].clone()];
        assert_eq!(
            best_of_k(&g, &s1, Pairing::Coverage).unwrap(),
            mse(&g[0], &sims[0]).unwrap()
        );
        // generated covers both simulated modes exactly plus junk -> 0
        let sim_two = vec![sims[0].clone(), sims[1].clone()];
        let gen_cover = vec![
            sims[1].clone(),
            random_grid(31, 2, 2, 2),
            sims[0].clone(),
            random_grid(32, 2, 2, 2),
        ];
        // brute-force oracle over all pairs
        let mut oracle = 0.0;
        for sim in &sim_two {
            let best = gen_cover
                .iter()
                .map(|g| mse_naive(g.data(), sim.data()))
                .fold(f64::INFINITY, f64::min);
            oracle += best;
        }
        oracle /= sim_two.len() as f64;
        let got = best_of_k(&gen_cover, &sim_two, Pairing::Coverage).unwrap();
        assert_eq!(got, oracle);
        assert_eq!(got, 0.0);
    }

    #[test]
    fn best_of_k_monotone_in_generated_set() {
        let sims: Vec<_> = (0..4).map(|i| random_grid(40 + i, 2, 3, 3)).collect();
        let mut gens: Vec<_> = (0..2).map(|i| random_grid(50 + i, 2, 3, 3)).collect();
        let before = best_of_k(&gens, &sims, Pairing::Coverage).unwrap();
        gens.push(random_grid(60, 2, 3, 3));
        let after = best_of_k(&gens, &sims, Pairing::Coverage).unwrap();
        assert!(after <= before);
        // global-min is bounded by coverage
        let global = best_of_k(&gens, &sims, Pairing::GlobalMin).unwrap();
        assert!(global <= after);
    }

    #[test]
    fn kappa_examples_and_reference() {
        let g = random_grid(70, 3, 2, 2);
        assert_eq!(kappa(&[g.clone(), g.clone()]).unwrap(), 0.0);

        // two samples differing by d in one coordinate -> d^2 / 4
        let d = 3.0;
        let other = shifted(&g, d, 0.0);
        let got = kappa(&[g.clone(), other]).unwrap();
        assert!((got - d * d / 4.0).abs() < 1e-10);

        // random input matches the two-loop reference
        let samples: Vec<_> = (0..4).map(|i| random_grid(80 + i, 3, 2, 4)).collect();
        let arrays: Vec<_> = samples.iter().map(|s| s.data().clone()).collect();
        assert!((kappa(&samples).unwrap() - kappa_naive(&arrays)).abs() < 1e-10);

        // permutation invariance
        let mut perm = samples.clone();
        perm.swap(0, 3);
        perm.swap(1, 2);
        assert!((kappa(&samples).unwrap() - kappa(&perm).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn lrtl_exact_for_low_rank_and_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        // rank-2 matrix: outer products
        let (n, m) = (12, 10);
        let mut low = NdArray2::zeros((n, m));
        for _ in 0..2 {
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in 0..n {
                for j in 0..m {
                    low[[i, j]] += u[i] * v[j];
                }
            }
        }
        assert!(lrtl_object(&low) < 1e-9);

        // full-rank 50 x 48 random matrix: strictly positive, matches the
        // independent Jacobi reference
        let full = NdArray2::from_shape_simple_fn((50, 48), || rng.gen_range(-1.0..1.0));
        let fast = lrtl_object(&full);
        let reference = lrtl_naive(&full, LRTL_RANK);
        assert!(fast > 0.0);
        assert!(
            (fast - reference).abs() < 1e-8,
            "fast {fast} vs reference {reference}"
        );
    }

    #[test]
    fn lrtl_on_rigid_motion_grid_is_tiny_and_translation_invariant() {
        // rigid rotation + translation, as produced by the simulator
        let t_len = 8;
        let (gh, gw) = (3, 4);
        let mut data = Array4::zeros((t_len, gh, gw, 2));
        for t in 0..t_len {
            let theta = 0.15 * t as f64;
            for i in 0..gh {
                for j in 0..gw {
                    let (lx, ly) = (j as f64 - 1.5, i as f64 - 1.0);
                    data[[t, i, j, 0]] = 20.0 + 2.0 * t as f64 + theta.cos() * lx - theta.sin() * ly;
                    data[[t, i, j, 1]] = 30.0 - t as f64 + theta.sin() * lx + theta.cos() * ly;
                }
            }
        }
        let grid = TrajectoryGrid::new(data, 2).unwrap();
        let masks = ObjectMaskGrid::new(NdArray2::from_elem((gh, gw), 1u16)).unwrap();
        let score = lrtl(&grid, &masks).unwrap();
        assert!(score < 1e-9, "rigid lrtl {score}");
        // sigma4/sigma1 backs the rank-3 theorem
        let m = tracks_for_object(&grid, &masks, 1).unwrap();
        let sv = singular_values(&m);
        assert!(sv[3] / sv[0] < 1e-10);

        // global translation keeps the motion rigid: score stays ~0
        let shifted_grid = shifted(&grid, 17.0, -4.0);
        assert!(lrtl(&shifted_grid, &masks).unwrap() < 1e-9);

        // background-only masks are undefined
        let empty = ObjectMaskGrid::new(NdArray2::zeros((gh, gw))).unwrap();
        assert!(matches!(
            lrtl(&grid, &empty),
            Err(Error::MetricUndefined(_))
        ));
    }
}
