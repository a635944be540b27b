//! Histogram-based motion features for the Fréchet metrics.
//!
//! Per track, velocities v_t = x_{t+1} - x_t and accelerations
//! a_t = v_{t+1} - v_t are quantized into magnitude x orientation bins and
//! histogrammed within spatio-temporal windows. Each window's velocity and
//! acceleration histograms are L1-normalized and concatenated.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TrajectoryGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Magnitude bins (bin 0 catches near-zero motion).
    pub mag_bins: usize,
    /// Orientation bins over (-pi, pi].
    pub ori_bins: usize,
    /// Temporal window length in velocity steps.
    pub t_window: usize,
    /// Spatial window edge in grid cells.
    pub s_window: usize,
    /// Lowest non-zero magnitude edge, px per frame.
    pub mag_lo: f64,
    /// Top magnitude edge, px per frame.
    pub mag_hi: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            mag_bins: 8,
            ori_bins: 8,
            t_window: 4,
            s_window: 8,
            mag_lo: 1e-2,
            mag_hi: 8.0,
        }
    }
}

impl FeatureConfig {
    pub fn bins(&self) -> usize {
        self.mag_bins * self.ori_bins
    }

    /// Temporal windows cover the T-1 velocity steps (acceleration steps
    /// fall into the window of their leading velocity).
    pub fn temporal_windows(&self, t_len: usize) -> usize {
        (t_len - 1).div_ceil(self.t_window)
    }

    pub fn spatial_windows(&self, gh: usize, gw: usize) -> usize {
        gh.div_ceil(self.s_window) * gw.div_ceil(self.s_window)
    }

    /// Total feature dimensionality: n_windows * 2 * bins.
    pub fn dim(&self, t_len: usize, gh: usize, gw: usize) -> usize {
        self.temporal_windows(t_len) * self.spatial_windows(gh, gw) * 2 * self.bins()
    }

    /// Combined (magnitude, orientation) bin of a motion vector. Vectors
    /// below `mag_lo` land in magnitude bin 0 with orientation bin 0.
    fn bin(&self, dx: f64, dy: f64) -> usize {
        let mag = (dx * dx + dy * dy).sqrt();
        if mag < self.mag_lo {
            return 0;
        }
        let ratio = (self.mag_hi / self.mag_lo).powf(1.0 / (self.mag_bins - 2) as f64);
        let mut mag_bin = 1;
        let mut edge = self.mag_lo * ratio;
        while mag_bin < self.mag_bins - 1 && mag >= edge {
            mag_bin += 1;
            edge *= ratio;
        }
        let theta = dy.atan2(dx);
        let step = std::f64::consts::TAU / self.ori_bins as f64;
        let ori = (((theta + std::f64::consts::PI) / step) as usize).min(self.ori_bins - 1);
        mag_bin * self.ori_bins + ori
    }
}

/// Feature vector of one trajectory-grid video.
pub fn motion_features(grid: &TrajectoryGrid, cfg: &FeatureConfig) -> Result<DVector<f64>> {
    let (t_len, gh, gw) = (grid.t_len(), grid.grid_h(), grid.grid_w());
    if t_len < 3 {
        return Err(Error::Validation(format!(
            "motion features need T >= 3 frames, got {t_len}"
        )));
    }
    let n_t = cfg.temporal_windows(t_len);
    let n_sw_cols = gw.div_ceil(cfg.s_window);
    let n_s = cfg.spatial_windows(gh, gw);
    let bins = cfg.bins();
    // [t_window][s_window][velocity | acceleration][bin]
    let mut hist = vec![0.0f64; n_t * n_s * 2 * bins];
    let data = grid.data();

    let slot = |tw: usize, sw: usize, kind: usize, bin: usize| -> usize {
        ((tw * n_s + sw) * 2 + kind) * bins + bin
    };

    for i in 0..gh {
        for j in 0..gw {
            let sw = (i / cfg.s_window) * n_sw_cols + (j / cfg.s_window);
            let mut prev_v: Option<(f64, f64)> = None;
            for t in 0..t_len - 1 {
                let vx = data[[t + 1, i, j, 0]] - data[[t, i, j, 0]];
                let vy = data[[t + 1, i, j, 1]] - data[[t, i, j, 1]];
                let tw = t / cfg.t_window;
                hist[slot(tw, sw, 0, cfg.bin(vx, vy))] += 1.0;
                if let Some((px, py)) = prev_v {
                    // acceleration at step t-1 goes to that step's window
                    let atw = (t - 1) / cfg.t_window;
                    hist[slot(atw, sw, 1, cfg.bin(vx - px, vy - py))] += 1.0;
                }
                prev_v = Some((vx, vy));
            }
        }
    }

    // L1-normalize each (window, kind) histogram that received mass
    for chunk in hist.chunks_mut(bins) {
        let sum: f64 = chunk.iter().sum();
        if sum > 0.0 {
            for v in chunk.iter_mut() {
                *v /= sum;
            }
        }
    }
    Ok(DVector::from_vec(hist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn grid_from_velocity(t_len: usize, gh: usize, gw: usize, vx: f64, vy: f64) -> TrajectoryGrid {
        let mut g = TrajectoryGrid::at_anchors(t_len, gh, gw, 2);
        for t in 1..t_len {
            for i in 0..gh {
                for j in 0..gw {
                    g.data_mut()[[t, i, j, 0]] = g.data()[[0, i, j, 0]] + vx * t as f64;
                    g.data_mut()[[t, i, j, 1]] = g.data()[[0, i, j, 1]] + vy * t as f64;
                }
            }
        }
        g
    }

    #[test]
    fn static_grid_concentrates_in_zero_bin() {
        let cfg = FeatureConfig::default();
        let g = TrajectoryGrid::at_anchors(9, 4, 4, 2);
        let f = motion_features(&g, &cfg).unwrap();
        let bins = cfg.bins();
        for (w, chunk) in f.as_slice().chunks(bins).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if sum > 0.0 {
                assert_eq!(chunk[0], 1.0, "window chunk {w} should be all zero-bin");
            }
        }
    }

    #[test]
    fn uniform_translation_hits_one_velocity_cell() {
        let cfg = FeatureConfig::default();
        let g = grid_from_velocity(9, 4, 4, 1.0, 0.0);
        let f = motion_features(&g, &cfg).unwrap();
        let bins = cfg.bins();
        let expected_bin = cfg.bin(1.0, 0.0);
        assert!(expected_bin >= cfg.ori_bins, "magnitude 1 is not a zero bin");
        for (idx, chunk) in f.as_slice().chunks(bins).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if sum == 0.0 {
                continue;
            }
            let kind = idx % 2;
            if kind == 0 {
                assert_eq!(chunk[expected_bin], 1.0, "velocity window {idx}");
            } else {
                assert_eq!(chunk[0], 1.0, "acceleration window {idx}");
            }
        }
    }

    #[test]
    fn feature_dimension_matches_config_arithmetic() {
        let cfg = FeatureConfig::default();
        for (t_len, gh, gw) in [(24, 16, 16), (9, 4, 4), (24, 32, 32)] {
            let g = TrajectoryGrid::at_anchors(t_len, gh, gw, 2);
            let f = motion_features(&g, &cfg).unwrap();
            assert_eq!(f.len(), cfg.dim(t_len, gh, gw));
            let n_windows = cfg.temporal_windows(t_len) * cfg.spatial_windows(gh, gw);
            assert_eq!(f.len(), n_windows * 2 * 64);
        }
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let g = TrajectoryGrid::at_anchors(2, 4, 4, 2);
        assert!(motion_features(&g, &FeatureConfig::default()).is_err());
    }

    #[test]
    fn histograms_are_l1_normalized_and_non_negative() {
        let cfg = FeatureConfig::default();
        let mut g = TrajectoryGrid::at_anchors(10, 6, 6, 2);
        for (idx, v) in g.data_mut().iter_mut().enumerate() {
            *v += ((idx * 37) % 11) as f64 * 0.7 - 3.0;
        }
        let f = motion_features(&g, &cfg).unwrap();
        assert!(f.iter().all(|v| *v >= 0.0));
        for chunk in f.as_slice().chunks(cfg.bins()) {
            let sum: f64 = chunk.iter().sum();
            assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-12);
        }
    }
}
