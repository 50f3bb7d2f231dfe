//! Evaluation statistics: exponential smoothing and per-axis rotation
//! distributions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{rotation_term, RotationTarget};
use crate::trajectory::TrajectoryRow;

/// Default smoothing constant for evaluation series.
pub const DEFAULT_ALPHA: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("cannot smooth an empty series")]
    EmptySeries,
    #[error("smoothing factor {0} outside (0, 1]")]
    BadAlpha(f64),
}

/// One step of `y_t = α·x_t + (1−α)·y_{t−1}`.
#[inline]
pub fn smoothing_step(alpha: f64, x: f64, prev: f64) -> f64 {
    alpha * x + (1.0 - alpha) * prev
}

pub fn exponential_smoothing(series: &[f64], alpha: f64) -> Result<Vec<f64>, StatsError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(StatsError::BadAlpha(alpha));
    }
    let (&first, rest) = series.split_first().ok_or(StatsError::EmptySeries)?;
    let mut out = Vec::with_capacity(series.len());
    out.push(first);
    let mut y = first;
    for &x in rest {
        y = smoothing_step(alpha, x, y);
        out.push(y);
    }
    Ok(out)
}

/// Summary of one sample distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub p05: f64,
    pub p25: f64,
    pub p75: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction of samples on the max-reward plateau.
    pub in_band_fraction: f64,
}

impl Distribution {
    /// Summary of `samples`, with the band taken for `target`'s direction.
    pub fn of(samples: &[f64], target: RotationTarget) -> Self {
        if samples.is_empty() {
            return Self {
                mean: 0.0,
                median: 0.0,
                std: 0.0,
                p05: 0.0,
                p25: 0.0,
                p75: 0.0,
                p95: 0.0,
                min: 0.0,
                max: 0.0,
                in_band_fraction: 0.0,
            };
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let in_band = samples.iter().filter(|&&w| in_reward_band(w, target)).count();
        Self {
            mean,
            median: percentile(&sorted, 50.0),
            std: var.sqrt(),
            p05: percentile(&sorted, 5.0),
            p25: percentile(&sorted, 25.0),
            p75: percentile(&sorted, 75.0),
            p95: percentile(&sorted, 95.0),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            in_band_fraction: in_band as f64 / n,
        }
    }
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// True when the rotation term sits exactly on its plateau value of 2.
pub fn in_reward_band(omega_axis: f64, target: RotationTarget) -> bool {
    rotation_term(omega_axis, target.sign()) == 2.0
}

/// Angular velocity in the hand frame. Simulated ball states are already
/// expressed in the palm frame, so this is the identity; it stays a separate
/// step for externally measured (IMU) data.
pub fn to_hand_frame(omega_world: [f64; 3]) -> [f64; 3] {
    omega_world
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationStats {
    pub target: RotationTarget,
    pub alpha: f64,
    pub count: usize,
    pub raw: Distribution,
    pub smoothed: Distribution,
    #[serde(skip)]
    pub samples: Vec<f64>,
    #[serde(skip)]
    pub smoothed_series: Vec<f64>,
}

/// Per-axis angular velocity distribution of a trajectory log. The raw
/// in-band fraction equals the fraction of rows whose rotation term is 2.
pub fn rotation_stats(rows: &[TrajectoryRow], target: RotationTarget, alpha: f64) -> Result<RotationStats, StatsError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(StatsError::BadAlpha(alpha));
    }
    let samples: Vec<f64> = rows
        .iter()
        .map(|r| target.axis.component(to_hand_frame(r.omega)))
        .collect();
    let smoothed_series = if samples.is_empty() {
        Vec::new()
    } else {
        exponential_smoothing(&samples, alpha)?
    };
    Ok(RotationStats {
        target,
        alpha,
        count: samples.len(),
        raw: Distribution::of(&samples, target),
        smoothed: Distribution::of(&smoothed_series, target),
        samples,
        smoothed_series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Axis, Direction};

    fn rows(omegas: &[f64]) -> Vec<TrajectoryRow> {
        omegas
            .iter()
            .enumerate()
            .map(|(i, &w)| TrajectoryRow {
                step: i as u64,
                omega: [0.0, w, 0.0],
                ..TrajectoryRow::blank(11)
            })
            .collect()
    }

    const NEG_Y: RotationTarget = RotationTarget {
        axis: Axis::Y,
        direction: Direction::Neg,
    };

    #[test]
    fn constant_series_is_fixed_point() {
        let s = exponential_smoothing(&[2.5; 10], 0.3).unwrap();
        assert!(s.iter().all(|&y| y == 2.5));
    }

    #[test]
    fn alpha_one_passes_through() {
        let x = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(exponential_smoothing(&x, 1.0).unwrap(), x.to_vec());
    }

    #[test]
    fn unrolled_steps() {
        let s = exponential_smoothing(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(s, vec![1.0, 1.0, 1.0, 1.0]);
        let s = exponential_smoothing(&[0.0, 1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(s, vec![0.0, 0.5, 0.75, 0.875]);
    }

    #[test]
    fn smoothing_errors() {
        assert_eq!(exponential_smoothing(&[], 0.5), Err(StatsError::EmptySeries));
        assert_eq!(exponential_smoothing(&[1.0], 0.0), Err(StatsError::BadAlpha(0.0)));
        assert_eq!(exponential_smoothing(&[1.0], 1.5), Err(StatsError::BadAlpha(1.5)));
    }

    #[test]
    fn plateau_samples_fully_in_band() {
        let st = rotation_stats(&rows(&[-1.5; 20]), NEG_Y, 0.3).unwrap();
        assert_eq!(st.raw.in_band_fraction, 1.0);
        assert_eq!(st.smoothed.in_band_fraction, 1.0);
        assert_eq!(st.raw.mean, -1.5);
    }

    #[test]
    fn resting_samples_out_of_band() {
        let st = rotation_stats(&rows(&[0.0; 20]), NEG_Y, 0.3).unwrap();
        assert_eq!(st.raw.in_band_fraction, 0.0);
    }

    #[test]
    fn empty_log() {
        let st = rotation_stats(&[], NEG_Y, 0.3).unwrap();
        assert_eq!(st.count, 0);
        assert_eq!(st.raw.mean, 0.0);
        assert_eq!(st.raw.in_band_fraction, 0.0);
    }

    #[test]
    fn band_edges() {
        assert!(in_reward_band(-1.0, NEG_Y));
        assert!(in_reward_band(-2.0, NEG_Y));
        assert!(!in_reward_band(-0.999, NEG_Y));
        assert!(!in_reward_band(-2.001, NEG_Y));
        let pos = RotationTarget {
            axis: Axis::Y,
            direction: Direction::Pos,
        };
        assert!(in_reward_band(1.5, pos));
        assert!(!in_reward_band(-1.5, pos));
    }

    #[test]
    fn percentiles_interpolate() {
        let st = rotation_stats(&rows(&[0.0, 1.0, 2.0, 3.0, 4.0]), NEG_Y, 1.0).unwrap();
        assert_eq!(st.raw.median, 2.0);
        assert_eq!(st.raw.p25, 1.0);
        assert!((st.raw.p05 - 0.2).abs() < 1e-12);
    }
}
