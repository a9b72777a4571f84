//! Rank metrics and the hypersphere ratio experiment.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::spectral::{svd, RestartReport};
use crate::{par, Matrix};

/// Singular values at or below this fraction of the largest count as zero.
pub const NUMERICAL_ZERO: f64 = 1e-10;

/// Smallest prefix of the spectrum holding `energy` of the squared total.
///
/// Singular values below [`NUMERICAL_ZERO`] times the largest are dropped
/// first, so `energy = 1` yields the numerical rank. A zero matrix has rank 0.
pub fn effective_rank(m: &Matrix, energy: f64) -> Result<usize> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::domain(format!("energy {energy} outside (0, 1]")));
    }
    let d = svd(m)?.d;
    Ok(spectrum_effective_rank(&d, energy))
}

pub(crate) fn spectrum_effective_rank(d: &[f64], energy: f64) -> usize {
    let largest = d.first().copied().unwrap_or(0.0);
    if largest <= 0.0 {
        return 0;
    }
    let kept: Vec<f64> = d
        .iter()
        .copied()
        .filter(|v| *v > NUMERICAL_ZERO * largest)
        .collect();
    // Compare the tail mass against the allowance instead of the cumulative
    // sum against the target, so energy = 1 is not defeated by rounding.
    let total: f64 = kept.iter().map(|v| v * v).sum();
    let allowance = (1.0 - energy) * total;
    let mut tail: f64 = 0.0;
    let mut rank = kept.len();
    for (i, v) in kept.iter().enumerate().rev() {
        tail += v * v;
        if tail > allowance {
            rank = i + 1;
            break;
        }
    }
    rank
}

/// `‖learned − truth‖_F / max(‖truth‖_F, 1e−12)`.
pub fn recovery_error(learned: &Matrix, truth: &Matrix) -> Result<f64> {
    if learned.shape() != truth.shape() {
        return Err(Error::shape(format!(
            "learned {:?} vs truth {:?}",
            learned.shape(),
            truth.shape()
        )));
    }
    Ok((learned - truth).norm() / truth.norm().max(1e-12))
}

/// Singular values of each factor at every restart.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumTrace {
    pub points: Vec<SpectrumPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub epoch: usize,
    pub layer: usize,
    pub up: Vec<f64>,
    pub down: Vec<f64>,
}

impl SpectrumTrace {
    /// Pre-restart spectra from a sequence of restart reports.
    pub fn from_reports(reports: &[RestartReport]) -> Result<Self> {
        let mut points = Vec::new();
        let mut last_epoch = None;
        for report in reports {
            if last_epoch.is_some_and(|e| e >= report.epoch) {
                return Err(Error::State("restart epochs must be strictly increasing".into()));
            }
            last_epoch = Some(report.epoch);
            for module in &report.modules {
                points.push(SpectrumPoint {
                    epoch: report.epoch,
                    layer: module.layer,
                    up: module.up.spectrum_before.clone(),
                    down: module.down.spectrum_before.clone(),
                });
            }
        }
        Ok(Self { points })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphereExperiment {
    /// Sphere dimension `R`.
    pub dimension: usize,
    /// Samples summed per trial (`λ`).
    pub samples: usize,
    pub trials: usize,
    pub seed: u64,
}

impl SphereExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 || self.samples == 0 || self.trials == 0 {
            return Err(Error::domain("dimension, samples and trials must all be at least 1"));
        }
        Ok(())
    }

    /// `√(1/(Rλ)) · E[χ_R]`.
    pub fn predicted_mean(&self) -> f64 {
        (1.0 / (self.dimension as f64 * self.samples as f64)).sqrt() * chi_mean(self.dimension)
    }
}

/// Mean of the χ distribution with `k` degrees of freedom, `√2·Γ((k+1)/2)/Γ(k/2)`.
pub fn chi_mean(k: usize) -> f64 {
    let k = k as f64;
    std::f64::consts::SQRT_2 * (ln_gamma((k + 1.0) / 2.0) - ln_gamma(k / 2.0)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereSummary {
    pub experiment: SphereExperiment,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub predicted_mean: f64,
    pub ratios: Vec<f64>,
}

/// Ratio `‖Σ X₁‖ / ‖Σ X₂‖` for `λ` uniform unit vectors `X₁` against a fixed
/// unit vector `X₂`, repeated over independent trials.
///
/// Trial `t` draws from stream `TRIAL_BASE + t` of the seed, so results do not
/// depend on how trials are scheduled.
pub fn sphere_ratio_experiment(exp: &SphereExperiment) -> Result<SphereSummary> {
    exp.validate()?;
    let ratios = par::map_indices(exp.trials, |t| {
        let mut rng = rng::stream(exp.seed, streams::TRIAL_BASE + t as u64);
        let mut sum = vec![0.0; exp.dimension];
        let mut draw = vec![0.0; exp.dimension];
        for _ in 0..exp.samples {
            let mut norm_sq = 0.0;
            for v in draw.iter_mut() {
                *v = rng::gaussian(&mut rng, 1.0);
                norm_sq += *v * *v;
            }
            // A zero draw has probability zero; redraw rather than divide by it.
            while norm_sq == 0.0 {
                norm_sq = 0.0;
                for v in draw.iter_mut() {
                    *v = rng::gaussian(&mut rng, 1.0);
                    norm_sq += *v * *v;
                }
            }
            let inv = norm_sq.sqrt().recip();
            for (s, v) in sum.iter_mut().zip(&draw) {
                *s += v * inv;
            }
        }
        let y1 = sum.iter().map(|s| s * s).sum::<f64>().sqrt();
        // ‖Σ X₂‖ = λ for a fixed unit vector.
        y1 / exp.samples as f64
    });

    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let std = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(SphereSummary {
        experiment: *exp,
        mean,
        std,
        median: median(&ratios),
        predicted_mean: exp.predicted_mean(),
        ratios,
    })
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile; NaN for an empty slice.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn effective_rank_examples() {
        let m = dmatrix![1.0, 0.0, 0.0; 0.0, 0.0, 0.0; 0.0, 0.0, 0.0];
        assert_eq!(effective_rank(&m, 0.99).unwrap(), 1);
        assert_eq!(effective_rank(&Matrix::identity(2, 2), 0.75).unwrap(), 2);
        assert_eq!(effective_rank(&Matrix::identity(2, 2), 0.5).unwrap(), 1);
        assert_eq!(effective_rank(&Matrix::identity(5, 5), 1.0).unwrap(), 5);
        assert_eq!(effective_rank(&Matrix::zeros(3, 4), 0.9).unwrap(), 0);
        assert!(effective_rank(&m, 0.0).is_err());
        assert!(effective_rank(&m, 1.1).is_err());
    }

    #[test]
    fn effective_rank_at_full_energy_is_numerical_rank() {
        let mut rng = rng::seeded(4);
        for r in 1..6 {
            let a = rng::gaussian_matrix(&mut rng, 10, r, 1.0);
            let b = rng::gaussian_matrix(&mut rng, r, 8, 1.0);
            assert_eq!(effective_rank(&(a * b), 1.0).unwrap(), r);
        }
    }

    #[test]
    fn recovery_error_examples() {
        let t = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert_eq!(recovery_error(&t, &t).unwrap(), 0.0);
        assert_eq!(recovery_error(&Matrix::zeros(2, 2), &t).unwrap(), 1.0);
        assert!((recovery_error(&(&t * 2.0), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            recovery_error(&Matrix::zeros(2, 3), &t),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn chi_mean_small_cases() {
        // E[χ_1] = √(2/π), E[χ_2] = √(π/2)
        assert!((chi_mean(1) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((chi_mean(2) - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-12);
        // stays finite for large k and approaches √k
        let k = 10_000;
        assert!((chi_mean(k) / (k as f64).sqrt() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn single_sample_ratio_is_one() {
        let s = sphere_ratio_experiment(&SphereExperiment {
            dimension: 7,
            samples: 1,
            trials: 50,
            seed: 1,
        })
        .unwrap();
        assert!(s.ratios.iter().all(|r| (r - 1.0).abs() < 1e-14));
    }

    #[test]
    fn ratio_mean_matches_chi_prediction() {
        let exp = SphereExperiment {
            dimension: 16,
            samples: 64,
            trials: 2000,
            seed: 3,
        };
        let s = sphere_ratio_experiment(&exp).unwrap();
        assert!((s.mean / s.predicted_mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn doubling_samples_shrinks_ratio_by_root_two() {
        let base = SphereExperiment {
            dimension: 16,
            samples: 64,
            trials: 1000,
            seed: 5,
        };
        let a = sphere_ratio_experiment(&base).unwrap().mean;
        let b = sphere_ratio_experiment(&SphereExperiment { samples: 128, ..base })
            .unwrap()
            .mean;
        assert!((b / a - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.1 * std::f64::consts::FRAC_1_SQRT_2);
    }

    #[test]
    fn rejects_empty_experiment() {
        let bad = SphereExperiment {
            dimension: 4,
            samples: 4,
            trials: 0,
            seed: 0,
        };
        assert!(sphere_ratio_experiment(&bad).is_err());
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
        assert!(median(&[]).is_nan());
    }
}
