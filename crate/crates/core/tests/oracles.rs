//! Checks against values computed independently of the library routines.

use autorank::adapter::{AdapterNetwork, AdapterPair};
use autorank::analysis::{chi_mean, median, sphere_ratio_experiment, SphereExperiment};
use autorank::rng::{self, streams};
use autorank::spectral::{population_std, restart_layer, restart_module, restart_network, signal_indices};
use autorank::train::evaluate_adapter;
use autorank::{Matrix, TaskSpec, UnionScope};

/// Brute-force signal count: for every candidate index, sum its prefix from scratch.
fn brute_force_count(d: &[f64], p: f64) -> usize {
    let total: f64 = d.iter().map(|v| v * v).sum();
    let below = (0..d.len())
        .filter(|&i| d[..=i].iter().map(|v| v * v).sum::<f64>() < p * total)
        .count();
    below.max(1)
}

#[test]
fn signal_count_matches_brute_force() {
    let mut g = rng::seeded(11);
    for trial in 0..500 {
        let n = 1 + trial % 20;
        let mut d: Vec<f64> = (0..n).map(|_| rng::gaussian(&mut g, 3.0).abs()).collect();
        d.sort_by(|a, b| b.total_cmp(a));
        for p in [0.0, 0.1, 0.5, 0.9, 0.99, 0.9999, 1.0] {
            assert_eq!(signal_indices(&d, p).unwrap().retained(), brute_force_count(&d, p));
        }
    }
}

/// `U·diag(s)·Vᵀ` from orthonormal factors built by QR.
fn planted(rows: usize, cols: usize, s: &[f64], seed: u64) -> (Matrix, Matrix, Matrix) {
    let mut g = rng::seeded(seed);
    let u = rng::gaussian_matrix(&mut g, rows, s.len(), 1.0).qr().q();
    let v = rng::gaussian_matrix(&mut g, cols, s.len(), 1.0).qr().q();
    let m = &u * Matrix::from_diagonal(&s.to_vec().into()) * v.transpose();
    (m, u, v)
}

#[test]
fn injected_noise_matches_residual_spread() {
    let s = [9.0, 7.0, 5.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];
    let (m, u, v) = planted(64, 48, &s, 3);
    let mut full = s.to_vec();
    full.resize(48, 0.0);
    let split = signal_indices(&full, 0.992).unwrap();
    assert_eq!(split.retained(), 3);

    // residual assembled directly from the planted noise directions
    let mut residual = Matrix::zeros(64, 48);
    for i in 3..s.len() {
        residual += s[i] * u.column(i) * v.column(i).transpose();
    }
    let expected_sigma = population_std(&residual);

    let (out, sigma) = restart_layer(&m, &split, &mut rng::seeded(9)).unwrap();
    assert!((sigma - expected_sigma).abs() <= 1e-9 * expected_sigma);

    let kept = &m - &residual;
    let injected = &out - &kept;
    let empirical = population_std(&injected);
    // 3072 entries put the sample std within a few percent of the target
    assert!((empirical / sigma - 1.0).abs() < 0.05, "{empirical} vs {sigma}");
}

#[test]
fn eval_loss_of_empty_adapter_is_planted_energy_over_outputs() {
    let task = TaskSpec::default().build().unwrap();
    let adapter = AdapterPair::new(task.base.clone(), 16, &mut rng::seeded(0)).unwrap();
    let expected = task.spectrum_profile.iter().map(|s| s * s).sum::<f64>() / task.out_dim() as f64;
    let got = evaluate_adapter(&adapter, &task, 20_000, &mut rng::stream(1, streams::EVAL)).unwrap();
    assert!((got / expected - 1.0).abs() < 0.05, "{got} vs {expected}");
}

#[test]
fn chi_mean_satisfies_its_recurrence() {
    // E[χ_k]·E[χ_{k+1}] = k
    for k in 1..300 {
        let product = chi_mean(k) * chi_mean(k + 1);
        assert!((product / k as f64 - 1.0).abs() < 1e-10, "k = {k}");
    }
}

#[test]
fn sphere_ratio_tracks_closed_form_over_sample_counts() {
    for dimension in [4, 16, 64] {
        let mut medians = Vec::new();
        for samples in [16, 64, 256] {
            let exp = SphereExperiment {
                dimension,
                samples,
                trials: 2000,
                seed: 7,
            };
            let s = sphere_ratio_experiment(&exp).unwrap();
            assert!(
                (s.mean / s.predicted_mean - 1.0).abs() < 0.05,
                "R={dimension} λ={samples}: {} vs {}",
                s.mean,
                s.predicted_mean
            );
            medians.push(s.median);
        }
        assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
    }
}

#[test]
fn sphere_trials_are_independent_of_scheduling() {
    let exp = SphereExperiment {
        dimension: 5,
        samples: 9,
        trials: 64,
        seed: 21,
    };
    let s = sphere_ratio_experiment(&exp).unwrap();
    for t in [0usize, 17, 63] {
        let mut g = rng::stream(exp.seed, streams::TRIAL_BASE + t as u64);
        let mut sum = vec![0.0; exp.dimension];
        for _ in 0..exp.samples {
            let x: Vec<f64> = (0..exp.dimension).map(|_| rng::gaussian(&mut g, 1.0)).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = norm.recip();
            sum.iter_mut().zip(&x).for_each(|(s, v)| *s += v * inv);
        }
        let ratio = sum.iter().map(|v| v * v).sum::<f64>().sqrt() / exp.samples as f64;
        assert_eq!(s.ratios[t], ratio);
    }
    assert!(median(&s.ratios) > 0.0);
}

#[test]
fn network_restart_equals_per_adapter_restarts() {
    let mut g = rng::seeded(5);
    let layers: Vec<AdapterPair> = [(12, 10), (8, 12), (6, 8)]
        .iter()
        .map(|&(d, k)| {
            AdapterPair::from_parts(
                rng::gaussian_matrix(&mut g, d, k, 1.0),
                rng::gaussian_matrix(&mut g, d, 5, 1.0),
                rng::gaussian_matrix(&mut g, 5, k, 1.0),
            )
            .unwrap()
        })
        .collect();
    let mut network = AdapterNetwork::new(layers.clone()).unwrap();
    let reports = restart_network(&mut network, 0.8, UnionScope::Pair, 99).unwrap();

    for (j, mut layer) in layers.into_iter().enumerate() {
        let report = restart_module(&mut layer, 0.8, &mut rng::stream(99, j as u64)).unwrap();
        assert_eq!(report.retained, reports[j].retained);
        assert_eq!(layer.up, network.layers()[j].up);
        assert_eq!(layer.down, network.layers()[j].down);
    }
}
