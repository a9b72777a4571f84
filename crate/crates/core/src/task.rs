//! Synthetic teacher/student regression tasks.
//!
//! A task plants an update `ΔW* = P·diag(s)·Qᵀ` of known rank on top of a
//! random base matrix. Inputs are Gaussian and targets are
//! `(base + ΔW*)·x` plus optional label noise, so the correct adapter rank is
//! known exactly.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::Matrix;

/// Re-runnable description of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// Output dimension.
    pub d: usize,
    /// Input dimension.
    pub k: usize,
    /// Singular values of the planted update; its length is the true rank.
    pub spectrum_profile: Vec<f64>,
    pub label_noise_std: f64,
    pub input_std: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            d: 64,
            k: 64,
            spectrum_profile: linear_profile(4),
            label_noise_std: 0.05,
            input_std: 1.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn rank(&self) -> usize {
        self.spectrum_profile.len()
    }

    pub fn build(&self) -> Result<SyntheticTask> {
        let mut task = make_task(
            self.d,
            self.k,
            self.rank(),
            &self.spectrum_profile,
            self.label_noise_std,
            self.seed,
        )?;
        if !(self.input_std > 0.0 && self.input_std.is_finite()) {
            return Err(Error::domain(format!("input_std {} must be positive", self.input_std)));
        }
        task.input_std = self.input_std;
        Ok(task)
    }
}

/// `[r, r−1, …, 1]`.
pub fn linear_profile(rank: usize) -> Vec<f64> {
    (1..=rank).rev().map(|v| v as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub base: Matrix,
    pub true_update: Matrix,
    pub true_rank: usize,
    pub spectrum_profile: Vec<f64>,
    pub input_std: f64,
    pub label_noise_std: f64,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn out_dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.base.ncols()
    }

    /// `base + true_update`.
    pub fn teacher(&self) -> Matrix {
        &self.base + &self.true_update
    }

    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            d: self.out_dim(),
            k: self.in_dim(),
            spectrum_profile: self.spectrum_profile.clone(),
            label_noise_std: self.label_noise_std,
            input_std: self.input_std,
            seed: self.seed,
        }
    }
}

fn orthonormal_columns<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let g = rng::gaussian_matrix(rng, rows, cols, 1.0);
    g.qr().q()
}

pub fn make_task(
    d: usize,
    k: usize,
    r_star: usize,
    spectrum_profile: &[f64],
    label_noise_std: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    if d == 0 || k == 0 {
        return Err(Error::shape("task dimensions must be positive"));
    }
    if r_star > d.min(k) {
        return Err(Error::shape(format!("rank {r_star} exceeds min({d}, {k})")));
    }
    if spectrum_profile.len() != r_star {
        return Err(Error::shape(format!(
            "profile has {} entries for rank {r_star}",
            spectrum_profile.len()
        )));
    }
    if spectrum_profile.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::domain("profile entries must be positive and finite"));
    }
    if !(label_noise_std >= 0.0 && label_noise_std.is_finite()) {
        return Err(Error::domain("label_noise_std must be non-negative"));
    }

    let mut rng = rng::stream(seed, streams::TASK);
    let base = rng::gaussian_matrix(&mut rng, d, k, 1.0 / (k as f64).sqrt());
    let true_update = if r_star == 0 {
        Matrix::zeros(d, k)
    } else {
        let left = orthonormal_columns(&mut rng, d, r_star);
        let right = orthonormal_columns(&mut rng, k, r_star);
        let mut scaled = left;
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= spectrum_profile[j];
        }
        scaled * right.transpose()
    };
    Ok(SyntheticTask {
        base,
        true_update,
        true_rank: r_star,
        spectrum_profile: spectrum_profile.to_vec(),
        input_std: 1.0,
        label_noise_std,
        seed,
    })
}

/// Rows are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `n×k`.
    pub inputs: Matrix,
    /// `n×d`.
    pub targets: Matrix,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Rows `indices` of this batch, in the given order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            targets: self.targets.select_rows(indices),
        }
    }
}

/// Draws `batch_size` samples from a single-layer task.
pub fn sample_batch<R: Rng + ?Sized>(task: &SyntheticTask, batch_size: usize, rng: &mut R) -> Batch {
    let inputs = rng::gaussian_matrix(rng, batch_size, task.in_dim(), task.input_std);
    let mut targets = &inputs * task.teacher().transpose();
    add_label_noise(&mut targets, task.label_noise_std, rng);
    Batch { inputs, targets }
}

fn add_label_noise<R: Rng + ?Sized>(targets: &mut Matrix, std: f64, rng: &mut R) {
    if std > 0.0 {
        *targets += rng::gaussian_matrix(rng, targets.nrows(), targets.ncols(), std);
    }
}

/// A chain of tasks; layer `j` maps `dims[j]` to `dims[j + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkTask {
    layers: Vec<SyntheticTask>,
}

impl NetworkTask {
    pub fn new(layers: Vec<SyntheticTask>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network task needs at least one layer"));
        }
        for (j, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(format!(
                    "task layer {j} outputs {} but layer {} expects {}",
                    w[0].out_dim(),
                    j + 1,
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn single(task: SyntheticTask) -> Self {
        Self {
            layers: vec![task],
        }
    }

    /// Builds `dims.len() − 1` layers sharing one rank profile.
    ///
    /// Layer seeds are drawn from `seed`; label noise is applied at the output.
    pub fn chain(dims: &[usize], profile: &[f64], label_noise_std: f64, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape("need at least two dimensions for a chain"));
        }
        let mut seeds = rng::stream(seed, streams::TASK);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|j| {
                let noise = if j + 1 == n { label_noise_std } else { 0.0 };
                make_task(dims[j + 1], dims[j], profile.len(), profile, noise, seeds.next_u64())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[SyntheticTask] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn input_std(&self) -> f64 {
        self.layers[0].input_std
    }

    pub fn label_noise_std(&self) -> f64 {
        self.layers[self.layers.len() - 1].label_noise_std
    }

    /// Noiseless teacher output for row-sample `inputs`.
    pub fn teacher_outputs(&self, inputs: &Matrix) -> Matrix {
        self.layers
            .iter()
            .fold(inputs.clone(), |h, t| h * t.teacher().transpose())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        self.sample_with_noise(batch_size, self.label_noise_std(), rng)
    }

    pub fn sample_with_noise<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        label_noise_std: f64,
        rng: &mut R,
    ) -> Batch {
        let inputs = rng::gaussian_matrix(rng, batch_size, self.in_dim(), self.input_std());
        let mut targets = self.teacher_outputs(&inputs);
        add_label_noise(&mut targets, label_noise_std, rng);
        Batch { inputs, targets }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::svd;

    #[test]
    fn rank_zero_task_has_zero_update() {
        let t = make_task(5, 4, 0, &[], 0.0, 1).unwrap();
        assert_eq!(t.true_update, Matrix::zeros(5, 4));
    }

    #[test]
    fn planted_spectrum_is_exact() {
        let t = make_task(32, 32, 4, &[4.0, 3.0, 2.0, 1.0], 0.05, 3).unwrap();
        let d = svd(&t.true_update).unwrap().d;
        for (got, want) in d.iter().zip([4.0, 3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-8);
        }
        assert!(d[4] < 1e-10 * d[0]);
    }

    #[test]
    fn tasks_are_bit_deterministic() {
        let a = make_task(16, 8, 2, &[2.0, 1.0], 0.1, 42).unwrap();
        let b = make_task(16, 8, 2, &[2.0, 1.0], 0.1, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_rank_and_profile() {
        assert!(matches!(make_task(4, 3, 4, &[1.0; 4], 0.0, 0), Err(Error::Shape(_))));
        assert!(matches!(make_task(4, 3, 2, &[1.0], 0.0, 0), Err(Error::Shape(_))));
        assert!(make_task(4, 3, 1, &[0.0], 0.0, 0).is_err());
    }

    #[test]
    fn noiseless_targets_are_exact() {
        let t = make_task(6, 5, 2, &[2.0, 1.0], 0.0, 9).unwrap();
        let b = sample_batch(&t, 3, &mut rng::seeded(1));
        assert_eq!(b.targets, &b.inputs * t.teacher().transpose());
    }

    #[test]
    fn batch_shapes() {
        let t = make_task(7, 2, 1, &[1.0], 0.1, 0).unwrap();
        let b = sample_batch(&t, 1, &mut rng::seeded(0));
        assert_eq!(b.inputs.shape(), (1, 2));
        assert_eq!(b.targets.shape(), (1, 7));
    }

    #[test]
    fn label_noise_std_is_recovered() {
        let t = make_task(4, 4, 1, &[1.0], 0.1, 5).unwrap();
        let b = sample_batch(&t, 25_000, &mut rng::seeded(2));
        let residual = &b.targets - &b.inputs * t.teacher().transpose();
        let n = residual.len() as f64;
        let mean = residual.sum() / n;
        let std = (residual.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.005, "{std}");
    }

    #[test]
    fn chain_links_dimensions() {
        let net = NetworkTask::chain(&[8, 6, 5], &[2.0, 1.0], 0.05, 3).unwrap();
        assert_eq!(net.len(), 2);
        assert_eq!(net.in_dim(), 8);
        assert_eq!(net.out_dim(), 5);
        assert_eq!(net.layers()[0].label_noise_std, 0.0);
        assert_eq!(net.label_noise_std(), 0.05);
    }

    #[test]
    fn spec_round_trip() {
        let spec = TaskSpec {
            d: 10,
            k: 6,
            spectrum_profile: vec![3.0, 1.0],
            label_noise_std: 0.2,
            input_std: 1.5,
            seed: 77,
        };
        let task = spec.build().unwrap();
        assert_eq!(task.spec(), spec);
        assert_eq!(task.true_rank, 2);
    }
}
