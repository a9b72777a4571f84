//! Low-rank adapter layers.
//!
//! An [`AdapterPair`] evaluates `y = base·x + up·(down·x)` where `base` is a
//! frozen `d×k` matrix, `up` is `d×R` and `down` is `R×k`. No output scaling is
//! applied to the low-rank branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::{Matrix, Vector};

/// Trainable factor pair on top of a frozen base matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPair {
    base: Matrix,
    /// The `B` factor, `d×R`.
    pub up: Matrix,
    /// The `A` factor, `R×k`.
    pub down: Matrix,
    max_rank: usize,
}

impl AdapterPair {
    /// Builds an adapter over `base` with `up = 0` and `down ~ N(0, (1/R)²)`.
    pub fn new<R: Rng + ?Sized>(base: Matrix, max_rank: usize, rng: &mut R) -> Result<Self> {
        let (d, k) = base.shape();
        if max_rank == 0 || max_rank > d.min(k) {
            return Err(Error::shape(format!(
                "rank {max_rank} must lie in 1..={} for a {d}x{k} layer",
                d.min(k)
            )));
        }
        let down = rng::gaussian_matrix(rng, max_rank, k, 1.0 / max_rank as f64);
        Ok(Self {
            base,
            up: Matrix::zeros(d, max_rank),
            down,
            max_rank,
        })
    }

    /// Assembles an adapter from explicit factors.
    pub fn from_parts(base: Matrix, up: Matrix, down: Matrix) -> Result<Self> {
        let (d, k) = base.shape();
        let rank = up.ncols();
        if up.nrows() != d || down.nrows() != rank || down.ncols() != k {
            return Err(Error::shape(format!(
                "factors {}x{} · {}x{} do not match base {d}x{k}",
                up.nrows(),
                up.ncols(),
                down.nrows(),
                down.ncols()
            )));
        }
        if rank == 0 || rank > d.min(k) {
            return Err(Error::shape(format!("rank {rank} out of range for {d}x{k}")));
        }
        Ok(Self {
            base,
            up,
            down,
            max_rank: rank,
        })
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    /// Output dimension `d`.
    pub fn out_dim(&self) -> usize {
        self.base.nrows()
    }

    /// Input dimension `k`.
    pub fn in_dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.in_dim() {
            return Err(Error::shape(format!(
                "input length {} != {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok(&self.base * x + &self.up * (&self.down * x))
    }

    /// Row-batched forward pass: `inputs` is `n×k`, result is `n×d`.
    pub fn forward_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.ncols() != self.in_dim() {
            return Err(Error::shape(format!(
                "batch has {} columns, layer expects {}",
                inputs.ncols(),
                self.in_dim()
            )));
        }
        let hidden = inputs * self.down.transpose();
        Ok(inputs * self.base.transpose() + hidden * self.up.transpose())
    }

    /// `up · down`, the update the adapter adds to the base.
    pub fn effective_update(&self) -> Matrix {
        &self.up * &self.down
    }

    /// `base + up · down`.
    pub fn merged(&self) -> Matrix {
        &self.base + self.effective_update()
    }

    pub(crate) fn set_factors(&mut self, up: Matrix, down: Matrix) {
        debug_assert_eq!(up.shape(), self.up.shape());
        debug_assert_eq!(down.shape(), self.down.shape());
        self.up = up;
        self.down = down;
    }
}

/// Adapter over a zero base matrix, seeded from `seed`.
pub fn init_adapter(d: usize, k: usize, max_rank: usize, seed: u64) -> Result<AdapterPair> {
    AdapterPair::new(Matrix::zeros(d, k), max_rank, &mut rng::seeded(seed))
}

/// Chain of adapters applied in order: `x → layer0 → layer1 → …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterNetwork {
    layers: Vec<AdapterPair>,
}

impl AdapterNetwork {
    pub fn new(layers: Vec<AdapterPair>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        for (j, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {j} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    j + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn single(layer: AdapterPair) -> Self {
        Self {
            layers: vec![layer],
        }
    }

    pub fn layers(&self) -> &[AdapterPair] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdapterPair] {
        &mut self.layers
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

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        self.layers.iter().try_fold(x.clone(), |h, layer| layer.forward(&h))
    }

    pub fn forward_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        self.layers
            .iter()
            .try_fold(inputs.clone(), |h, layer| layer.forward_batch(&h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn fresh_adapter_has_zero_update() {
        let a = init_adapter(4, 4, 2, 7).unwrap();
        assert_eq!(a.effective_update(), Matrix::zeros(4, 4));
        assert!(a.up.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_oversized_rank() {
        assert!(matches!(init_adapter(4, 4, 8, 0), Err(Error::Shape(_))));
        assert!(matches!(init_adapter(4, 6, 5, 0), Err(Error::Shape(_))));
        assert!(matches!(init_adapter(4, 4, 0, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn down_factor_std_matches_inverse_rank() {
        let a = init_adapter(64, 64, 16, 1).unwrap();
        let n = a.down.len() as f64;
        let mean = a.down.sum() / n;
        let var = a.down.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((std - 0.0625).abs() < 0.2 * 0.0625, "std = {std}");
    }

    #[test]
    fn init_is_bit_deterministic() {
        assert_eq!(init_adapter(8, 5, 3, 11).unwrap(), init_adapter(8, 5, 3, 11).unwrap());
        assert_ne!(init_adapter(8, 5, 3, 11).unwrap(), init_adapter(8, 5, 3, 12).unwrap());
    }

    #[test]
    fn forward_of_fresh_adapter_is_base() {
        let base = rng::gaussian_matrix(&mut rng::seeded(3), 5, 4, 1.0);
        let a = AdapterPair::new(base.clone(), 2, &mut rng::seeded(4)).unwrap();
        let x = dvector![0.3, -1.0, 2.0, 0.5];
        assert_eq!(a.forward(&x).unwrap(), &base * &x);
    }

    #[test]
    fn forward_identity_base() {
        let a = AdapterPair::new(Matrix::identity(4, 4), 2, &mut rng::seeded(0)).unwrap();
        let x = dvector![1.0, 2.0, 3.0, 4.0];
        assert_eq!(a.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_hand_example() {
        let a = AdapterPair::from_parts(Matrix::zeros(2, 2), dmatrix![1.0; 0.0], dmatrix![2.0, 0.0])
            .unwrap();
        let y = a.forward(&dvector![3.0, 5.0]).unwrap();
        assert_eq!(y, dvector![6.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let a = init_adapter(3, 3, 1, 0).unwrap();
        assert!(matches!(a.forward(&dvector![1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn effective_update_hand_example() {
        let a = AdapterPair::from_parts(Matrix::zeros(2, 2), dmatrix![1.0; 1.0], dmatrix![1.0, 2.0])
            .unwrap();
        assert_eq!(a.effective_update(), dmatrix![1.0, 2.0; 1.0, 2.0]);
    }

    #[test]
    fn network_rejects_mismatched_chain() {
        let a = init_adapter(4, 3, 1, 0).unwrap();
        let b = init_adapter(2, 5, 1, 0).unwrap();
        assert!(AdapterNetwork::new(vec![a, b]).is_err());
    }
}
