//! Spectral restart of adapter factors.
//!
//! A restart takes a factor matrix `M = U·diag(d)·V`, keeps the leading
//! singular directions whose cumulative squared energy stays strictly below a
//! fraction `p` of the total, zeroes the rest, and adds i.i.d. Gaussian noise
//! to the whole matrix with the population standard deviation of the removed
//! part:
//!
//! ```text
//! D'  = d on the signal prefix, 0 elsewhere
//! σ   = std(M − U·D'·V)
//! M'  = U·D'·V + G,   G_ij ~ N(0, σ²)
//! ```
//!
//! Both factors of one adapter share the retained count: each factor's signal
//! set is a prefix, so their union is simply the longer prefix.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterNetwork, AdapterPair};
use crate::error::{Error, Result};
use crate::{par, rng, Matrix};

const SVD_EPS: f64 = 1e-14;
const SVD_MAX_ITER: usize = 10_000;

/// Thin SVD `M = u · diag(d) · v` with `d` sorted non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFactors {
    /// `m×q`, orthonormal columns.
    pub u: Matrix,
    /// Singular values, length `q = min(m, n)`.
    pub d: Vec<f64>,
    /// `q×n`, orthonormal rows.
    pub v: Matrix,
}

impl SpectralFactors {
    pub fn rank_bound(&self) -> usize {
        self.d.len()
    }

    /// `u[:, ..keep] · diag(d[..keep]) · v[..keep, :]`.
    pub fn reconstruct_prefix(&self, keep: usize) -> Matrix {
        let keep = keep.min(self.d.len());
        let mut scaled = self.u.columns(0, keep).into_owned();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.d[j];
        }
        scaled * self.v.rows(0, keep)
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_prefix(self.d.len())
    }
}

pub fn svd(m: &Matrix) -> Result<SpectralFactors> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::shape("cannot decompose an empty matrix"));
    }
    let decomposition = m
        .clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numeric(format!("SVD of {rows}x{cols} matrix did not converge")))?;
    let (Some(u), Some(v_t)) = (decomposition.u, decomposition.v_t) else {
        return Err(Error::Numeric("SVD returned no singular vectors".into()));
    };
    let values = decomposition.singular_values;

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let q = order.len();
    let mut su = Matrix::zeros(rows, q);
    let mut sv = Matrix::zeros(q, cols);
    let mut d = Vec::with_capacity(q);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_row(dst, &v_t.row(src));
        d.push(values[src].max(0.0));
    }
    Ok(SpectralFactors { u: su, d, v: sv })
}

/// Partition of `0..len` into a retained prefix and the discarded rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSplit {
    retained: usize,
    len: usize,
    threshold: f64,
}

impl SignalSplit {
    /// Split keeping the first `retained` of `len` indices.
    pub fn prefix(retained: usize, len: usize, threshold: f64) -> Result<Self> {
        if retained > len {
            return Err(Error::shape(format!("cannot keep {retained} of {len} indices")));
        }
        Ok(Self {
            retained,
            len,
            threshold,
        })
    }

    pub fn retained(&self) -> usize {
        self.retained
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn signal(&self) -> std::ops::Range<usize> {
        0..self.retained
    }

    pub fn noise(&self) -> std::ops::Range<usize> {
        self.retained..self.len
    }
}

/// Signal set `{i : Σ_{j≤i} d_j² < p · Σ_j d_j²}`, clamped to keep at least index 0.
pub fn signal_indices(d: &[f64], p: f64) -> Result<SignalSplit> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("threshold {p} outside [0, 1]")));
    }
    if d.is_empty() {
        return Err(Error::domain("empty spectrum"));
    }
    if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::domain("singular values must be finite and non-negative"));
    }
    if d.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::domain("singular values must be non-increasing"));
    }

    let mut cumulative = Vec::with_capacity(d.len());
    let mut acc = 0.0;
    for v in d {
        acc += v * v;
        cumulative.push(acc);
    }
    let cut = acc * p;
    // Cumulative sums are non-decreasing, so the strict test selects a prefix.
    let count = cumulative.iter().take_while(|&&c| c < cut).count();
    SignalSplit::prefix(count.max(1), d.len(), p)
}

/// Population standard deviation over all entries.
pub fn population_std(m: &Matrix) -> f64 {
    let n = m.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = m.sum() / n;
    (m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Truncates `m` to `keep` directions of `factors` and refills with matched noise.
fn truncate_and_refill<R: Rng + ?Sized>(
    m: &Matrix,
    factors: &SpectralFactors,
    keep: usize,
    rng: &mut R,
) -> (Matrix, f64) {
    let kept = factors.reconstruct_prefix(keep);
    let sigma = population_std(&(m - &kept));
    let noise = rng::gaussian_matrix(rng, m.nrows(), m.ncols(), sigma);
    (kept + noise, sigma)
}

/// Restarts one matrix against a split computed from its own spectrum.
///
/// Returns the new matrix and the noise standard deviation that was injected.
pub fn restart_layer<R: Rng + ?Sized>(
    m: &Matrix,
    split: &SignalSplit,
    rng: &mut R,
) -> Result<(Matrix, f64)> {
    let factors = svd(m)?;
    if split.len() != factors.rank_bound() {
        return Err(Error::shape(format!(
            "split covers {} indices but the {}x{} matrix has {}",
            split.len(),
            m.nrows(),
            m.ncols(),
            factors.rank_bound()
        )));
    }
    Ok(truncate_and_refill(m, &factors, split.retained(), rng))
}

/// Which factor of an adapter a record refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Up,
    Down,
}

/// What a restart did to one factor matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRestart {
    /// `|S|` computed from this factor alone.
    pub signal_count: usize,
    pub sigma: f64,
    pub spectrum_before: Vec<f64>,
    pub spectrum_after: Vec<f64>,
}

/// What a restart did to one adapter pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleRestart {
    /// Index of the adapter within its network.
    pub layer: usize,
    /// Retained count `I` applied to both factors.
    pub retained: usize,
    pub up: FactorRestart,
    pub down: FactorRestart,
}

impl ModuleRestart {
    pub fn factor(&self, which: Factor) -> &FactorRestart {
        match which {
            Factor::Up => &self.up,
            Factor::Down => &self.down,
        }
    }
}

/// One restart event across a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub epoch: usize,
    /// Energy threshold `p`.
    pub threshold: f64,
    pub alpha: f64,
    /// Loss fed into the threshold after normalization.
    pub normalized_loss: f64,
    /// Number of epoch losses averaged for this restart.
    pub window_len: usize,
    pub modules: Vec<ModuleRestart>,
}

impl RestartReport {
    /// Largest retained count across modules.
    pub fn max_retained(&self) -> usize {
        self.modules.iter().map(|m| m.retained).max().unwrap_or(0)
    }
}

/// Scope over which the retained count is unioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnionScope {
    /// Up and down factors of one adapter share `I`.
    #[default]
    Pair,
    /// Every factor in the network shares one `I`.
    Global,
}

impl std::str::FromStr for UnionScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(Self::Pair),
            "global" => Ok(Self::Global),
            other => Err(Error::Config(format!("unknown union scope `{other}`"))),
        }
    }
}

impl std::fmt::Display for UnionScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pair => "pair",
            Self::Global => "global",
        })
    }
}

struct Analyzed {
    up: SpectralFactors,
    down: SpectralFactors,
    up_count: usize,
    down_count: usize,
}

fn analyze(adapter: &AdapterPair, p: f64) -> Result<Analyzed> {
    let up = svd(&adapter.up)?;
    let down = svd(&adapter.down)?;
    let up_count = signal_indices(&up.d, p)?.retained();
    let down_count = signal_indices(&down.d, p)?.retained();
    Ok(Analyzed {
        up,
        down,
        up_count,
        down_count,
    })
}

fn apply<R: Rng + ?Sized>(
    adapter: &mut AdapterPair,
    layer: usize,
    analyzed: Analyzed,
    retained: usize,
    rng: &mut R,
) -> Result<ModuleRestart> {
    let keep = retained.min(adapter.max_rank());
    let (new_up, up_sigma) = truncate_and_refill(&adapter.up, &analyzed.up, keep, rng);
    let (new_down, down_sigma) = truncate_and_refill(&adapter.down, &analyzed.down, keep, rng);
    let up_after = svd(&new_up)?.d;
    let down_after = svd(&new_down)?.d;
    adapter.set_factors(new_up, new_down);
    Ok(ModuleRestart {
        layer,
        retained: keep,
        up: FactorRestart {
            signal_count: analyzed.up_count,
            sigma: up_sigma,
            spectrum_before: analyzed.up.d,
            spectrum_after: up_after,
        },
        down: FactorRestart {
            signal_count: analyzed.down_count,
            sigma: down_sigma,
            spectrum_before: analyzed.down.d,
            spectrum_after: down_after,
        },
    })
}

/// Restarts both factors of one adapter with a shared retained count.
///
/// The up factor's noise is drawn before the down factor's.
pub fn restart_module<R: Rng + ?Sized>(
    adapter: &mut AdapterPair,
    p: f64,
    rng: &mut R,
) -> Result<ModuleRestart> {
    let analyzed = analyze(adapter, p)?;
    let retained = analyzed.up_count.max(analyzed.down_count);
    apply(adapter, 0, analyzed, retained, rng)
}

/// Per-adapter work item: the pending analysis and, once applied, its outcome.
type Slot = (Option<Analyzed>, Option<Result<ModuleRestart>>);

/// Restarts every adapter of a network.
///
/// Adapter `j` draws its noise from stream `j` of `noise_seed`, so the result
/// does not depend on whether adapters are processed in parallel.
pub fn restart_network(
    network: &mut AdapterNetwork,
    p: f64,
    scope: UnionScope,
    noise_seed: u64,
) -> Result<Vec<ModuleRestart>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("threshold {p} outside [0, 1]")));
    }
    let analyzed: Vec<Analyzed> = par::map_slice(network.layers(), |a| analyze(a, p))
        .into_iter()
        .collect::<Result<_>>()?;
    let global = analyzed
        .iter()
        .map(|a| a.up_count.max(a.down_count))
        .max()
        .unwrap_or(1);

    let mut slots: Vec<Slot> = analyzed.into_iter().map(|a| (Some(a), None)).collect();
    let layers = network.layers_mut();
    let mut jobs: Vec<(&mut AdapterPair, &mut Slot)> = layers.iter_mut().zip(slots.iter_mut()).collect();
    par::for_each_mut(&mut jobs, |j, (adapter, slot)| {
        let a = slot.0.take().expect("analysis consumed once");
        let retained = match scope {
            UnionScope::Pair => a.up_count.max(a.down_count),
            UnionScope::Global => global,
        };
        let mut noise = rng::stream(noise_seed, j as u64);
        slot.1 = Some(apply(adapter, j, a, retained, &mut noise));
    });
    slots
        .into_iter()
        .map(|(_, r)| r.expect("every adapter restarted"))
        .collect()
}

/// Draws a fresh noise seed for [`restart_network`].
pub fn next_noise_seed<R: RngCore + ?Sized>(rng: &mut R) -> u64 {
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded};
    use nalgebra::dmatrix;

    fn rel_fro(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn svd_of_identity() {
        let f = svd(&Matrix::identity(3, 3)).unwrap();
        for v in &f.d {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_of_diagonal_is_sorted_and_signed_identity() {
        let f = svd(&dmatrix![1.0, 0.0, 0.0; 0.0, 3.0, 0.0; 0.0, 0.0, 2.0]).unwrap();
        assert!((f.d[0] - 3.0).abs() < 1e-12);
        assert!((f.d[1] - 2.0).abs() < 1e-12);
        assert!((f.d[2] - 1.0).abs() < 1e-12);
        // columns of u pick out coordinates 1, 2, 0 up to sign
        for (col, row) in [(0, 1), (1, 2), (2, 0)] {
            assert!((f.u[(row, col)].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_reconstructs_rectangular() {
        let mut rng = seeded(5);
        for (r, c) in [(8, 5), (5, 8), (1, 7), (64, 16)] {
            let m = gaussian_matrix(&mut rng, r, c, 1.0);
            let f = svd(&m).unwrap();
            assert_eq!(f.d.len(), r.min(c));
            assert!(rel_fro(&f.reconstruct(), &m) < 1e-8);
            let q = f.d.len();
            assert!((f.u.transpose() * &f.u - Matrix::identity(q, q)).amax() < 1e-8);
            assert!((&f.v * f.v.transpose() - Matrix::identity(q, q)).amax() < 1e-8);
            assert!(f.d.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = dmatrix![1.0, f64::NAN; 0.0, 1.0];
        assert!(matches!(svd(&m), Err(Error::Numeric(_))));
        let m = dmatrix![1.0, f64::INFINITY; 0.0, 1.0];
        assert!(matches!(svd(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn signal_hand_examples() {
        let s = signal_indices(&[2.0, 1.0, 1.0], 0.7).unwrap();
        assert_eq!(s.signal(), 0..1);
        assert_eq!(s.noise(), 1..3);
        let s = signal_indices(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(s.signal(), 0..1);
        assert_eq!(s.noise(), 1..4);
    }

    #[test]
    fn signal_clamps_to_one() {
        assert_eq!(signal_indices(&[5.0, 1.0, 0.5], 0.0).unwrap().retained(), 1);
        assert_eq!(signal_indices(&[0.0, 0.0, 0.0], 0.9).unwrap().retained(), 1);
    }

    #[test]
    fn signal_full_threshold_keeps_all_but_crossing_index() {
        // Sum_i < Sum holds for every index but the last when all values are positive.
        assert_eq!(signal_indices(&[3.0, 2.0, 1.0], 1.0).unwrap().retained(), 2);
    }

    #[test]
    fn signal_rejects_bad_input() {
        assert!(matches!(signal_indices(&[1.0], 1.5), Err(Error::Domain(_))));
        assert!(matches!(signal_indices(&[1.0], -0.1), Err(Error::Domain(_))));
        assert!(matches!(signal_indices(&[1.0, 2.0], 0.5), Err(Error::Domain(_))));
        assert!(matches!(signal_indices(&[], 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn restart_keeping_everything_is_identity() {
        let m = gaussian_matrix(&mut seeded(1), 12, 7, 1.0);
        let split = SignalSplit::prefix(7, 7, 1.0).unwrap();
        let (out, sigma) = restart_layer(&m, &split, &mut seeded(2)).unwrap();
        assert!(sigma <= 1e-8);
        assert!(rel_fro(&out, &m) < 1e-7);
    }

    #[test]
    fn restart_sigma_on_diagonal() {
        let m = dmatrix![5.0, 0.0, 0.0; 0.0, 0.1, 0.0; 0.0, 0.0, 0.1];
        let split = SignalSplit::prefix(1, 3, 0.5).unwrap();
        let (_, sigma) = restart_layer(&m, &split, &mut seeded(0)).unwrap();
        // residual is diag(0, 0.1, 0.1): mean 0.2/9, E[x²] = 0.02/9
        let mean: f64 = 0.2 / 9.0;
        let expected = (0.02 / 9.0 - mean * mean).sqrt();
        assert!((sigma - expected).abs() < 1e-10, "{sigma} vs {expected}");
    }

    #[test]
    fn restart_rejects_mismatched_split() {
        let m = gaussian_matrix(&mut seeded(1), 4, 3, 1.0);
        let split = SignalSplit::prefix(1, 4, 0.5).unwrap();
        assert!(matches!(restart_layer(&m, &split, &mut seeded(0)), Err(Error::Shape(_))));
    }

    #[test]
    fn restart_noise_matches_sigma() {
        let m = gaussian_matrix(&mut seeded(3), 64, 64, 1.0);
        let split = SignalSplit::prefix(32, 64, 0.5).unwrap();
        let factors = svd(&m).unwrap();
        let (out, sigma) = restart_layer(&m, &split, &mut seeded(4)).unwrap();
        let noise = out - factors.reconstruct_prefix(32);
        let est = population_std(&noise);
        assert!((est - sigma).abs() < 0.1 * sigma, "{est} vs {sigma}");
    }

    #[test]
    fn restart_is_deterministic_in_rng() {
        let m = gaussian_matrix(&mut seeded(3), 10, 6, 1.0);
        let split = SignalSplit::prefix(2, 6, 0.5).unwrap();
        let a = restart_layer(&m, &split, &mut seeded(9)).unwrap();
        let b = restart_layer(&m, &split, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    fn adapter_with_spectra(up_d: &[f64], down_d: &[f64]) -> AdapterPair {
        let mut rng = seeded(17);
        let r = up_d.len();
        let (d, k) = (12, 10);
        let qu = svd(&gaussian_matrix(&mut rng, d, r, 1.0)).unwrap().u;
        let qv = svd(&gaussian_matrix(&mut rng, r, r, 1.0)).unwrap().u;
        let up = qu * Matrix::from_diagonal(&nalgebra::DVector::from_row_slice(up_d)) * qv.transpose();
        let qa = svd(&gaussian_matrix(&mut rng, r, r, 1.0)).unwrap().u;
        let qb = svd(&gaussian_matrix(&mut rng, k, r, 1.0)).unwrap().u;
        let down =
            qa * Matrix::from_diagonal(&nalgebra::DVector::from_row_slice(down_d)) * qb.transpose();
        AdapterPair::from_parts(Matrix::zeros(d, k), up, down).unwrap()
    }

    #[test]
    fn module_restart_takes_union_of_prefixes() {
        // At p = 0.9: up keeps 3 (cumulative energy 0.80 < 0.9 at index 2),
        // down keeps 5.
        let up_d = [4.0_f64.sqrt(), 3.0_f64.sqrt(), 1.0, 1.0, 0.5, 0.5];
        let down_d = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let up_split = signal_indices(&up_d, 0.9).unwrap();
        let down_split = signal_indices(&down_d, 0.9).unwrap();
        assert_eq!(up_split.retained(), 3);
        assert_eq!(down_split.retained(), 5);

        let mut adapter = adapter_with_spectra(&up_d, &down_d);
        let report = restart_module(&mut adapter, 0.9, &mut seeded(1)).unwrap();
        assert_eq!(report.up.signal_count, 3);
        assert_eq!(report.down.signal_count, 5);
        assert_eq!(report.retained, 5);
    }

    #[test]
    fn module_restart_preserves_shape_and_base() {
        let base = gaussian_matrix(&mut seeded(8), 9, 7, 1.0);
        let mut rng = seeded(2);
        let mut adapter = AdapterPair::new(base.clone(), 4, &mut rng).unwrap();
        adapter.up = gaussian_matrix(&mut rng, 9, 4, 1.0);
        restart_module(&mut adapter, 0.6, &mut rng).unwrap();
        assert_eq!(adapter.up.shape(), (9, 4));
        assert_eq!(adapter.down.shape(), (4, 7));
        assert_eq!(adapter.base(), &base);
    }

    #[test]
    fn global_scope_shares_retained_count() {
        let mut rng = seeded(4);
        let l0 = AdapterPair::from_parts(
            Matrix::zeros(6, 5),
            gaussian_matrix(&mut rng, 6, 3, 1.0),
            gaussian_matrix(&mut rng, 3, 5, 1.0),
        )
        .unwrap();
        let mut up1 = Matrix::zeros(4, 3);
        up1[(0, 0)] = 10.0;
        up1[(1, 1)] = 0.01;
        up1[(2, 2)] = 0.01;
        let mut down1 = Matrix::zeros(3, 6);
        down1[(0, 0)] = 10.0;
        down1[(1, 1)] = 0.01;
        down1[(2, 2)] = 0.01;
        let l1 = AdapterPair::from_parts(Matrix::zeros(4, 6), up1, down1).unwrap();
        let net = AdapterNetwork::new(vec![l0, l1]).unwrap();

        let mut pair = net.clone();
        let pair_reports = restart_network(&mut pair, 0.95, UnionScope::Pair, 7).unwrap();
        let mut global = net.clone();
        let global_reports = restart_network(&mut global, 0.95, UnionScope::Global, 7).unwrap();
        assert_eq!(pair_reports[1].retained, 1);
        assert!(pair_reports[0].retained > 1);
        let top = pair_reports.iter().map(|r| r.retained).max().unwrap();
        assert!(global_reports.iter().all(|r| r.retained == top));
    }
}
