//! Adapter training with periodic spectral restarts.
//!
//! Each epoch runs `batches_per_epoch` gradient steps on the mean squared
//! error between the adapted network and the targets. Only the factor
//! matrices move; base matrices stay frozen. In [`Mode::AcLora`] a restart
//! fires after every `restart_interval`-th epoch (1-indexed) except the last,
//! using a threshold computed from the losses recorded since the previous
//! restart. [`Mode::FixedRank`] is plain LoRA at the configured maximum rank.
//!
//! Gradients are written out by hand. For one layer with input rows `H`,
//! hidden rows `Z = H·Aᵀ` and upstream gradient `G = ∂L/∂(output)`:
//!
//! ```text
//! ∂L/∂B = Gᵀ·Z
//! ∂L/∂A = (G·B)ᵀ·H
//! ∂L/∂H = G·W0 + (G·B)·A
//! ```
//!
//! with `G = 2·(Y_hat − Y) / (n·d)` at the output.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterNetwork, AdapterPair};
use crate::error::{Error, Result};
use crate::rng::{self, streams, SeededRng};
use crate::schedule::{ScheduleState, DEFAULT_LOSS_CEILING, DEFAULT_LOSS_FLOOR};
use crate::spectral::{self, RestartReport, UnionScope};
use crate::task::{Batch, NetworkTask, SyntheticTask};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Training with periodic restarts.
    AcLora,
    /// Plain LoRA at `max_rank`, never restarted.
    FixedRank,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ac_lora" => Ok(Mode::AcLora),
            "fixed_rank" | "fixed_rank_baseline" => Ok(Mode::FixedRank),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::AcLora => "ac_lora",
            Mode::FixedRank => "fixed_rank",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    /// Epochs between restarts (`E`).
    pub restart_interval: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// L2 penalty coefficient on both factors.
    pub weight_decay: f64,
    pub max_rank: usize,
    pub union_scope: UnionScope,
    pub mode: Mode,
    pub seed: u64,
    /// Size of the fixed training set; 0 draws a fresh batch every step.
    pub train_samples: usize,
    /// Size of the held-out noiseless set evaluated after every epoch; 0 disables it.
    pub eval_samples: usize,
    pub loss_floor: f64,
    pub loss_ceiling: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 100,
            restart_interval: 10,
            batches_per_epoch: 48,
            batch_size: 16,
            learning_rate: 2.0,
            optimizer: Optimizer::Sgd,
            weight_decay: 0.00125,
            max_rank: 16,
            union_scope: UnionScope::Pair,
            mode: Mode::AcLora,
            seed: 0,
            train_samples: 128,
            eval_samples: 1024,
            loss_floor: DEFAULT_LOSS_FLOOR,
            loss_ceiling: DEFAULT_LOSS_CEILING,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.total_epochs == 0 {
            return fail("total_epochs must be at least 1".into());
        }
        if self.restart_interval == 0 {
            return fail("restart_interval must be at least 1".into());
        }
        if self.batches_per_epoch == 0 || self.batch_size == 0 {
            return fail("batches_per_epoch and batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.max_rank == 0 {
            return fail("max_rank must be at least 1".into());
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return fail("adam needs 0 <= beta1, beta2 < 1 and eps > 0".into());
            }
        }
        if !(0.0 < self.loss_floor && self.loss_floor < self.loss_ceiling && self.loss_ceiling < 1.0)
        {
            return fail("need 0 < loss_floor < loss_ceiling < 1".into());
        }
        Ok(())
    }

    /// Epochs after which a restart fires.
    pub fn restart_epochs(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.total_epochs).filter(move |e| {
            self.mode == Mode::AcLora && e % self.restart_interval.max(1) == 0
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    /// Threshold and separation strength, when a restart fired this epoch.
    pub threshold: Option<f64>,
    pub alpha: Option<f64>,
    /// Current retained count per adapter (max rank until the first restart).
    pub retained: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochLog>,
    pub restarts: Vec<RestartReport>,
    pub network: AdapterNetwork,
    #[serde(skip)]
    pub duration: Duration,
}

impl TrainRecord {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn final_eval_loss(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.eval_loss)
    }

    /// Retained count of the last restart (largest across adapters), or the
    /// configured maximum rank if no restart fired.
    pub fn final_retained(&self) -> usize {
        match self.restarts.last() {
            Some(r) => r.max_retained(),
            None => self
                .network
                .layers()
                .iter()
                .map(AdapterPair::max_rank)
                .max()
                .unwrap_or(0),
        }
    }

    /// Same losses, restarts and adapters; wall-clock time is ignored.
    pub fn same_outcome(&self, other: &TrainRecord) -> bool {
        self.epochs == other.epochs
            && self.restarts == other.restarts
            && self.network == other.network
    }
}

struct Moments {
    m: Matrix,
    v: Matrix,
}

impl Moments {
    fn zeros_like(p: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(p.nrows(), p.ncols()),
            v: Matrix::zeros(p.nrows(), p.ncols()),
        }
    }
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    weight_decay: f64,
    step: i32,
    /// `(up, down)` moments per layer.
    moments: Vec<(Moments, Moments)>,
}

impl OptimizerState {
    fn new(config: &TrainConfig, network: &AdapterNetwork) -> Self {
        let mut s = Self {
            kind: config.optimizer,
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            step: 0,
            moments: Vec::new(),
        };
        s.reset(network);
        s
    }

    fn reset(&mut self, network: &AdapterNetwork) {
        self.step = 0;
        self.moments = match self.kind {
            Optimizer::Sgd => Vec::new(),
            Optimizer::Adam { .. } => network
                .layers()
                .iter()
                .map(|l| (Moments::zeros_like(&l.up), Moments::zeros_like(&l.down)))
                .collect(),
        };
    }

    fn apply(&mut self, network: &mut AdapterNetwork, grads: Vec<(Matrix, Matrix)>) {
        self.step += 1;
        for (j, (layer, (mut g_up, mut g_down))) in
            network.layers_mut().iter_mut().zip(grads).enumerate()
        {
            if self.weight_decay > 0.0 {
                g_up += &layer.up * self.weight_decay;
                g_down += &layer.down * self.weight_decay;
            }
            match self.kind {
                Optimizer::Sgd => {
                    layer.up -= g_up * self.lr;
                    layer.down -= g_down * self.lr;
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (mu, md) = &mut self.moments[j];
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    for (param, grad, mom) in [(&mut layer.up, g_up, mu), (&mut layer.down, g_down, md)]
                    {
                        mom.m = &mom.m * beta1 + &grad * (1.0 - beta1);
                        mom.v = &mom.v * beta2 + grad.component_mul(&grad) * (1.0 - beta2);
                        let lr = self.lr;
                        param.zip_zip_apply(&mom.m, &mom.v, |p, m, v| {
                            *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                        });
                    }
                }
            }
        }
    }
}

/// Loss and factor gradients for one batch.
fn loss_and_grads(network: &AdapterNetwork, batch: &Batch) -> (f64, Vec<(Matrix, Matrix)>) {
    let layers = network.layers();
    let n = batch.len() as f64;
    let mut inputs = Vec::with_capacity(layers.len());
    let mut hiddens = Vec::with_capacity(layers.len());
    let mut h = batch.inputs.clone();
    for layer in layers {
        let z = &h * layer.down.transpose();
        let next = &h * layer.base().transpose() + &z * layer.up.transpose();
        inputs.push(h);
        hiddens.push(z);
        h = next;
    }
    let residual = h - &batch.targets;
    let d_out = residual.ncols() as f64;
    let loss = residual.norm_squared() / (n * d_out);

    let mut upstream = residual * (2.0 / (n * d_out));
    let mut grads = vec![(Matrix::zeros(0, 0), Matrix::zeros(0, 0)); layers.len()];
    for j in (0..layers.len()).rev() {
        let layer = &layers[j];
        let g_b = &upstream * &layer.up;
        let grad_up = upstream.transpose() * &hiddens[j];
        let grad_down = g_b.transpose() * &inputs[j];
        if j > 0 {
            upstream = &upstream * layer.base() + &g_b * &layer.down;
        }
        grads[j] = (grad_up, grad_down);
    }
    (loss, grads)
}

/// Mean squared error of `network` on `batch`.
pub fn batch_loss(network: &AdapterNetwork, batch: &Batch) -> Result<f64> {
    let out = network.forward_batch(&batch.inputs)?;
    if out.shape() != batch.targets.shape() {
        return Err(Error::shape("network output does not match target shape"));
    }
    Ok((out - &batch.targets).norm_squared() / batch.targets.len() as f64)
}

const EVAL_CHUNK: usize = 4096;

/// Held-out mean squared error on fresh noiseless samples.
pub fn evaluate<R: Rng + ?Sized>(
    network: &AdapterNetwork,
    task: &NetworkTask,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::domain("evaluation needs at least one sample"));
    }
    let mut total = 0.0;
    let mut remaining = n_samples;
    while remaining > 0 {
        let n = remaining.min(EVAL_CHUNK);
        let batch = task.sample_with_noise(n, 0.0, rng);
        total += batch_loss(network, &batch)? * n as f64;
        remaining -= n;
    }
    Ok(total / n_samples as f64)
}

/// [`evaluate`] for a single adapter.
pub fn evaluate_adapter<R: Rng + ?Sized>(
    adapter: &AdapterPair,
    task: &SyntheticTask,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    evaluate(
        &AdapterNetwork::single(adapter.clone()),
        &NetworkTask::single(task.clone()),
        n_samples,
        rng,
    )
}

enum DataSource {
    Fixed {
        set: Batch,
        order: Vec<usize>,
        cursor: usize,
        rng: SeededRng,
    },
    Online {
        rng: SeededRng,
    },
}

impl DataSource {
    fn new(task: &NetworkTask, config: &TrainConfig) -> Self {
        let mut data_rng = rng::stream(config.seed, streams::TRAIN_DATA);
        if config.train_samples == 0 {
            return DataSource::Online { rng: data_rng };
        }
        let set = task.sample(config.train_samples, &mut data_rng);
        DataSource::Fixed {
            order: (0..config.train_samples).collect(),
            cursor: config.train_samples,
            set,
            rng: rng::stream(config.seed, streams::BATCH_ORDER),
        }
    }

    fn next_batch(&mut self, task: &NetworkTask, batch_size: usize) -> Batch {
        match self {
            DataSource::Online { rng } => task.sample(batch_size, rng),
            DataSource::Fixed {
                set,
                order,
                cursor,
                rng,
            } => {
                if batch_size >= order.len() {
                    return set.clone();
                }
                if *cursor + batch_size > order.len() {
                    order.shuffle(rng);
                    *cursor = 0;
                }
                let picked = set.select(&order[*cursor..*cursor + batch_size]);
                *cursor += batch_size;
                picked
            }
        }
    }
}

/// Trains a single adapter on a single-layer task.
pub fn train(task: &SyntheticTask, config: &TrainConfig) -> Result<TrainRecord> {
    train_network(&NetworkTask::single(task.clone()), config)
}

/// Trains one adapter per task layer.
pub fn train_network(task: &NetworkTask, config: &TrainConfig) -> Result<TrainRecord> {
    config.validate()?;
    let started = Instant::now();

    let mut init_rng = rng::stream(config.seed, streams::ADAPTER_INIT);
    let layers = task
        .layers()
        .iter()
        .map(|t| AdapterPair::new(t.base.clone(), config.max_rank, &mut init_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut network = AdapterNetwork::new(layers)?;

    let mut data = DataSource::new(task, config);
    let eval_set = (config.eval_samples > 0).then(|| {
        task.sample_with_noise(
            config.eval_samples,
            0.0,
            &mut rng::stream(config.seed, streams::EVAL),
        )
    });
    let mut restart_rng = rng::stream(config.seed, streams::RESTART_NOISE);
    let mut optimizer = OptimizerState::new(config, &network);
    let mut schedule =
        ScheduleState::with_bounds(config.total_epochs, config.loss_floor, config.loss_ceiling)?;

    let mut retained = vec![config.max_rank; network.len()];
    let mut epochs = Vec::with_capacity(config.total_epochs);
    let mut restarts = Vec::new();
    let mut last_finite = None;

    for epoch in 1..=config.total_epochs {
        let mut sum = 0.0;
        for _ in 0..config.batches_per_epoch {
            let batch = data.next_batch(task, config.batch_size);
            let (loss, grads) = loss_and_grads(&network, &batch);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_finite_loss: last_finite,
                });
            }
            sum += loss;
            optimizer.apply(&mut network, grads);
        }
        let train_loss = sum / config.batches_per_epoch as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_finite_loss: last_finite,
            });
        }
        last_finite = Some(train_loss);
        schedule.record_epoch(train_loss)?;

        let mut log = EpochLog {
            epoch,
            train_loss,
            eval_loss: None,
            threshold: None,
            alpha: None,
            retained: Vec::new(),
        };

        let fires = config.mode == Mode::AcLora
            && epoch % config.restart_interval == 0
            && epoch < config.total_epochs;
        if fires {
            let (p, alpha, l) = schedule.current_threshold()?;
            let noise_seed = spectral::next_noise_seed(&mut restart_rng);
            let modules = spectral::restart_network(&mut network, p, config.union_scope, noise_seed)?;
            retained = modules.iter().map(|m| m.retained).collect();
            let window = schedule.take_window();
            restarts.push(RestartReport {
                epoch,
                threshold: p,
                alpha,
                normalized_loss: l,
                window_len: window.len(),
                modules,
            });
            optimizer.reset(&network);
            log.threshold = Some(p);
            log.alpha = Some(alpha);
        }

        if let Some(set) = &eval_set {
            log.eval_loss = Some(batch_loss(&network, set)?);
        }
        log.retained = retained.clone();
        epochs.push(log);
    }

    Ok(TrainRecord {
        epochs,
        restarts,
        network,
        duration: started.elapsed(),
    })
}
