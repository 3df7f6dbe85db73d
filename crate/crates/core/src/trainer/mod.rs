//! Training loop, batch construction, sampling, and checkpoints.
//!
//! The loop is plain Adam over the masked epsilon-prediction error. All
//! randomness comes from one ChaCha stream whose draw order is fixed, and
//! per-item gradients are reduced in index order, so runs are bit-identical
//! whether or not batch items are evaluated in parallel.

mod batch;
mod checkpoint;
mod sample;

pub use batch::{loss, make_batch, EncodedPair, TrainItem};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use sample::{sample, sample_with_teacher, GenMode, SampleOpts};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ModelConfig, ModelParams};
use crate::rng;
use crate::schedule::{ScheduleError, ScheduleSpec};
use crate::video::CodecError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: u64 },
    #[error("hi2r sampling requires a first frame")]
    MissingFirstFrame,
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
}

/// Everything a training run needs, serialized into checkpoints and configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Fraction of batches built in HI2R mode (clean frame-0 anchors).
    #[serde(default = "default_hi2r_fraction")]
    pub hi2r_fraction: f64,
    /// Probability that a batch item trains with the null condition.
    #[serde(default = "default_cond_dropout")]
    pub cond_dropout: f64,
    pub seed: u64,
    pub patch: usize,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub model: ModelConfig,
    /// Validation cadence in steps (0 disables mid-run validation; the loop
    /// still validates at step 0 and after the final step when a validation
    /// set is present).
    #[serde(default = "default_val_every")]
    pub val_every: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_hi2r_fraction() -> f64 {
    0.5
}
fn default_cond_dropout() -> f64 {
    0.1
}
fn default_val_every() -> usize {
    50
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig("lr must be positive".into()));
        }
        for (name, p) in [("hi2r_fraction", self.hi2r_fraction), ("cond_dropout", self.cond_dropout)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrainError::InvalidConfig(format!("{name} must be in [0,1]")));
            }
        }
        if self.patch == 0 {
            return Err(TrainError::InvalidConfig("patch must be >= 1".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// Mutable optimizer state; checkpoints snapshot all of it so resumed runs
/// continue bit-identically.
pub struct TrainState {
    pub params: ModelParams,
    pub adam_m: ModelParams,
    pub adam_v: ModelParams,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let params = model::init_params(&config.model, config.seed)?;
        Ok(Self {
            adam_m: ModelParams::zeros(&config.model),
            adam_v: ModelParams::zeros(&config.model),
            params,
            step: 0,
            rng: rng::derive(config.seed, &[0x7a17]),
        })
    }
}

fn adam_update(state: &mut TrainState, grads: &ModelParams, cfg: &TrainConfig) {
    let t = state.step as i32;
    let b1 = cfg.adam_beta1;
    let b2 = cfg.adam_beta2;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let mut p = state.params.param_slices_mut();
    let mut m = state.adam_m.param_slices_mut();
    let mut v = state.adam_v.param_slices_mut();
    let g = grads.param_slices();
    for i in 0..p.len() {
        let (ps, ms, vs, gs) = (&mut p[i].2, &mut m[i].2, &mut v[i].2, &g[i].2);
        for j in 0..ps.len() {
            let grad = gs[j];
            ms[j] = b1 * ms[j] + (1.0 - b1) * grad;
            vs[j] = b2 * vs[j] + (1.0 - b2) * grad * grad;
            let mhat = ms[j] / bias1;
            let vhat = vs[j] / bias2;
            ps[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Fixed draws used to measure validation epsilon-MSE comparably across the
/// run: one (t, eps) pair per validation clip, drawn once from a derived
/// stream.
struct ValDraw {
    pair: usize,
    t: usize,
    eps: ndarray::Array2<f64>,
}

fn build_val_draws(
    config: &TrainConfig,
    valset: &[EncodedPair],
    steps: usize,
) -> Vec<ValDraw> {
    let mut r = rng::derive(config.seed, &[0x7a1d]);
    valset
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = r.gen_range(1..=steps);
            let eps = ndarray::Array2::from_shape_fn(p.robot.tokens.dim(), |_| {
                r.sample::<f64, _>(rand_distr::StandardNormal)
            });
            ValDraw { pair: i, t, eps }
        })
        .collect()
}

fn val_mse(
    params: &ModelParams,
    valset: &[EncodedPair],
    draws: &[ValDraw],
    sch: &crate::schedule::NoiseSchedule,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for d in draws {
        let pair = &valset[d.pair];
        let bar = sch.alpha_bar(d.t);
        let x = crate::video::LatentSeq {
            tokens: bar.sqrt() * &pair.robot.tokens + (1.0 - bar).sqrt() * &d.eps,
            layout: pair.robot.layout,
            noised: true,
        };
        let mask = vec![false; x.n_tokens()];
        let batch = model::make_tokens(&pair.human, &x, d.t, &mask, params)?;
        let eps_hat = model::dit_forward(&batch, params)?;
        let (l, _) = model::masked_mse(&eps_hat, &d.eps, &vec![true; x.n_tokens()])?;
        total += l;
    }
    Ok(total / draws.len() as f64)
}

/// Result of a training run.
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

/// Train from scratch. `deterministic` forces sequential gradient evaluation;
/// parallel evaluation reduces in fixed order and produces identical bytes.
pub fn train(
    config: &TrainConfig,
    dataset: &[EncodedPair],
    valset: &[EncodedPair],
    deterministic: bool,
) -> Result<TrainResult, TrainError> {
    let state = TrainState::fresh(config)?;
    train_loop(state, config.clone(), dataset, valset, deterministic)
}

/// Continue a checkpointed run until `total_steps`.
pub fn resume(
    ckpt: Checkpoint,
    total_steps: usize,
    dataset: &[EncodedPair],
    valset: &[EncodedPair],
    deterministic: bool,
) -> Result<TrainResult, TrainError> {
    let mut config = ckpt.config.clone();
    config.steps = total_steps;
    let state = ckpt.into_state()?;
    train_loop(state, config, dataset, valset, deterministic)
}

fn train_loop(
    mut state: TrainState,
    config: TrainConfig,
    dataset: &[EncodedPair],
    valset: &[EncodedPair],
    deterministic: bool,
) -> Result<TrainResult, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let sch = config.schedule.build()?;
    let draws = build_val_draws(&config, valset, sch.steps());
    let start = std::time::Instant::now();
    let mut log = Vec::new();

    if state.step == 0 && !valset.is_empty() {
        let v = val_mse(&state.params, valset, &draws, &sch)?;
        log.push(LogRecord {
            step: 0,
            loss: f64::NAN,
            lr: config.lr,
            wall_time_s: start.elapsed().as_secs_f64(),
            val_loss: Some(v),
        });
    }

    while (state.step as usize) < config.steps {
        // draw order per step: indices, mode, then per item (t, eps, dropout)
        let indices: Vec<usize> =
            (0..config.batch_size).map(|_| state.rng.gen_range(0..dataset.len())).collect();
        let mode = if state.rng.gen::<f64>() < config.hi2r_fraction {
            GenMode::Hi2r
        } else {
            GenMode::H2r
        };
        let picked: Vec<&EncodedPair> = indices.iter().map(|&i| &dataset[i]).collect();
        let items = make_batch(
            &picked,
            mode,
            &sch,
            config.cond_dropout,
            &state.params,
            &mut state.rng,
        )?;

        let results: Vec<Result<(f64, ModelParams), model::ModelError>> = if deterministic {
            items
                .iter()
                .map(|it| model::grad(&state.params, &it.batch, &it.target, &it.loss_mask))
                .collect()
        } else {
            items
                .par_iter()
                .map(|it| model::grad(&state.params, &it.batch, &it.target, &it.loss_mask))
                .collect()
        };

        let mut mean_loss = 0.0;
        let mut grads = ModelParams::zeros(&config.model);
        let scale = 1.0 / items.len() as f64;
        for r in results {
            let (l, g) = r?;
            mean_loss += l * scale;
            grads.add_scaled(&g, scale);
        }
        state.step += 1;
        if !mean_loss.is_finite() {
            return Err(TrainError::Diverged { step: state.step });
        }
        adam_update(&mut state, &grads, &config);

        let val_loss = if !valset.is_empty()
            && ((config.val_every > 0 && state.step % config.val_every as u64 == 0)
                || state.step as usize == config.steps)
        {
            Some(val_mse(&state.params, valset, &draws, &sch)?)
        } else {
            None
        };
        log.push(LogRecord {
            step: state.step,
            loss: mean_loss,
            lr: config.lr,
            wall_time_s: start.elapsed().as_secs_f64(),
            val_loss,
        });
    }

    let checkpoint = Checkpoint::from_state(&config, &state);
    Ok(TrainResult { checkpoint, log })
}
