//! Noise schedules and the forward/reverse diffusion algebra.
//!
//! Forward: x_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with abar_t the
//! cumulative product of per-step alphas. Reverse: the epsilon-parameterized
//! posterior-mean update with a configurable sigma policy. Steps are 1-based
//! to match the usual t in {1..T} convention.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::video::LatentSeq;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid beta range [{start}, {end}]: need 0 < start <= end < 1")]
    InvalidRange { start: f64, end: f64 },
    #[error("step count must be >= 1")]
    NoSteps,
    #[error("step {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("latent shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("strided schedule wants {want} steps but source has {have}")]
    TooManyStridedSteps { want: usize, have: usize },
}

/// Policy for the reverse-step noise scale sigma_t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Posterior variance beta_t * (1 - abar_{t-1}) / (1 - abar_t).
    #[default]
    Posterior,
    /// sigma_t^2 = beta_t.
    Beta,
    /// Deterministic reverse process.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Serializable recipe for a schedule; stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
            sigma_mode: SigmaMode::Posterior,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        let mut sch = build_schedule(self.steps, self.beta_start, self.beta_end, self.kind)?;
        sch.sigma_mode = self.sigma_mode;
        Ok(sch)
    }
}

/// Precomputed beta/alpha/alpha-bar tables for t in 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    pub sigma_mode: SigmaMode,
}

impl NoiseSchedule {
    fn from_betas(betas: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self, ScheduleError> {
        if betas.is_empty() {
            return Err(ScheduleError::NoSteps);
        }
        for &b in &betas {
            if !(0.0 < b && b < 1.0) {
                return Err(ScheduleError::InvalidRange { start: b, end: b });
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alphas, alpha_bars, sigma_mode })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.steps() {
            return Err(ScheduleError::StepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    /// beta_t, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// abar_{t-1} with the abar_0 = 1 convention.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// sigma_t^2 under the schedule's sigma policy; sigma_1 is always 0.
    pub fn sigma_sq(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        match self.sigma_mode {
            SigmaMode::Posterior => {
                self.beta(t) * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t))
            }
            SigmaMode::Beta => self.beta(t),
            SigmaMode::Zero => 0.0,
        }
    }

    /// Subset the schedule to `num_steps` strided entries with recomputed
    /// betas so the new cumulative products land exactly on the selected
    /// original abar values. Returns the schedule and the original 1-based
    /// step each strided entry corresponds to.
    pub fn restride(&self, num_steps: usize) -> Result<(NoiseSchedule, Vec<usize>), ScheduleError> {
        if num_steps == 0 {
            return Err(ScheduleError::NoSteps);
        }
        if num_steps > self.steps() {
            return Err(ScheduleError::TooManyStridedSteps { want: num_steps, have: self.steps() });
        }
        // Evenly spaced selection that always includes the final step.
        let mut picked: Vec<usize> = (0..num_steps)
            .map(|i| ((i + 1) * self.steps()) / num_steps)
            .collect();
        picked.dedup();
        let mut betas = Vec::with_capacity(picked.len());
        let mut prev_bar = 1.0;
        for &s in &picked {
            let bar = self.alpha_bar(s);
            betas.push(1.0 - bar / prev_bar);
            prev_bar = bar;
        }
        let mut sch = NoiseSchedule::from_betas(betas, self.sigma_mode)?;
        // Avoid drift in long products: pin the bars to the source values.
        for (i, &s) in picked.iter().enumerate() {
            sch.alpha_bars[i] = self.alpha_bar(s);
        }
        Ok((sch, picked))
    }
}

/// Build a schedule for t in 1..=steps. Only the linear ramp is supported.
pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule, ScheduleError> {
    if steps == 0 {
        return Err(ScheduleError::NoSteps);
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ScheduleError::InvalidRange { start: beta_start, end: beta_end });
    }
    let betas = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect::<Vec<_>>(),
    };
    NoiseSchedule::from_betas(betas, SigmaMode::Posterior)
}

fn check_shapes(a: &LatentSeq, b: &LatentSeq) -> Result<(), ScheduleError> {
    if a.tokens.dim() != b.tokens.dim() {
        return Err(ScheduleError::ShapeMismatch { a: a.tokens.dim(), b: b.tokens.dim() });
    }
    Ok(())
}

/// Draw a standard-normal latent with the same layout as `like`.
pub fn sample_noise_like(like: &LatentSeq, rng: &mut ChaCha8Rng) -> LatentSeq {
    let tokens = Array2::from_shape_fn(like.tokens.dim(), |_| rng.sample(StandardNormal));
    LatentSeq { tokens, layout: like.layout, noised: true }
}

/// x_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. Marks the result as noised.
pub fn forward_noise(
    z0: &LatentSeq,
    t: usize,
    eps: &LatentSeq,
    sch: &NoiseSchedule,
) -> Result<LatentSeq, ScheduleError> {
    sch.check_step(t)?;
    check_shapes(z0, eps)?;
    let bar = sch.alpha_bar(t);
    let tokens = bar.sqrt() * &z0.tokens + (1.0 - bar).sqrt() * &eps.tokens;
    Ok(LatentSeq { tokens, layout: z0.layout, noised: true })
}

/// zhat0 = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
pub fn predict_z0(
    x_t: &LatentSeq,
    eps_hat: &LatentSeq,
    t: usize,
    sch: &NoiseSchedule,
) -> Result<LatentSeq, ScheduleError> {
    sch.check_step(t)?;
    check_shapes(x_t, eps_hat)?;
    let bar = sch.alpha_bar(t);
    let tokens = (&x_t.tokens - (1.0 - bar).sqrt() * &eps_hat.tokens) / bar.sqrt();
    Ok(LatentSeq { tokens, layout: x_t.layout, noised: false })
}

/// Deterministic part of the reverse update.
pub(crate) fn reverse_mean(x: f64, eps_hat: f64, alpha_t: f64, alpha_bar_t: f64) -> f64 {
    (x - (1.0 - alpha_t) / (1.0 - alpha_bar_t).sqrt() * eps_hat) / alpha_t.sqrt()
}

/// One reverse step x_t -> x_{t-1}; adds sigma_t * z noise except at t = 1.
pub fn reverse_step(
    x_t: &LatentSeq,
    eps_hat: &LatentSeq,
    t: usize,
    sch: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LatentSeq, ScheduleError> {
    sch.check_step(t)?;
    check_shapes(x_t, eps_hat)?;
    let (alpha_t, bar_t) = (sch.alpha(t), sch.alpha_bar(t));
    let mut tokens = Array2::from_shape_fn(x_t.tokens.dim(), |idx| {
        reverse_mean(x_t.tokens[idx], eps_hat.tokens[idx], alpha_t, bar_t)
    });
    let sigma = sch.sigma_sq(t).sqrt();
    if sigma > 0.0 {
        for v in tokens.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(LatentSeq { tokens, layout: x_t.layout, noised: t > 1 })
}
