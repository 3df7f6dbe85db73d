//! The in-context denoiser: token formation, bidirectional attention
//! coupling, the transformer forward pass, and exact analytic gradients.
//!
//! Two token streams run through every block: condition tokens C from the
//! clean human latents and denoise tokens D from the noised robot latents.
//! Each block couples the streams with cross-attention in both directions,
//! then applies a per-stream MLP; the output adapter reads epsilon-hat off
//! the D stream. Everything is f64 and the backward pass is checked against
//! central finite differences.

mod attention;
mod embed;
mod net;

pub use attention::{bidirectional_couple, softmax_rows, CoupleMode};
pub use embed::{
    make_tokens, make_tokens_at, make_tokens_with, time_pos_embedding, timestep_sinusoid,
    TokenBatch, TokenOpts,
};
pub use net::{dit_forward, grad, masked_mse};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stream widths differ: {a} vs {b}")]
    WidthMismatch { a: usize, b: usize },
    #[error("condition latents carry injected noise")]
    TaintedCondition,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("loss mask excludes every row")]
    AllMasked,
}

/// Architecture hyperparameters.
///
/// `embed_scale` multiplies the fixed positional and timestep embeddings; it
/// exists so tests can switch those contributions off (scale 0) and observe
/// the learned tables in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_lat: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_embed_scale")]
    pub embed_scale: f64,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_embed_scale() -> f64 {
    1.0
}

impl ModelConfig {
    /// Toy default that trains on a laptop CPU in minutes.
    pub fn toy(d_lat: usize) -> Self {
        Self { width: 128, layers: 4, heads: 4, d_lat, mlp_ratio: 4, embed_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.width == 0 || self.width % 8 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "width {} must be a positive multiple of 8",
                self.width
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "heads {} must divide width {}",
                self.heads, self.width
            )));
        }
        if self.layers == 0 {
            return Err(ModelError::InvalidConfig("layers must be >= 1".into()));
        }
        if self.d_lat == 0 {
            return Err(ModelError::InvalidConfig("d_lat must be >= 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(ModelError::InvalidConfig("mlp_ratio must be >= 1".into()));
        }
        if !self.embed_scale.is_finite() {
            return Err(ModelError::InvalidConfig("embed_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Per-block weights. The `_c` set belongs to the condition stream and the
/// `_d` set to the denoise stream; a stream's k/v projections are used when
/// the *other* stream reads from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_c_g: Array1<f64>,
    pub ln1_c_b: Array1<f64>,
    pub ln1_d_g: Array1<f64>,
    pub ln1_d_b: Array1<f64>,
    pub wq_c: Array2<f64>,
    pub wk_c: Array2<f64>,
    pub wv_c: Array2<f64>,
    pub wo_c: Array2<f64>,
    pub wq_d: Array2<f64>,
    pub wk_d: Array2<f64>,
    pub wv_d: Array2<f64>,
    pub wo_d: Array2<f64>,
    pub ln2_c_g: Array1<f64>,
    pub ln2_c_b: Array1<f64>,
    pub ln2_d_g: Array1<f64>,
    pub ln2_d_b: Array1<f64>,
    pub mlp_c_w1: Array2<f64>,
    pub mlp_c_b1: Array1<f64>,
    pub mlp_c_w2: Array2<f64>,
    pub mlp_c_b2: Array1<f64>,
    pub mlp_d_w1: Array2<f64>,
    pub mlp_d_b1: Array1<f64>,
    pub mlp_d_w2: Array2<f64>,
    pub mlp_d_b2: Array1<f64>,
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        let m = cfg.mlp_ratio * d;
        Self {
            ln1_c_g: Array1::zeros(d),
            ln1_c_b: Array1::zeros(d),
            ln1_d_g: Array1::zeros(d),
            ln1_d_b: Array1::zeros(d),
            wq_c: Array2::zeros((d, d)),
            wk_c: Array2::zeros((d, d)),
            wv_c: Array2::zeros((d, d)),
            wo_c: Array2::zeros((d, d)),
            wq_d: Array2::zeros((d, d)),
            wk_d: Array2::zeros((d, d)),
            wv_d: Array2::zeros((d, d)),
            wo_d: Array2::zeros((d, d)),
            ln2_c_g: Array1::zeros(d),
            ln2_c_b: Array1::zeros(d),
            ln2_d_g: Array1::zeros(d),
            ln2_d_b: Array1::zeros(d),
            mlp_c_w1: Array2::zeros((d, m)),
            mlp_c_b1: Array1::zeros(m),
            mlp_c_w2: Array2::zeros((m, d)),
            mlp_c_b2: Array1::zeros(d),
            mlp_d_w1: Array2::zeros((d, m)),
            mlp_d_b1: Array1::zeros(m),
            mlp_d_w2: Array2::zeros((m, d)),
            mlp_d_b2: Array1::zeros(d),
        }
    }
}

/// All learned tensors. Gradient and optimizer-moment buffers reuse this
/// container so every tensor-wise operation walks the same fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub adapter_in_w: Array2<f64>,
    pub adapter_in_b: Array1<f64>,
    pub adapter_out_w: Array2<f64>,
    pub adapter_out_b: Array1<f64>,
    pub mod_human: Array1<f64>,
    pub mod_robot: Array1<f64>,
    pub anchor_flag: Array1<f64>,
    pub null_cond: Array1<f64>,
    pub time_w: Array2<f64>,
    pub time_b: Array1<f64>,
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// Zero-filled parameter container (used for gradients and Adam moments).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.width;
        Self {
            config: *cfg,
            adapter_in_w: Array2::zeros((cfg.d_lat, d)),
            adapter_in_b: Array1::zeros(d),
            adapter_out_w: Array2::zeros((d, cfg.d_lat)),
            adapter_out_b: Array1::zeros(cfg.d_lat),
            mod_human: Array1::zeros(d),
            mod_robot: Array1::zeros(d),
            anchor_flag: Array1::zeros(d),
            null_cond: Array1::zeros(d),
            time_w: Array2::zeros((d, d)),
            time_b: Array1::zeros(d),
            layers: (0..cfg.layers).map(|_| LayerParams::zeros(cfg)).collect(),
        }
    }

    /// Flat views over every tensor, in the fixed serialization order.
    pub fn param_slices(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        macro_rules! push1 {
            ($name:expr, $arr:expr) => {
                out.push(($name.to_string(), vec![$arr.len()], $arr.as_slice().unwrap()))
            };
        }
        macro_rules! push2 {
            ($name:expr, $arr:expr) => {
                out.push((
                    $name.to_string(),
                    $arr.shape().to_vec(),
                    $arr.as_slice().unwrap(),
                ))
            };
        }
        push2!("adapter_in_w", self.adapter_in_w);
        push1!("adapter_in_b", self.adapter_in_b);
        push2!("adapter_out_w", self.adapter_out_w);
        push1!("adapter_out_b", self.adapter_out_b);
        push1!("mod_human", self.mod_human);
        push1!("mod_robot", self.mod_robot);
        push1!("anchor_flag", self.anchor_flag);
        push1!("null_cond", self.null_cond);
        push2!("time_w", self.time_w);
        push1!("time_b", self.time_b);
        for (i, l) in self.layers.iter().enumerate() {
            push1!(format!("layers.{i}.ln1_c_g"), l.ln1_c_g);
            push1!(format!("layers.{i}.ln1_c_b"), l.ln1_c_b);
            push1!(format!("layers.{i}.ln1_d_g"), l.ln1_d_g);
            push1!(format!("layers.{i}.ln1_d_b"), l.ln1_d_b);
            push2!(format!("layers.{i}.wq_c"), l.wq_c);
            push2!(format!("layers.{i}.wk_c"), l.wk_c);
            push2!(format!("layers.{i}.wv_c"), l.wv_c);
            push2!(format!("layers.{i}.wo_c"), l.wo_c);
            push2!(format!("layers.{i}.wq_d"), l.wq_d);
            push2!(format!("layers.{i}.wk_d"), l.wk_d);
            push2!(format!("layers.{i}.wv_d"), l.wv_d);
            push2!(format!("layers.{i}.wo_d"), l.wo_d);
            push1!(format!("layers.{i}.ln2_c_g"), l.ln2_c_g);
            push1!(format!("layers.{i}.ln2_c_b"), l.ln2_c_b);
            push1!(format!("layers.{i}.ln2_d_g"), l.ln2_d_g);
            push1!(format!("layers.{i}.ln2_d_b"), l.ln2_d_b);
            push2!(format!("layers.{i}.mlp_c_w1"), l.mlp_c_w1);
            push1!(format!("layers.{i}.mlp_c_b1"), l.mlp_c_b1);
            push2!(format!("layers.{i}.mlp_c_w2"), l.mlp_c_w2);
            push1!(format!("layers.{i}.mlp_c_b2"), l.mlp_c_b2);
            push2!(format!("layers.{i}.mlp_d_w1"), l.mlp_d_w1);
            push1!(format!("layers.{i}.mlp_d_b1"), l.mlp_d_b1);
            push2!(format!("layers.{i}.mlp_d_w2"), l.mlp_d_w2);
            push1!(format!("layers.{i}.mlp_d_b2"), l.mlp_d_b2);
        }
        out
    }

    /// Mutable counterpart of `param_slices`; identical order.
    pub fn param_slices_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        let mut out: Vec<(String, Vec<usize>, &mut [f64])> = Vec::new();
        macro_rules! push1 {
            ($name:expr, $arr:expr) => {{
                let shape = vec![$arr.len()];
                out.push(($name.to_string(), shape, $arr.as_slice_mut().unwrap()))
            }};
        }
        macro_rules! push2 {
            ($name:expr, $arr:expr) => {{
                let shape = $arr.shape().to_vec();
                out.push(($name.to_string(), shape, $arr.as_slice_mut().unwrap()))
            }};
        }
        push2!("adapter_in_w", self.adapter_in_w);
        push1!("adapter_in_b", self.adapter_in_b);
        push2!("adapter_out_w", self.adapter_out_w);
        push1!("adapter_out_b", self.adapter_out_b);
        push1!("mod_human", self.mod_human);
        push1!("mod_robot", self.mod_robot);
        push1!("anchor_flag", self.anchor_flag);
        push1!("null_cond", self.null_cond);
        push2!("time_w", self.time_w);
        push1!("time_b", self.time_b);
        for (i, l) in self.layers.iter_mut().enumerate() {
            push1!(format!("layers.{i}.ln1_c_g"), l.ln1_c_g);
            push1!(format!("layers.{i}.ln1_c_b"), l.ln1_c_b);
            push1!(format!("layers.{i}.ln1_d_g"), l.ln1_d_g);
            push1!(format!("layers.{i}.ln1_d_b"), l.ln1_d_b);
            push2!(format!("layers.{i}.wq_c"), l.wq_c);
            push2!(format!("layers.{i}.wk_c"), l.wk_c);
            push2!(format!("layers.{i}.wv_c"), l.wv_c);
            push2!(format!("layers.{i}.wo_c"), l.wo_c);
            push2!(format!("layers.{i}.wq_d"), l.wq_d);
            push2!(format!("layers.{i}.wk_d"), l.wk_d);
            push2!(format!("layers.{i}.wv_d"), l.wv_d);
            push2!(format!("layers.{i}.wo_d"), l.wo_d);
            push1!(format!("layers.{i}.ln2_c_g"), l.ln2_c_g);
            push1!(format!("layers.{i}.ln2_c_b"), l.ln2_c_b);
            push1!(format!("layers.{i}.ln2_d_g"), l.ln2_d_g);
            push1!(format!("layers.{i}.ln2_d_b"), l.ln2_d_b);
            push2!(format!("layers.{i}.mlp_c_w1"), l.mlp_c_w1);
            push1!(format!("layers.{i}.mlp_c_b1"), l.mlp_c_b1);
            push2!(format!("layers.{i}.mlp_c_w2"), l.mlp_c_w2);
            push1!(format!("layers.{i}.mlp_c_b2"), l.mlp_c_b2);
            push2!(format!("layers.{i}.mlp_d_w1"), l.mlp_d_w1);
            push1!(format!("layers.{i}.mlp_d_b1"), l.mlp_d_b1);
            push2!(format!("layers.{i}.mlp_d_w2"), l.mlp_d_w2);
            push1!(format!("layers.{i}.mlp_d_b2"), l.mlp_d_b2);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|(_, _, s)| s.iter().all(|v| v.is_finite()))
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let mut mine = self.param_slices_mut();
        let theirs = other.param_slices();
        for ((_, _, a), (_, _, b)) in mine.iter_mut().zip(theirs.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += scale * y;
            }
        }
    }
}

/// Deterministic initialization: projections scaled by 1/sqrt(fan_in),
/// normalization gains at 1, and a zero output adapter so a fresh model
/// predicts epsilon-hat = 0.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut r = rng::derive(seed, &[0x1417]);
    let mut p = ModelParams::zeros(config);
    {
        let mut fill = |arr: &mut Array2<f64>| {
            let fan_in = arr.nrows() as f64;
            let scale = 1.0 / fan_in.sqrt();
            for v in arr.iter_mut() {
                let z: f64 = r.sample(StandardNormal);
                *v = z * scale;
            }
        };
        fill(&mut p.adapter_in_w);
        fill(&mut p.time_w);
        for l in &mut p.layers {
            fill(&mut l.wq_c);
            fill(&mut l.wk_c);
            fill(&mut l.wv_c);
            fill(&mut l.wo_c);
            fill(&mut l.wq_d);
            fill(&mut l.wk_d);
            fill(&mut l.wv_d);
            fill(&mut l.wo_d);
            fill(&mut l.mlp_c_w1);
            fill(&mut l.mlp_c_w2);
            fill(&mut l.mlp_d_w1);
            fill(&mut l.mlp_d_w2);
        }
    }
    let vec_scale = 1.0 / (config.width as f64).sqrt();
    for arr in [&mut p.mod_human, &mut p.mod_robot, &mut p.anchor_flag, &mut p.null_cond] {
        for v in arr.iter_mut() {
            let z: f64 = r.sample(StandardNormal);
            *v = z * vec_scale;
        }
    }
    for l in &mut p.layers {
        l.ln1_c_g.fill(1.0);
        l.ln1_d_g.fill(1.0);
        l.ln2_c_g.fill(1.0);
        l.ln2_d_g.fill(1.0);
    }
    // adapter_out stays zero; biases stay zero.
    debug_assert!(p.mod_human != p.mod_robot);
    Ok(p)
}
