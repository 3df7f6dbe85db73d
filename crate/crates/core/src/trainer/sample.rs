//! Reverse-chain sampling: from Gaussian robot latents to a decoded clip,
//! conditioned on the human video (and on a clean first robot frame in HI2R).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, TrainError};
use crate::model::{self, TokenOpts};
use crate::rng;
use crate::schedule::{reverse_step, SigmaMode};
use crate::video::{decode_latents_clamped, encode_clip, LatentSeq, VideoClip};
use rand::Rng;
use rand_distr::StandardNormal;

/// Generation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    /// Zero-frame generation from the human demonstration alone.
    H2r,
    /// First-frame-conditioned generation: frame-0 robot tokens are supplied
    /// clean and never touched by the chain.
    Hi2r,
}

impl GenMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h2r" => Some(Self::H2r),
            "hi2r" => Some(Self::Hi2r),
            _ => None,
        }
    }
}

impl std::fmt::Display for GenMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::H2r => "h2r",
            Self::Hi2r => "hi2r",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOpts {
    pub num_steps: usize,
    pub sigma_mode: SigmaMode,
    pub seed: u64,
    /// Sample with the learned null condition instead of the human latents
    /// (the reference-free ablation arm).
    pub null_condition: bool,
}

impl Default for SampleOpts {
    fn default() -> Self {
        Self { num_steps: 50, sigma_mode: SigmaMode::Posterior, seed: 0, null_condition: false }
    }
}

struct ChainSetup {
    z_h: LatentSeq,
    anchor_mask: Vec<bool>,
    anchor_rows: Option<Array2<f64>>,
    fps: f32,
}

fn prepare(
    patch: usize,
    human: &VideoClip,
    mode: GenMode,
    first_frame: Option<&VideoClip>,
) -> Result<ChainSetup, TrainError> {
    let z_h = encode_clip(human, patch)?;
    let (anchor_mask, anchor_rows) = match mode {
        GenMode::H2r => (vec![false; z_h.n_tokens()], None),
        GenMode::Hi2r => {
            let frame = first_frame.ok_or(TrainError::MissingFirstFrame)?;
            let (_, fh, fw, fc) = frame.shape();
            let (_, hh, hw, hc) = human.shape();
            if (fh, fw, fc) != (hh, hw, hc) {
                return Err(TrainError::GeometryMismatch(format!(
                    "first frame {fh}x{fw}x{fc} vs human {hh}x{hw}x{hc}"
                )));
            }
            let z_f = encode_clip(&frame.frame_clip(0), patch)?;
            let mask = super::batch::frame0_mask(&z_h);
            (mask, Some(z_f.tokens))
        }
    };
    Ok(ChainSetup { fps: human.fps(), z_h, anchor_mask, anchor_rows })
}

fn pin_anchors(x: &mut LatentSeq, mask: &[bool], rows: &Option<Array2<f64>>) {
    if let Some(rows) = rows {
        let mut k = 0;
        for (i, &anchored) in mask.iter().enumerate() {
            if anchored {
                for j in 0..x.tokens.ncols() {
                    x.tokens[[i, j]] = rows[[k, j]];
                }
                k += 1;
            }
        }
    }
}

fn run_chain(
    setup: &ChainSetup,
    schedule: &crate::schedule::NoiseSchedule,
    opts: &SampleOpts,
    mut eps_fn: impl FnMut(&LatentSeq, usize) -> Result<Array2<f64>, TrainError>,
) -> Result<VideoClip, TrainError> {
    let mut rng = rng::derive(opts.seed, &[0x5a3b]);
    let (sub, orig_steps) = schedule.restride(opts.num_steps)?;
    let mut x = LatentSeq {
        tokens: Array2::from_shape_fn(setup.z_h.tokens.dim(), |_| rng.sample(StandardNormal)),
        layout: setup.z_h.layout,
        noised: true,
    };
    pin_anchors(&mut x, &setup.anchor_mask, &setup.anchor_rows);
    for i in (1..=sub.steps()).rev() {
        let eps_hat_tokens = eps_fn(&x, orig_steps[i - 1])?;
        let eps_hat = LatentSeq { tokens: eps_hat_tokens, layout: x.layout, noised: true };
        x = reverse_step(&x, &eps_hat, i, &sub, &mut rng)?;
        pin_anchors(&mut x, &setup.anchor_mask, &setup.anchor_rows);
    }
    let mut clip = decode_latents_clamped(&x)?;
    clip = rescale_fps(clip, setup.fps);
    Ok(clip)
}

fn rescale_fps(clip: VideoClip, fps: f32) -> VideoClip {
    // decode_* constructs clips at a fixed fps; carry the source fps through.
    VideoClip::new(clip.frames().clone(), fps).expect("decoded clip is valid")
}

/// Generate a robot clip from a trained checkpoint.
pub fn sample(
    ckpt: &Checkpoint,
    human: &VideoClip,
    mode: GenMode,
    first_frame: Option<&VideoClip>,
    opts: &SampleOpts,
) -> Result<VideoClip, TrainError> {
    let setup = prepare(ckpt.config.patch, human, mode, first_frame)?;
    if setup.z_h.token_dim() != ckpt.config.model.d_lat {
        return Err(TrainError::GeometryMismatch(format!(
            "clip token dim {} vs model d_lat {}",
            setup.z_h.token_dim(),
            ckpt.config.model.d_lat
        )));
    }
    let mut schedule = ckpt.config.schedule.build()?;
    schedule.sigma_mode = opts.sigma_mode;
    let params = &ckpt.params;
    run_chain(&setup, &schedule, opts, |x, t| {
        let batch = model::make_tokens_with(
            &setup.z_h,
            x,
            t,
            &setup.anchor_mask,
            params,
            TokenOpts { null_condition: opts.null_condition },
        )?;
        Ok(model::dit_forward(&batch, params)?)
    })
}

/// Run the sampling chain with a teacher oracle that knows the ground-truth
/// robot latents: eps* = (x_t - sqrt(abar_t) z0) / sqrt(1 - abar_t). A
/// diagnostic for the chain itself; with sigma = 0 it reconstructs the truth
/// almost exactly.
pub fn sample_with_teacher(
    truth_robot: &VideoClip,
    patch: usize,
    schedule: &crate::schedule::NoiseSchedule,
    human_fps_source: &VideoClip,
    mode: GenMode,
    first_frame: Option<&VideoClip>,
    opts: &SampleOpts,
) -> Result<VideoClip, TrainError> {
    let setup = prepare(patch, human_fps_source, mode, first_frame)?;
    let z0 = encode_clip(truth_robot, patch)?;
    if z0.tokens.dim() != setup.z_h.tokens.dim() {
        return Err(TrainError::GeometryMismatch("truth/human latent shapes differ".into()));
    }
    // map each original step to its alpha-bar for the oracle
    let sch = schedule.clone();
    run_chain(&setup, &sch, opts, |x, t| {
        let bar = sch.alpha_bar(t);
        Ok((&x.tokens - &(bar.sqrt() * &z0.tokens)) / (1.0 - bar).sqrt())
    })
}
