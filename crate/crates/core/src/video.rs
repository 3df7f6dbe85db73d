//! Video clips, the lossless patch codec, and the clip container format.
//!
//! Clips are dense T×H×W×C tensors with values in [0, 1]. The codec is a
//! space-to-depth permutation: each p×p×C patch of a frame becomes one token,
//! so encode→decode round-trips bit-exactly. Containers are a fixed
//! little-endian binary format so golden files compare byte-for-byte across
//! platforms.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4};
use thiserror::Error;

/// Container magic bytes.
pub const CONTAINER_MAGIC: [u8; 4] = *b"MTYV";
/// Current container version.
pub const CONTAINER_VERSION: u16 = 1;
/// Dtype code for f32 payloads (the only dtype currently written).
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("clip must have at least one frame")]
    EmptyClip,
    #[error("frame values must be finite and within [0,1]; found {value} at {index:?}")]
    ValueOutOfRange { value: f32, index: [usize; 4] },
    #[error("fps must be positive and finite, got {0}")]
    BadFps(f32),
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("patch size must be positive")]
    ZeroPatch,
    #[error("frame size {h}x{w} not divisible by patch {patch}")]
    DimensionMismatch { h: usize, w: usize, patch: usize },
    #[error("token matrix {rows}x{cols} inconsistent with layout (want {want_rows}x{want_cols})")]
    LayoutMismatch { rows: usize, cols: usize, want_rows: usize, want_cols: usize },
    #[error("latent value {0} outside [0,1]; decode generated latents with clamping")]
    UnclampedValue(f64),
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("container version {found} not supported (expect {expect})")]
    VersionMismatch { found: u16, expect: u16 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error(transparent)]
    Video(#[from] VideoError),
}

/// A video clip: frames indexed [t, y, x, channel], values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Array4<f32>,
    fps: f32,
    pub meta: BTreeMap<String, String>,
}

impl VideoClip {
    pub fn new(frames: Array4<f32>, fps: f32) -> Result<Self, VideoError> {
        if frames.shape()[0] == 0 {
            return Err(VideoError::EmptyClip);
        }
        if !fps.is_finite() || fps <= 0.0 {
            return Err(VideoError::BadFps(fps));
        }
        for (idx, &v) in frames.indexed_iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(VideoError::ValueOutOfRange {
                    value: v,
                    index: [idx.0, idx.1, idx.2, idx.3],
                });
            }
        }
        Ok(Self { frames, fps, meta: BTreeMap::new() })
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    /// (T, H, W, C)
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Copy of a single frame as a 1-frame clip (used for HI2R anchors).
    pub fn frame_clip(&self, t: usize) -> VideoClip {
        let (_, h, w, c) = self.shape();
        let mut out = Array4::zeros((1, h, w, c));
        out.index_axis_mut(ndarray::Axis(0), 0)
            .assign(&self.frames.index_axis(ndarray::Axis(0), t));
        VideoClip { frames: out, fps: self.fps, meta: BTreeMap::new() }
    }
}

/// Per-token grid position within a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPos {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// Shape descriptor for a token sequence: frame-major, then patch row, then
/// patch column. Channel packing inside a token is (py, px, channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub channels: usize,
}

impl TokenLayout {
    pub fn n_tokens(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pos(&self, token: usize) -> TokenPos {
        let per_frame = self.rows * self.cols;
        TokenPos {
            frame: token / per_frame,
            row: (token % per_frame) / self.cols,
            col: token % self.cols,
        }
    }

    pub fn positions(&self) -> Vec<TokenPos> {
        (0..self.n_tokens()).map(|i| self.pos(i)).collect()
    }
}

/// Token sequence produced by the codec. `noised` marks latents that carry
/// injected diffusion noise; the model refuses such latents on the condition
/// path.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    pub tokens: Array2<f64>,
    pub layout: TokenLayout,
    pub noised: bool,
}

impl LatentSeq {
    pub fn new(tokens: Array2<f64>, layout: TokenLayout) -> Result<Self, CodecError> {
        if tokens.nrows() != layout.n_tokens() || tokens.ncols() != layout.token_dim() {
            return Err(CodecError::LayoutMismatch {
                rows: tokens.nrows(),
                cols: tokens.ncols(),
                want_rows: layout.n_tokens(),
                want_cols: layout.token_dim(),
            });
        }
        Ok(Self { tokens, layout, noised: false })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Flatten a clip into patch tokens. Lossless; `decode_latents` inverts it.
pub fn encode_clip(clip: &VideoClip, patch: usize) -> Result<LatentSeq, CodecError> {
    if patch == 0 {
        return Err(CodecError::ZeroPatch);
    }
    let (t, h, w, c) = clip.shape();
    if h % patch != 0 || w % patch != 0 {
        return Err(CodecError::DimensionMismatch { h, w, patch });
    }
    let layout = TokenLayout { frames: t, rows: h / patch, cols: w / patch, patch, channels: c };
    let mut tokens = Array2::<f64>::zeros((layout.n_tokens(), layout.token_dim()));
    let frames = clip.frames();
    let mut tok = 0;
    for f in 0..t {
        for r in 0..layout.rows {
            for col in 0..layout.cols {
                let mut k = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c {
                            tokens[[tok, k]] =
                                f64::from(frames[[f, r * patch + py, col * patch + px, ch]]);
                            k += 1;
                        }
                    }
                }
                tok += 1;
            }
        }
    }
    LatentSeq::new(tokens, layout)
}

fn decode_inner(lat: &LatentSeq, clamp: bool) -> Result<VideoClip, CodecError> {
    let lay = lat.layout;
    if lat.tokens.nrows() != lay.n_tokens() || lat.tokens.ncols() != lay.token_dim() {
        return Err(CodecError::LayoutMismatch {
            rows: lat.tokens.nrows(),
            cols: lat.tokens.ncols(),
            want_rows: lay.n_tokens(),
            want_cols: lay.token_dim(),
        });
    }
    let (t, h, w, c) =
        (lay.frames, lay.rows * lay.patch, lay.cols * lay.patch, lay.channels);
    let mut frames = Array4::<f32>::zeros((t, h, w, c));
    let mut tok = 0;
    for f in 0..t {
        for r in 0..lay.rows {
            for col in 0..lay.cols {
                let mut k = 0;
                for py in 0..lay.patch {
                    for px in 0..lay.patch {
                        for ch in 0..c {
                            let mut v = lat.tokens[[tok, k]];
                            if clamp {
                                v = v.clamp(0.0, 1.0);
                            } else if !(0.0..=1.0).contains(&v) {
                                return Err(CodecError::UnclampedValue(v));
                            }
                            frames[[f, r * lay.patch + py, col * lay.patch + px, ch]] = v as f32;
                            k += 1;
                        }
                    }
                }
                tok += 1;
            }
        }
    }
    // Range already enforced above, so construction cannot fail.
    Ok(VideoClip::new(frames, 8.0).expect("decoded clip is valid"))
}

/// Exact inverse of `encode_clip`. Rejects values outside [0,1]; generated
/// latents go through `decode_latents_clamped` instead.
pub fn decode_latents(lat: &LatentSeq) -> Result<VideoClip, CodecError> {
    decode_inner(lat, false)
}

/// Decode generated latents, clamping values into [0,1] first.
pub fn decode_latents_clamped(lat: &LatentSeq) -> Result<VideoClip, CodecError> {
    decode_inner(lat, true)
}

/// Write a clip in the fixed binary container format.
pub fn write_container(clip: &VideoClip, path: &Path) -> Result<(), ContainerError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    let (t, h, w, c) = clip.shape();
    for dim in [t, h, w, c] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend_from_slice(&clip.fps().to_le_bytes());
    for &v in clip.frames().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a clip container, validating magic, version, dtype, and payload size.
pub fn read_container(path: &Path) -> Result<VideoClip, ContainerError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    const HEADER: usize = 4 + 2 + 1 + 16 + 4;
    if bytes.len() < HEADER {
        return Err(ContainerError::CorruptHeader("file shorter than header".into()));
    }
    if bytes[0..4] != CONTAINER_MAGIC {
        return Err(ContainerError::CorruptHeader(format!(
            "bad magic {:02x?}",
            &bytes[0..4]
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CONTAINER_VERSION {
        return Err(ContainerError::VersionMismatch { found: version, expect: CONTAINER_VERSION });
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F32 {
        return Err(ContainerError::CorruptHeader(format!("unknown dtype code {dtype}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 7 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    }
    let fps = f32::from_le_bytes(bytes[23..27].try_into().unwrap());
    let (t, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
    let count = t * h * w * c;
    let expected = count * 4;
    let found = bytes.len() - HEADER;
    if found != expected {
        return Err(ContainerError::TruncatedPayload { expected, found });
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = HEADER + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    let frames = Array4::from_shape_vec((t, h, w, c), data)
        .map_err(|e| ContainerError::CorruptHeader(e.to_string()))?;
    Ok(VideoClip::new(frames, fps)?)
}

/// Dump frames as numbered PNGs for viewing. Not a data path: the container
/// format is the only round-trip representation.
pub fn write_frame_dir(clip: &VideoClip, dir: &Path) -> Result<(), ContainerError> {
    std::fs::create_dir_all(dir)?;
    let (t, h, w, c) = clip.shape();
    for f in 0..t {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    let v = clip.frames()[[f, y, x, ch.min(c - 1)]];
                    (v * 255.0).round().clamp(0.0, 255.0) as u8
                };
                img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        img.save(dir.join(format!("frame_{f:04}.png")))
            .map_err(|e| ContainerError::CorruptHeader(e.to_string()))?;
    }
    Ok(())
}
