//! The trainable video bridge.
//!
//! Raw encoder tokens are mean-pooled per effective frame (or per grid cell),
//! passed through a per-block residual GELU adapter, and read by a video
//! cross-attention sublayer placed after the text cross-attention of every
//! block. Audio queries and video keys are rotated by their own positions.
//! `W_o` starts at zero, so a fresh bridge leaves the frozen model unchanged.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::attention::apply_rope;
use crate::attention::{AttentionWeights, Rope};
use crate::backbone::{BackboneConfig, BackboneParams, LatentSequence, TextTokens};
use crate::error::{shape_err, Error, Result};
use crate::model;
use crate::nn::{LayerNorm, Linear, Mlp, ParamSet, TensorRef};
use crate::tensor::{Matrix, Real};

/// Patch-level encoder output, `[n_frames × n_patches × d_video]` row-major,
/// one frame per effective (strided) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVideoTokens<T> {
    pub tokens: Vec<T>,
    pub n_frames: usize,
    pub n_patches: usize,
    pub d_video: usize,
    /// Source frame rate.
    pub fps: f64,
    /// Encoder temporal stride: input frames per effective frame.
    pub stride: usize,
}

impl<T: Real> RawVideoTokens<T> {
    pub fn new(
        tokens: Vec<T>,
        n_frames: usize,
        n_patches: usize,
        d_video: usize,
        fps: f64,
        stride: usize,
    ) -> Result<Self> {
        if tokens.len() != n_frames * n_patches * d_video {
            return Err(shape_err!(
                "{} values for [{n_frames}x{n_patches}x{d_video}]",
                tokens.len()
            ));
        }
        if !(fps > 0.0) || stride == 0 {
            return Err(Error::Config("fps and stride must be positive".into()));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("video tokens contain non-finite values".into()));
        }
        Ok(Self {
            tokens,
            n_frames,
            n_patches,
            d_video,
            fps,
            stride,
        })
    }

    pub fn patch(&self, frame: usize, patch: usize) -> &[T] {
        let start = (frame * self.n_patches + patch) * self.d_video;
        &self.tokens[start..start + self.d_video]
    }

    /// Effective frames per second.
    pub fn effective_fps(&self) -> f64 {
        self.fps / self.stride as f64
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames as f64 / self.effective_fps()
    }

    /// Mean over all patches of one effective frame.
    pub fn frame_mean(&self, frame: usize) -> Vec<T> {
        let mut acc = vec![T::zero(); self.d_video];
        for p in 0..self.n_patches {
            for (a, &v) in acc.iter_mut().zip(self.patch(frame, p)) {
                *a = *a + v;
            }
        }
        let n = T::c(self.n_patches as f64);
        acc.into_iter().map(|v| v / n).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Frame,
    Grid8,
    Grid16,
}

impl PoolingMode {
    /// Grid side per frame; 1 for whole-frame pooling.
    pub fn grid(self) -> usize {
        match self {
            PoolingMode::Frame => 1,
            PoolingMode::Grid8 => 8,
            PoolingMode::Grid16 => 16,
        }
    }

    pub fn tokens_per_frame(self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingSpec {
    pub mode: PoolingMode,
    pub max_duration_s: f64,
    pub segment_s: f64,
}

impl Default for PoolingSpec {
    fn default() -> Self {
        Self {
            mode: PoolingMode::Frame,
            max_duration_s: 12.0,
            segment_s: 4.0,
        }
    }
}

impl PoolingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.segment_s > 0.0) || !(self.max_duration_s > 0.0) {
            return Err(Error::Config("pooling durations must be positive".into()));
        }
        let k = self.max_duration_s / self.segment_s;
        if (k - k.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "max_duration_s {} is not a multiple of segment_s {}",
                self.max_duration_s, self.segment_s
            )));
        }
        Ok(())
    }

    /// Upper bound on pooled tokens for a source at `effective_fps`.
    pub fn token_budget(&self, effective_fps: f64) -> usize {
        self.max_frames(effective_fps) * self.mode.tokens_per_frame()
    }

    fn max_frames(&self, effective_fps: f64) -> usize {
        (self.max_duration_s * effective_fps + 1e-9).floor() as usize
    }
}

/// Pooled video conditioning sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTokens<T> {
    pub tokens: Matrix<T>,
    /// Effective-frame index per token; grid cells of one frame share it.
    pub positions: Vec<i64>,
    pub present: bool,
}

impl<T: Real> VideoTokens<T> {
    pub fn new(tokens: Matrix<T>, positions: Vec<i64>) -> Result<Self> {
        if positions.len() != tokens.rows() {
            return Err(shape_err!(
                "{} positions for {} video tokens",
                positions.len(),
                tokens.rows()
            ));
        }
        if positions.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Domain("video positions must be non-decreasing".into()));
        }
        if !tokens.is_finite() {
            return Err(Error::Numeric("video tokens contain non-finite values".into()));
        }
        Ok(Self {
            tokens,
            positions,
            present: true,
        })
    }

    pub fn absent(d_video: usize) -> Self {
        Self {
            tokens: Matrix::zeros(0, d_video),
            positions: Vec::new(),
            present: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn cast<U: Real>(&self) -> VideoTokens<U> {
        VideoTokens {
            tokens: self.tokens.cast(),
            positions: self.positions.clone(),
            present: self.present,
        }
    }
}

/// Mean-pool each effective frame (or each grid cell), truncating to the
/// first `max_duration_s` seconds.
pub fn pool_video<T: Real>(raw: &RawVideoTokens<T>, spec: &PoolingSpec) -> Result<VideoTokens<T>> {
    spec.validate()?;
    let grid = spec.mode.grid();
    let side = (raw.n_patches as f64).sqrt().round() as usize;
    if grid > 1 && (side * side != raw.n_patches || !side.is_multiple_of(grid)) {
        return Err(Error::Pooling(format!(
            "{} patches cannot be partitioned into a {grid}x{grid} grid",
            raw.n_patches
        )));
    }
    let n_frames = raw.n_frames.min(spec.max_frames(raw.effective_fps()));
    let per_frame = spec.mode.tokens_per_frame();
    let mut tokens = Matrix::zeros(n_frames * per_frame, raw.d_video);
    let mut positions = Vec::with_capacity(n_frames * per_frame);
    for f in 0..n_frames {
        if grid == 1 {
            tokens.row_mut(f).copy_from_slice(&raw.frame_mean(f));
            positions.push(f as i64);
            continue;
        }
        let cell = side / grid;
        let norm = T::c(1.0 / (cell * cell) as f64);
        for gy in 0..grid {
            for gx in 0..grid {
                let row = f * per_frame + gy * grid + gx;
                let out = tokens.row_mut(row);
                for py in gy * cell..(gy + 1) * cell {
                    for px in gx * cell..(gx + 1) * cell {
                        for (o, &v) in out.iter_mut().zip(raw.patch(f, py * side + px)) {
                            *o = *o + v;
                        }
                    }
                }
                out.iter_mut().for_each(|o| *o = *o * norm);
                positions.push(f as i64);
            }
        }
    }
    VideoTokens::new(tokens, positions)
}

/// Trainable sublayer parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeBlock<T> {
    /// Residual adapter on the video path (`mlp_w1`, `mlp_w2`).
    pub adapter: Mlp<T>,
    /// Pre-norm on the audio path.
    pub norm: LayerNorm<T>,
    /// `W_q` (`q`), `W_kv` (`kv`), `W_o` (`o`).
    pub attn: AttentionWeights<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeParams<T> {
    pub d_model: usize,
    pub d_video: usize,
    pub blocks: Vec<BridgeBlock<T>>,
}

/// Fresh bridge: random adapter and `W_q`/`W_kv`, zero `W_o`.
pub fn init_bridge<T: Real>(
    config: &BackboneConfig,
    d_video: usize,
    seed: u64,
) -> Result<BridgeParams<T>> {
    config.validate()?;
    if d_video == 0 {
        return Err(Error::Config("d_video must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let blocks = (0..config.n_blocks)
        .map(|_| BridgeBlock {
            adapter: Mlp {
                fc1: Linear::random(&mut rng, d_video, d_video, 1.0),
                fc2: Linear::random(&mut rng, d_video, d_video, 0.5),
            },
            norm: LayerNorm::new(d),
            attn: AttentionWeights {
                q: Linear::random(&mut rng, d, d, 1.0),
                kv: Linear::random(&mut rng, d_video, 2 * d, 1.0),
                o: Linear::zeros(d, d),
                n_heads: config.n_heads,
            },
        })
        .collect();
    Ok(BridgeParams {
        d_model: d,
        d_video,
        blocks,
    })
}

/// Trainable module identifiers of one block, in tensor order.
pub const BRIDGE_MODULES: [&str; 6] = ["mlp_w1", "mlp_w2", "norm", "w_q", "w_kv", "w_o"];

impl<T: Real> BridgeParams<T> {
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for s in out.slices_mut() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }

    pub fn cast<U: Real>(&self) -> BridgeParams<U> {
        let cast_lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.iter().map(|v| U::c(v.f64())).collect(),
        };
        BridgeParams {
            d_model: self.d_model,
            d_video: self.d_video,
            blocks: self
                .blocks
                .iter()
                .map(|b| BridgeBlock {
                    adapter: Mlp {
                        fc1: cast_lin(&b.adapter.fc1),
                        fc2: cast_lin(&b.adapter.fc2),
                    },
                    norm: LayerNorm {
                        gamma: b.norm.gamma.iter().map(|v| U::c(v.f64())).collect(),
                        beta: b.norm.beta.iter().map(|v| U::c(v.f64())).collect(),
                    },
                    attn: AttentionWeights {
                        q: cast_lin(&b.attn.q),
                        kv: cast_lin(&b.attn.kv),
                        o: cast_lin(&b.attn.o),
                        n_heads: b.attn.n_heads,
                    },
                })
                .collect(),
        }
    }
}

impl<T: Real> ParamSet<T> for BridgeParams<T> {
    fn named(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("bridge.{i}");
            b.adapter.fc1.push_named(&format!("{p}.mlp_w1"), &mut out);
            b.adapter.fc2.push_named(&format!("{p}.mlp_w2"), &mut out);
            b.norm.push_named(&format!("{p}.norm"), &mut out);
            b.attn.q.push_named(&format!("{p}.w_q"), &mut out);
            b.attn.kv.push_named(&format!("{p}.w_kv"), &mut out);
            b.attn.o.push_named(&format!("{p}.w_o"), &mut out);
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            b.adapter.fc1.push_mut(&mut out);
            b.adapter.fc2.push_mut(&mut out);
            b.norm.push_mut(&mut out);
            b.attn.q.push_mut(&mut out);
            b.attn.kv.push_mut(&mut out);
            b.attn.o.push_mut(&mut out);
        }
        out
    }
}

/// `v + MLP(v)` with one block's adapter; positions unchanged.
pub fn adapter_mlp<T: Real>(v: &VideoTokens<T>, block: &BridgeBlock<T>) -> Result<VideoTokens<T>> {
    if v.tokens.cols() != block.adapter.fc1.d_in() {
        return Err(shape_err!(
            "video width {} vs adapter width {}",
            v.tokens.cols(),
            block.adapter.fc1.d_in()
        ));
    }
    let (delta, _) = block.adapter.forward(&v.tokens)?;
    Ok(VideoTokens {
        tokens: v.tokens.add(&delta)?,
        positions: v.positions.clone(),
        present: v.present,
    })
}

/// One Vid-CA sublayer on already-adapted video tokens:
/// `x + W_o·Attn(RoPE(W_q·norm(x)), RoPE(K(v)), V(v))`, or `x` when the
/// video is absent.
pub fn video_cross_attention<T: Real>(
    x: &LatentSequence<T>,
    v: &VideoTokens<T>,
    block: &BridgeBlock<T>,
    rope_base: f64,
) -> Result<LatentSequence<T>> {
    if !v.present {
        return Ok(x.clone());
    }
    let (n, _) = block.norm.forward(&x.tokens)?;
    let rope = Rope {
        q_positions: &x.positions,
        k_positions: &v.positions,
        base: rope_base,
    };
    let (y, _) = block.attn.forward(&n, &v.tokens, Some(rope))?;
    x.replace(x.tokens.add(&y)?)
}

/// Bridged velocity prediction `v_θ(a_t, t, text, video)`.
pub fn bridged_forward<T: Real>(
    a_t: &LatentSequence<T>,
    t: f64,
    text: &TextTokens<T>,
    video: &VideoTokens<T>,
    backbone: &BackboneParams<T>,
    bridge: &BridgeParams<T>,
) -> Result<LatentSequence<T>> {
    check_widths(backbone, bridge, video)?;
    let (out, _) = model::forward(backbone, Some(bridge), a_t, t, text, Some(video))?;
    a_t.replace(out)
}

pub(crate) fn check_widths<T: Real>(
    backbone: &BackboneParams<T>,
    bridge: &BridgeParams<T>,
    video: &VideoTokens<T>,
) -> Result<()> {
    if bridge.d_model != backbone.config.d_model {
        return Err(shape_err!(
            "bridge d_model {} vs backbone {}",
            bridge.d_model,
            backbone.config.d_model
        ));
    }
    if video.present && video.tokens.cols() != bridge.d_video {
        return Err(shape_err!(
            "video width {} vs bridge d_video {}",
            video.tokens.cols(),
            bridge.d_video
        ));
    }
    Ok(())
}

/// Identifiers of all trainable modules: exactly the bridge tensors.
pub fn trainable_mask<T: Real>(
    backbone: &BackboneParams<T>,
    bridge: &BridgeParams<T>,
) -> BTreeSet<String> {
    let backbone_names: BTreeSet<String> =
        backbone.named().into_iter().map(|t| t.name).collect();
    let mask: BTreeSet<String> = (0..bridge.blocks.len())
        .flat_map(|i| BRIDGE_MODULES.iter().map(move |m| format!("bridge.{i}.{m}")))
        .collect();
    debug_assert!(mask.iter().all(|m| !backbone_names
        .iter()
        .any(|b| b == m || b.starts_with(&format!("{m}.")))));
    mask
}

/// Module identifier owning a tensor name (`bridge.3.w_q.weight` → `bridge.3.w_q`).
pub fn module_of(tensor_name: &str) -> &str {
    tensor_name
        .rsplit_once('.')
        .map_or(tensor_name, |(head, _)| head)
}
