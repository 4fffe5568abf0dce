//! Miniature frozen diffusion transformer.
//!
//! Each block is pre-norm: `x += time(t)`, then self-attention over the latent
//! sequence (RoPE on latent-frame positions), cross-attention to text tokens,
//! and a GELU feed-forward, each as `x += sublayer(norm(x))`. Weights come from
//! a seeded generator and are never updated by bridge training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::error::{shape_err, Error, Result};
use crate::model::{self, Sublayer};
use crate::nn::{LayerNorm, Linear, Mlp, ParamSet, TensorRef};
use crate::rng::hash_str;
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_text: usize,
    pub s_a_max: usize,
    pub rope_base: f64,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Latent scale assumed by the input/output preconditioning; 1 leaves the
    /// network output as the raw velocity.
    pub sigma_data: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_blocks: 6,
            d_model: 64,
            n_heads: 4,
            d_text: 16,
            s_a_max: 512,
            rope_base: 10_000.0,
            ffn_mult: 2,
            sigma_data: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_text", self.d_text),
            ("s_a_max", self.s_a_max),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head width {} must be even for RoPE",
                self.d_model / self.n_heads
            )));
        }
        if !(self.rope_base > 1.0) || !self.rope_base.is_finite() {
            return Err(Error::Config(format!(
                "rope_base must be > 1, got {}",
                self.rope_base
            )));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_data must be positive, got {}",
                self.sigma_data
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Audio latent (or hidden state) sequence with latent-frame positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<T> {
    pub tokens: Matrix<T>,
    pub positions: Vec<i64>,
}

impl<T: Real> LatentSequence<T> {
    /// Positions `0..rows`.
    pub fn new(tokens: Matrix<T>) -> Result<Self> {
        let positions = (0..tokens.rows() as i64).collect();
        Self::with_positions(tokens, positions)
    }

    pub fn with_positions(tokens: Matrix<T>, positions: Vec<i64>) -> Result<Self> {
        if positions.len() != tokens.rows() {
            return Err(shape_err!(
                "{} positions for {} latent frames",
                positions.len(),
                tokens.rows()
            ));
        }
        if positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("latent positions must be strictly increasing".into()));
        }
        if !tokens.is_finite() {
            return Err(Error::Numeric("latent contains non-finite values".into()));
        }
        Ok(Self { tokens, positions })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// Same positions, new tokens.
    pub fn replace(&self, tokens: Matrix<T>) -> Result<Self> {
        if tokens.shape() != self.tokens.shape() {
            return Err(shape_err!(
                "replacement {:?} vs {:?}",
                tokens.shape(),
                self.tokens.shape()
            ));
        }
        Ok(Self {
            tokens,
            positions: self.positions.clone(),
        })
    }

    pub fn cast<U: Real>(&self) -> LatentSequence<U> {
        LatentSequence {
            tokens: self.tokens.cast(),
            positions: self.positions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextTokens<T> {
    pub tokens: Matrix<T>,
    pub present: bool,
}

impl<T: Real> TextTokens<T> {
    pub fn absent(d_text: usize) -> Self {
        Self {
            tokens: Matrix::zeros(0, d_text),
            present: false,
        }
    }

    pub fn new(tokens: Matrix<T>) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(shape_err!("present text needs at least one token"));
        }
        if !tokens.is_finite() {
            return Err(Error::Numeric("text tokens contain non-finite values".into()));
        }
        Ok(Self {
            tokens,
            present: true,
        })
    }

    pub fn cast<U: Real>(&self) -> TextTokens<U> {
        TextTokens {
            tokens: self.tokens.cast(),
            present: self.present,
        }
    }
}

/// Seed of the stand-in text encoder used throughout training and sampling.
pub const PROMPT_SEED: u64 = 0;

/// Stand-in text encoder: one seeded hash-embedding per lower-cased word.
/// An empty prompt yields the absent (null) condition.
pub fn encode_prompt<T: Real>(prompt: &str, d_text: usize, seed: u64) -> TextTokens<T> {
    let words: Vec<String> = prompt
        .split_whitespace()
        .map(str::to_lowercase)
        .collect();
    if words.is_empty() {
        return TextTokens::absent(d_text);
    }
    let rows: Vec<Vec<T>> = words
        .iter()
        .map(|w| {
            let mut rng = ChaCha8Rng::seed_from_u64(hash_str(w, seed));
            (0..d_text)
                .map(|_| T::c(rng.sample::<f64, _>(StandardNormal) as f32 as f64))
                .collect()
        })
        .collect();
    TextTokens {
        tokens: Matrix::from_rows(&rows).expect("equal widths"),
        present: true,
    }
}

/// Sinusoidal features of `t ∈ [0, 1]`: `d/2` sines then cosines.
pub fn timestep_embed<T: Real>(t: f64, d_model: usize) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
    }
    let half = d_model / 2;
    let n_cos = d_model - half;
    let freq = |i: usize, n: usize| {
        if n <= 1 {
            1.0
        } else {
            (-(10_000f64.ln()) * i as f64 / (n - 1) as f64).exp()
        }
    };
    let arg = 1000.0 * t;
    let mut out = Vec::with_capacity(d_model);
    out.extend((0..half).map(|i| T::c((arg * freq(i, half)).sin())));
    out.extend((0..n_cos).map(|i| T::c((arg * freq(i, n_cos)).cos())));
    Ok(out)
}

/// Coefficients `(k_in, k_skip, k_out)` of `v = k_skip·a_t + k_out·F(k_in·a_t)`
/// at time `t`: the minimum-variance linear velocity estimate for latents of
/// scale `sigma_data`, plus a unit-variance residual for the network `F`.
pub fn preconditioning(t: f64, sigma_data: f64) -> Result<(f64, f64, f64)> {
    let p = crate::diffusion::schedule(t)?;
    let sd2 = sigma_data * sigma_data;
    let den = p.alpha * p.alpha * sd2 + p.sigma * p.sigma;
    let root = den.sqrt();
    Ok((1.0 / root, p.alpha * p.sigma * (1.0 - sd2) / den, sigma_data / root))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneBlock<T> {
    pub time: Linear<T>,
    pub norm_sa: LayerNorm<T>,
    pub self_attn: AttentionWeights<T>,
    pub norm_tx: LayerNorm<T>,
    pub text_attn: AttentionWeights<T>,
    pub norm_ffn: LayerNorm<T>,
    pub ffn: Mlp<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub config: BackboneConfig,
    pub in_proj: Linear<T>,
    pub blocks: Vec<BackboneBlock<T>>,
    pub out_norm: LayerNorm<T>,
    pub out_proj: Linear<T>,
    /// Learned null text token used when the prompt is absent.
    pub null_text: Matrix<T>,
}

/// Seeded stand-in for pretrained weights.
pub fn init_backbone<T: Real>(config: &BackboneConfig, seed: u64) -> Result<BackboneParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let dt = config.d_text;
    let ff = d * config.ffn_mult;
    let o_gain = 1.0 / (config.n_blocks as f64).sqrt();
    let heads = config.n_heads;
    let attn = |rng: &mut ChaCha8Rng, d_kv: usize| AttentionWeights {
        q: Linear::random(rng, d, d, 1.0),
        kv: Linear::random(rng, d_kv, 2 * d, 1.0),
        o: Linear::spectral(rng, d, d, o_gain),
        n_heads: heads,
    };
    let in_proj = Linear::spectral(&mut rng, d, d, 1.0);
    let blocks = (0..config.n_blocks)
        .map(|_| BackboneBlock {
            time: Linear::random(&mut rng, d, d, 0.5),
            norm_sa: LayerNorm::new(d),
            self_attn: attn(&mut rng, d),
            norm_tx: LayerNorm::new(d),
            text_attn: attn(&mut rng, dt),
            norm_ffn: LayerNorm::new(d),
            ffn: Mlp {
                fc1: Linear::random(&mut rng, d, ff, 1.0),
                fc2: Linear::spectral(&mut rng, ff, d, o_gain),
            },
        })
        .collect();
    let out_proj = Linear::spectral(&mut rng, d, d, 1.0);
    let null_text = Matrix::from_fn(1, dt, |_, _| {
        T::c(rng.sample::<f64, _>(StandardNormal) as f32 as f64)
    });
    Ok(BackboneParams {
        config: config.clone(),
        in_proj,
        blocks,
        out_norm: LayerNorm::new(d),
        out_proj,
        null_text,
    })
}

impl<T: Real> BackboneParams<T> {
    pub fn cast<U: Real>(&self) -> BackboneParams<U> {
        let mut out = init_backbone::<U>(&self.config, 0).expect("validated config");
        for (dst, src) in out.slices_mut().into_iter().zip(self.named()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d = U::c(s.f64());
            }
        }
        out
    }

    /// Same shapes, all values zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for s in out.slices_mut() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }

    /// Key/value input of the text cross-attention.
    pub fn text_kv<'a>(&'a self, text: &'a TextTokens<T>) -> Result<&'a Matrix<T>> {
        if text.present {
            if text.tokens.cols() != self.config.d_text {
                return Err(shape_err!(
                    "text width {} vs d_text {}",
                    text.tokens.cols(),
                    self.config.d_text
                ));
            }
            Ok(&text.tokens)
        } else {
            Ok(&self.null_text)
        }
    }
}

impl<T: Real> ParamSet<T> for BackboneParams<T> {
    fn named(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        self.in_proj.push_named("backbone.in_proj", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("backbone.blocks.{i}");
            b.time.push_named(&format!("{p}.time"), &mut out);
            b.norm_sa.push_named(&format!("{p}.norm_sa"), &mut out);
            b.self_attn.push_named(&format!("{p}.self_attn"), &mut out);
            b.norm_tx.push_named(&format!("{p}.norm_tx"), &mut out);
            b.text_attn.push_named(&format!("{p}.text_attn"), &mut out);
            b.norm_ffn.push_named(&format!("{p}.norm_ffn"), &mut out);
            b.ffn.fc1.push_named(&format!("{p}.ffn.fc1"), &mut out);
            b.ffn.fc2.push_named(&format!("{p}.ffn.fc2"), &mut out);
        }
        self.out_norm.push_named("backbone.out_norm", &mut out);
        self.out_proj.push_named("backbone.out_proj", &mut out);
        out.push(TensorRef {
            name: "backbone.null_text".into(),
            shape: vec![1, self.config.d_text],
            data: self.null_text.data(),
        });
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        self.in_proj.push_mut(&mut out);
        for b in &mut self.blocks {
            b.time.push_mut(&mut out);
            b.norm_sa.push_mut(&mut out);
            b.self_attn.push_mut(&mut out);
            b.norm_tx.push_mut(&mut out);
            b.text_attn.push_mut(&mut out);
            b.norm_ffn.push_mut(&mut out);
            b.ffn.fc1.push_mut(&mut out);
            b.ffn.fc2.push_mut(&mut out);
        }
        self.out_norm.push_mut(&mut out);
        self.out_proj.push_mut(&mut out);
        out.push(self.null_text.data_mut());
        out
    }
}

/// One frozen block without any bridge sublayer.
pub fn backbone_block_forward<T: Real>(
    x: &LatentSequence<T>,
    text: &TextTokens<T>,
    backbone: &BackboneParams<T>,
    block: usize,
    t_emb: &[T],
) -> Result<LatentSequence<T>> {
    let mut trace = Vec::new();
    let out = model::block_forward(
        backbone, None, block, &x.tokens, &x.positions, text, None, t_emb, &mut trace,
    )?;
    debug_assert!(trace.iter().all(|(_, s)| *s != Sublayer::VideoCrossAttn));
    x.replace(out)
}

/// Full backbone velocity prediction, no video pathway.
pub fn backbone_forward<T: Real>(
    a_t: &LatentSequence<T>,
    t: f64,
    text: &TextTokens<T>,
    backbone: &BackboneParams<T>,
) -> Result<LatentSequence<T>> {
    let (out, _) = model::forward(backbone, None, a_t, t, text, None)?;
    a_t.replace(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        BackboneConfig {
            n_blocks: 2,
            d_model: 32,
            n_heads: 4,
            d_text: 8,
            s_a_max: 64,
            rope_base: 10_000.0,
            ffn_mult: 2,
            sigma_data: 1.0,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_backbone::<f64>(&small(), 7).unwrap();
        let b = init_backbone::<f64>(&small(), 7).unwrap();
        let c = init_backbone::<f64>(&small(), 8).unwrap();
        assert_eq!(a, b);
        let differ = a
            .named()
            .iter()
            .zip(c.named())
            .any(|(x, y)| x.data != y.data);
        assert!(differ);
        assert!(a.named().iter().all(|t| t.data.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = BackboneConfig {
            n_heads: 3,
            d_model: 8,
            ..small()
        };
        assert!(matches!(init_backbone::<f64>(&cfg, 1), Err(Error::Config(_))));
        let cfg = BackboneConfig {
            rope_base: 1.0,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn timestep_embedding_contract() {
        let e0 = timestep_embed::<f64>(0.0, 8).unwrap();
        assert_eq!(&e0[..4], &[0.0; 4]);
        assert_eq!(&e0[4..], &[1.0; 4]);
        let e = timestep_embed::<f64>(0.5, 8).unwrap();
        assert_eq!(e.len(), 8);
        assert!(e.iter().all(|v| v.is_finite()));
        assert_ne!(
            timestep_embed::<f64>(0.25, 8).unwrap(),
            timestep_embed::<f64>(0.75, 8).unwrap()
        );
        assert!(timestep_embed::<f64>(1.5, 8).is_err());
        assert!(timestep_embed::<f64>(-0.1, 8).is_err());
    }

    #[test]
    fn timestep_embedding_is_injective_on_grid() {
        let embs: Vec<Vec<f64>> = (0..=1000)
            .map(|i| timestep_embed(i as f64 * 1e-3, 32).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-9, "t={} and t={} collide", i, j);
            }
        }
    }

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let cfg = small();
        let p = init_backbone::<f64>(&cfg, 3).unwrap();
        let x = LatentSequence::new(Matrix::from_fn(16, 32, |r, c| ((r * 7 + c) as f64).sin()))
            .unwrap();
        let text = encode_prompt::<f64>("glass shatter", cfg.d_text, 0);
        let te = timestep_embed(0.3, 32).unwrap();
        let y1 = backbone_block_forward(&x, &text, &p, 0, &te).unwrap();
        let y2 = backbone_block_forward(&x, &text, &p, 0, &te).unwrap();
        assert_eq!(y1.tokens.shape(), (16, 32));
        assert_eq!(y1, y2);
        let y3 = backbone_block_forward(&x, &TextTokens::absent(cfg.d_text), &p, 0, &te).unwrap();
        assert!(y1.tokens.max_abs_diff(&y3.tokens) > 1e-9);
    }

    #[test]
    fn latent_positions_must_increase() {
        let m = Matrix::<f64>::zeros(3, 4);
        assert!(LatentSequence::with_positions(m.clone(), vec![0, 2, 2]).is_err());
        assert!(LatentSequence::with_positions(m, vec![0, 2, 5]).is_ok());
    }

    #[test]
    fn prompt_encoding_is_stable() {
        let a = encode_prompt::<f64>("Door Slam", 8, 1);
        let b = encode_prompt::<f64>("door slam", 8, 1);
        assert_eq!(a, b);
        assert_eq!(a.tokens.rows(), 2);
        assert!(!encode_prompt::<f64>("  ", 8, 1).present);
    }
}
