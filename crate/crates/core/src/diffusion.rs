//! v-prediction latent diffusion: cosine schedule, corruption, the training
//! objective with condition dropout, guidance and a deterministic sampler.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, LatentSequence, TextTokens};
use crate::bridge::{check_widths, BridgeParams, VideoTokens};
use crate::error::{shape_err, Error, Result};
use crate::model;
use crate::nn::ParamSet;
use crate::rng::{Purpose, RngStream};
use crate::tensor::{Matrix, Real};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FOLEY_BRIDGE_THREADS";

pub(crate) fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedulePoint {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
}

/// Cosine schedule: `alpha = cos(πt/2)`, `sigma = sin(πt/2)`.
pub fn schedule(t: f64) -> Result<NoiseSchedulePoint> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("schedule time {t} outside [0, 1]")));
    }
    // Exact endpoints; cos(π/2) is not exactly zero in floating point.
    let (alpha, sigma) = if t == 0.0 {
        (1.0, 0.0)
    } else if t == 1.0 {
        (0.0, 1.0)
    } else {
        let a = std::f64::consts::FRAC_PI_2 * t;
        (a.cos(), a.sin())
    };
    Ok(NoiseSchedulePoint { t, alpha, sigma })
}

/// `a_t = alpha·a0 + sigma·eps`.
pub fn corrupt<T: Real>(
    a0: &LatentSequence<T>,
    eps: &Matrix<T>,
    p: &NoiseSchedulePoint,
) -> Result<LatentSequence<T>> {
    let (al, si) = (T::c(p.alpha), T::c(p.sigma));
    a0.replace(a0.tokens.zip_map(eps, "corrupt", |a, e| al * a + si * e)?)
}

/// `v = alpha·eps − sigma·a0`.
pub fn v_target<T: Real>(
    a0: &LatentSequence<T>,
    eps: &Matrix<T>,
    p: &NoiseSchedulePoint,
) -> Result<Matrix<T>> {
    let (al, si) = (T::c(p.alpha), T::c(p.sigma));
    a0.tokens.zip_map(eps, "v_target", |a, e| al * e - si * a)
}

/// `v_uncond + scale·(v_cond − v_uncond)`.
pub fn cfg_combine<T: Real>(v_cond: &Matrix<T>, v_uncond: &Matrix<T>, scale: f64) -> Result<Matrix<T>> {
    let s = T::c(scale);
    v_cond.zip_map(v_uncond, "cfg_combine", |c, u| u + s * (c - u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Probability of replacing the video condition with the absent one.
    pub token_drop_p: f64,
    /// Also drop the text condition (independently, same probability).
    pub drop_text: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub cfg_scale_eval: f64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            token_drop_p: 0.10,
            drop_text: false,
            batch_size: 12,
            steps: 1000,
            lr: 1e-3,
            cfg_scale_eval: 2.0,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.token_drop_p) && self.token_drop_p != 1.0 {
            return Err(Error::Config(format!(
                "token_drop_p {} outside [0, 1)",
                self.token_drop_p
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training example: clean latent plus its conditions.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub a0: LatentSequence<T>,
    pub text: TextTokens<T>,
    pub video: VideoTokens<T>,
}

/// Bernoulli draw for dropping the video condition of batch item `index`.
pub fn draw_token_drop(rng: &RngStream, index: u64, p: f64) -> bool {
    rng.substream(Purpose::TokenDrop, index).random::<f64>() < p
}

fn draw_text_drop(rng: &RngStream, index: u64, p: f64) -> bool {
    rng.substream(Purpose::TextDrop, index).random::<f64>() < p
}

/// Per-item draws `(t, eps)` for batch item `index`.
pub fn draw_noise(rng: &RngStream, index: u64, rows: usize, cols: usize) -> (f64, Matrix<f64>) {
    let t = rng.substream(Purpose::Timestep, index).random::<f64>();
    let mut r = rng.substream(Purpose::Noise, index);
    let eps = Matrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal));
    (t, eps)
}

#[derive(Debug, Clone)]
pub struct StepOutput<G> {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub drop_count: usize,
    pub grads: G,
}

struct ItemOut {
    loss: f64,
    dropped: bool,
    bridge: Option<BridgeParams<f64>>,
    backbone: Option<BackboneParams<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn item_step(
    sample: &TrainSample<f64>,
    index: usize,
    batch_len: usize,
    backbone: &BackboneParams<f64>,
    bridge: Option<&BridgeParams<f64>>,
    cfg: &TrainConfig,
    rng: &RngStream,
    backbone_grads: bool,
) -> Result<ItemOut> {
    let i = index as u64;
    let dropped = bridge.is_some() && draw_token_drop(rng, i, cfg.token_drop_p);
    let text_dropped = (cfg.drop_text || bridge.is_none()) && draw_text_drop(rng, i, cfg.token_drop_p);
    let (t, eps) = draw_noise(rng, i, sample.a0.len(), sample.a0.width());
    let p = schedule(t)?;
    let a_t = corrupt(&sample.a0, &eps, &p)?;
    let target = v_target(&sample.a0, &eps, &p)?;
    let absent_text;
    let text = if text_dropped {
        absent_text = TextTokens::absent(backbone.config.d_text);
        &absent_text
    } else {
        &sample.text
    };
    let video = if dropped || bridge.is_none() {
        None
    } else {
        Some(&sample.video)
    };
    let (out, trace) = model::forward(backbone, bridge, &a_t, t, text, video)?;
    let diff = out.sub(&target)?;
    let n = diff.data().len() as f64;
    let loss = diff.sum_sq() / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at batch item {index} (t = {t})"
        )));
    }
    let d_out = diff.scale(2.0 / (n * batch_len as f64));
    let mut bridge_grad = bridge.map(BridgeParams::zeros_like);
    let mut backbone_grad = backbone_grads.then(|| backbone.zeros_like());
    model::backward(
        backbone,
        bridge,
        &trace,
        &d_out,
        bridge_grad.as_mut(),
        backbone_grad.as_mut(),
    )?;
    Ok(ItemOut {
        loss,
        dropped,
        bridge: bridge_grad,
        backbone: backbone_grad,
    })
}

fn run_items(
    batch: &[TrainSample<f64>],
    backbone: &BackboneParams<f64>,
    bridge: Option<&BridgeParams<f64>>,
    cfg: &TrainConfig,
    rng: &RngStream,
    backbone_grads: bool,
) -> Result<Vec<ItemOut>> {
    if batch.is_empty() {
        return Err(shape_err!("empty batch"));
    }
    if let Some(b) = bridge {
        for s in batch {
            check_widths(backbone, b, &s.video)?;
        }
    }
    let n = batch.len();
    // Items are independent; results are reduced in index order afterwards.
    pool().install(|| {
        batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| item_step(s, i, n, backbone, bridge, cfg, rng, backbone_grads))
            .collect()
    })
}

fn reduce<T: Real, P: ParamSet<T>>(acc: &mut P, g: &P) {
    let src: Vec<Vec<T>> = g.named().into_iter().map(|t| t.data.to_vec()).collect();
    for (dst, s) in acc.slices_mut().into_iter().zip(src) {
        for (d, v) in dst.iter_mut().zip(s) {
            *d = *d + v;
        }
    }
}

/// Loss and bridge gradients for one batch. Only bridge tensors receive
/// gradients; backbone gradients are never materialized.
pub fn training_step(
    batch: &[TrainSample<f64>],
    backbone: &BackboneParams<f64>,
    bridge: &BridgeParams<f64>,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<StepOutput<BridgeParams<f64>>> {
    let items = run_items(batch, backbone, Some(bridge), cfg, rng, false)?;
    let mut grads = bridge.zeros_like();
    for it in &items {
        reduce(&mut grads, it.bridge.as_ref().expect("bridge grads"));
    }
    let per_sample: Vec<f64> = items.iter().map(|i| i.loss).collect();
    Ok(StepOutput {
        loss: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        drop_count: items.iter().filter(|i| i.dropped).count(),
        per_sample,
        grads,
    })
}

/// Loss and backbone gradients for text-conditioned prior fitting (no video).
/// The text condition is dropped with probability `token_drop_p`.
pub fn prior_step(
    batch: &[TrainSample<f64>],
    backbone: &BackboneParams<f64>,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<StepOutput<BackboneParams<f64>>> {
    let items = run_items(batch, backbone, None, cfg, rng, true)?;
    let mut grads = backbone.zeros_like();
    for it in &items {
        reduce(&mut grads, it.backbone.as_ref().expect("backbone grads"));
    }
    let per_sample: Vec<f64> = items.iter().map(|i| i.loss).collect();
    Ok(StepOutput {
        loss: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        drop_count: 0,
        per_sample,
        grads,
    })
}

/// Mean v-prediction error over `samples` at `n_t` stratified timesteps with
/// fixed noise; video is replaced by the absent condition when `with_video`
/// is false.
pub fn eval_v_mse(
    samples: &[TrainSample<f64>],
    backbone: &BackboneParams<f64>,
    bridge: &BridgeParams<f64>,
    with_video: bool,
    n_t: usize,
    rng: &RngStream,
) -> Result<f64> {
    if samples.is_empty() || n_t == 0 {
        return Err(Error::Input("no samples or timesteps to evaluate".into()));
    }
    let per: Vec<Result<f64>> = pool().install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut total = 0.0;
                for k in 0..n_t {
                    let p = schedule((k as f64 + 0.5) / n_t as f64)?;
                    let mut r = rng.substream(Purpose::Noise, (i * n_t + k) as u64);
                    let eps = Matrix::from_fn(s.a0.len(), s.a0.width(), |_, _| r.sample(StandardNormal));
                    let a_t = corrupt(&s.a0, &eps, &p)?;
                    let target = v_target(&s.a0, &eps, &p)?;
                    let video = with_video.then_some(&s.video);
                    let (out, _) = model::forward(backbone, Some(bridge), &a_t, p.t, &s.text, video)?;
                    let diff = out.sub(&target)?;
                    total += diff.sum_sq() / diff.data().len() as f64;
                }
                Ok(total / n_t as f64)
            })
            .collect()
    });
    let mut sum = 0.0;
    for v in per {
        sum += v?;
    }
    Ok(sum / samples.len() as f64)
}

/// Adam with zero weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: ParamSet<f64>>(lr: f64, params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<P: ParamSet<f64>>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        let g: Vec<Vec<f64>> = grads.named().into_iter().map(|t| t.data.to_vec()).collect();
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(&g)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / b1t;
                let vh = v[i] / b2t;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Deterministic DDIM-style integration in v-parameterization over the grid
/// `t_k = 1 − k/n_steps`, starting from `init` at `t = 1`.
pub fn sample_with<F>(mut velocity: F, init: Matrix<f64>, n_steps: usize) -> Result<Matrix<f64>>
where
    F: FnMut(&Matrix<f64>, f64) -> Result<Matrix<f64>>,
{
    if n_steps == 0 {
        return Err(Error::Domain("sampler needs at least one step".into()));
    }
    let mut a = init;
    for k in 0..n_steps {
        let cur = schedule(1.0 - k as f64 / n_steps as f64)?;
        let next = schedule(if k + 1 == n_steps {
            0.0
        } else {
            1.0 - (k + 1) as f64 / n_steps as f64
        })?;
        let v = velocity(&a, cur.t)?;
        let a0_hat = a.zip_map(&v, "a0_hat", |x, v| cur.alpha * x - cur.sigma * v)?;
        let eps_hat = a.zip_map(&v, "eps_hat", |x, v| cur.sigma * x + cur.alpha * v)?;
        a = a0_hat.zip_map(&eps_hat, "recompose", |x0, e| next.alpha * x0 + next.sigma * e)?;
        if !a.is_finite() {
            return Err(Error::Numeric(format!("sampler diverged at step {k}")));
        }
    }
    Ok(a)
}

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub n_steps: usize,
    pub cfg_scale: f64,
    pub n_frames: usize,
}

/// Generate a clean latent of `n_frames` frames. With present video and
/// `cfg_scale != 1`, the video-conditioned prediction is extrapolated away
/// from the video-absent one.
pub fn sample(
    backbone: &BackboneParams<f64>,
    bridge: &BridgeParams<f64>,
    text: &TextTokens<f64>,
    video: &VideoTokens<f64>,
    cfg: &SampleConfig,
    rng: &RngStream,
) -> Result<LatentSequence<f64>> {
    check_widths(backbone, bridge, video)?;
    let d = backbone.config.d_model;
    let mut r = rng.substream(Purpose::SamplerInit, 0);
    let init = Matrix::from_fn(cfg.n_frames, d, |_, _| r.sample(StandardNormal));
    let template = LatentSequence::new(Matrix::<f64>::zeros(cfg.n_frames, d))?;
    let guided = video.present && cfg.cfg_scale != 1.0;
    let out = sample_with(
        |a, t| {
            let a_t = template.replace(a.clone())?;
            let (v_cond, _) = model::forward(backbone, Some(bridge), &a_t, t, text, Some(video))?;
            if !guided {
                return Ok(v_cond);
            }
            let (v_uncond, _) = model::forward(backbone, Some(bridge), &a_t, t, text, None)?;
            cfg_combine(&v_cond, &v_uncond, cfg.cfg_scale)
        },
        init,
        cfg.n_steps,
    )?;
    template.replace(out)
}
