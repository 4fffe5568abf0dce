//! Evaluation metrics and the tabular report built from them.
//!
//! Embedders and classifiers are pluggable; the toy providers here are
//! deterministic stand-ins for pretrained networks. DeSync is computed from
//! detected latent onsets against generator ground truth.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, TextTokens};
use crate::bridge::{pool_video, BridgeParams, PoolingSpec, RawVideoTokens, VideoTokens};
use crate::config::canonical_hash;
use crate::diffusion::{self, SampleConfig};
use crate::error::{shape_err, Error, Result};
use crate::rng::{derive_seed, hash_str, RngStream};
use crate::synth::{ClassBank, SynthClip};
use crate::tensor::Matrix;

/// Report column order.
pub const COLUMNS: [&str; 7] = [
    "KL-PANNs", "KL-PaSST", "IB", "FD-VGG", "FD-PANNs", "FD-PaSST", "DeSync",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub embeddings: Matrix<f64>,
    pub provider_id: String,
}

impl EmbeddingSet {
    pub fn new(embeddings: Matrix<f64>, provider_id: impl Into<String>) -> Result<Self> {
        if !embeddings.is_finite() {
            return Err(Error::Numeric("embeddings contain non-finite values".into()));
        }
        Ok(Self {
            embeddings,
            provider_id: provider_id.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], provider_id: impl Into<String>) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?, provider_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSet {
    pub posteriors: Matrix<f64>,
}

impl PosteriorSet {
    pub fn new(posteriors: Matrix<f64>) -> Result<Self> {
        for r in 0..posteriors.rows() {
            let row = posteriors.row(r);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!("posterior row {r} is not on the simplex")));
            }
        }
        Ok(Self { posteriors })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }
}

fn mean_and_cov(x: &Matrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mean: Vec<f64> = x.col_sums().into_iter().map(|s| s / n as f64).collect();
    let mut c = DMatrix::zeros(d, d);
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                c[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = c[(i, j)] / (n - 1) as f64;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    (mean, c)
}

/// Eigenvalues of a symmetric matrix, with values down to `-tol` clamped to 0.
fn clamped_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-8 * max;
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(Error::Numeric(format!(
            "{what} is not positive semi-definite (min eigenvalue {min:e})"
        )));
    }
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(eig)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    let (na, da) = a.embeddings.shape();
    let (nb, db) = b.embeddings.shape();
    if da != db {
        return Err(shape_err!("embedding widths {da} vs {db}"));
    }
    if na < 2 || nb < 2 {
        return Err(Error::Input(format!(
            "Fréchet distance needs at least 2 embeddings per set, got {na} and {nb}"
        )));
    }
    let (ma, ca) = mean_and_cov(&a.embeddings);
    let (mb, cb) = mean_and_cov(&b.embeddings);
    let dmu: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();

    // (Σa Σb)^{1/2} has the trace of (Sa Σb Sa)^{1/2} with Sa = Σa^{1/2}.
    let ea = clamped_eigen(ca.clone(), "covariance")?;
    let sqrt_vals = ea.eigenvalues.map(f64::sqrt);
    let sa = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let mut m = &sa * &cb * &sa;
    m = (&m + m.transpose()) * 0.5;
    let em = clamped_eigen(m, "covariance product")?;
    let tr_sqrt: f64 = em.eigenvalues.iter().map(|v| v.sqrt()).sum();
    // Rounding can leave a tiny negative value for identical statistics.
    Ok((dmu + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Paired `(1/n) Σ_i KL(ref_i ‖ gen_i)`, with `gen` clamped below at 1e-10.
pub fn mean_kl(reference: &PosteriorSet, generated: &PosteriorSet) -> Result<f64> {
    let (r, g) = (&reference.posteriors, &generated.posteriors);
    if r.rows() != g.rows() || r.cols() != g.cols() {
        return Err(Error::Input(format!(
            "cannot pair {:?} reference posteriors with {:?} generated",
            r.shape(),
            g.shape()
        )));
    }
    if r.rows() == 0 {
        return Err(Error::Input("no posteriors to compare".into()));
    }
    let mut total = 0.0;
    for i in 0..r.rows() {
        for (&p, &q) in r.row(i).iter().zip(g.row(i)) {
            if p > 0.0 {
                total += p * (p / q.max(1e-10)).ln();
            }
        }
    }
    Ok(total / r.rows() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean over clips of cos(audio_i, mean of the frame embeddings paired with
/// clip i). `pairing[j]` is the clip index of frame row `j`.
pub fn ib_score(audio: &EmbeddingSet, frames: &EmbeddingSet, pairing: &[usize]) -> Result<f64> {
    let (n, d) = audio.embeddings.shape();
    if frames.embeddings.cols() != d {
        return Err(shape_err!(
            "audio width {d} vs frame width {}",
            frames.embeddings.cols()
        ));
    }
    if pairing.len() != frames.embeddings.rows() {
        return Err(Error::Input("pairing length differs from frame count".into()));
    }
    if n == 0 {
        return Err(Error::Input("no clips to score".into()));
    }
    let mut sums = vec![vec![0.0; d]; n];
    let mut counts = vec![0usize; n];
    for (j, &clip) in pairing.iter().enumerate() {
        if clip >= n {
            return Err(Error::Input(format!("frame {j} paired with missing clip {clip}")));
        }
        counts[clip] += 1;
        for (s, &v) in sums[clip].iter_mut().zip(frames.embeddings.row(j)) {
            *s += v;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        if counts[i] == 0 {
            return Err(Error::Input(format!("clip {i} has no frame embeddings")));
        }
        total += cosine(audio.embeddings.row(i), &sums[i])
            .ok_or_else(|| Error::Numeric(format!("zero-norm embedding for clip {i}")))?;
    }
    Ok(total / n as f64)
}

/// Onset times in seconds: rising crossings of the 3-frame-smoothed positive
/// difference of per-frame L2 norms, with a 2-frame refractory period. Each
/// crossing is placed at the largest raw novelty among the next 3 frames.
pub fn onset_detect(a: &Matrix<f64>, threshold: f64, fps: f64) -> Vec<f64> {
    let n = a.rows();
    if n == 0 {
        return Vec::new();
    }
    let energy: Vec<f64> = (0..n)
        .map(|f| a.row(f).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    // The frame before the clip is taken at the clip's quietest level.
    let floor = energy.iter().cloned().fold(f64::INFINITY, f64::min);
    let novelty: Vec<f64> = (0..n)
        .map(|f| (energy[f] - if f == 0 { floor } else { energy[f - 1] }).max(0.0))
        .collect();
    let smooth: Vec<f64> = (0..n)
        .map(|f| {
            let lo = f.saturating_sub(1);
            let hi = (f + 1).min(n - 1);
            novelty[lo..=hi].iter().sum::<f64>() / 3.0
        })
        .collect();
    let mut out = Vec::new();
    let mut last: Option<usize> = None;
    for f in 0..n {
        let rising = smooth[f] >= threshold && (f == 0 || smooth[f - 1] < threshold);
        if !rising || last.is_some_and(|l| f <= l + 2) {
            continue;
        }
        let hi = (f + 2).min(n - 1);
        let mut peak = f;
        for g in f..=hi {
            if novelty[g] > novelty[peak] {
                peak = g;
            }
        }
        out.push(peak as f64 / fps);
        last = Some(f);
    }
    out
}

/// Matching window for `desync`, seconds.
pub const DESYNC_WINDOW_S: f64 = 1.0;
/// Cost of an unmatched onset, seconds.
pub const DESYNC_PENALTY_S: f64 = 1.0;

/// Greedy closest-pair matching within the window. The score averages the
/// matched offsets and a fixed penalty per unmatched onset over
/// `matches + unmatched`; 0 when both lists are empty.
pub fn desync(pred: &[f64], truth: &[f64]) -> f64 {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let d = (p - t).abs();
            if d <= DESYNC_WINDOW_S {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).expect("finite onsets"));
    let mut used_p = vec![false; pred.len()];
    let mut used_t = vec![false; truth.len()];
    let mut matched = 0usize;
    let mut cost = 0.0;
    for (d, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            matched += 1;
            cost += d;
        }
    }
    let unmatched = (pred.len() - matched) + (truth.len() - matched);
    let count = matched + unmatched;
    if count == 0 {
        return 0.0;
    }
    (cost + DESYNC_PENALTY_S * unmatched as f64) / count as f64
}

/// Clip-level audio embedding.
pub trait AudioEmbedder: Sync {
    fn id(&self) -> &str;
    fn embed(&self, latent: &Matrix<f64>) -> Vec<f64>;
}

/// Clip-level class posterior.
pub trait AudioClassifier: Sync {
    fn id(&self) -> &str;
    fn posterior(&self, latent: &Matrix<f64>) -> Vec<f64>;
}

/// Audio and image embeddings in a shared space.
pub trait JointEmbedder: Sync {
    fn id(&self) -> &str;
    fn embed_audio(&self, latent: &Matrix<f64>) -> Vec<f64>;
    /// One embedding per sampled frame.
    fn embed_frames(&self, video: &RawVideoTokens<f64>) -> Vec<Vec<f64>>;
}

/// Random projection of per-channel mean and RMS over time.
#[derive(Debug, Clone)]
pub struct ProjectionEmbedder {
    pub id: String,
    pub projection: Matrix<f64>,
}

impl ProjectionEmbedder {
    pub fn new(id: &str, d_latent: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (2.0 * d_latent as f64).sqrt();
        Self {
            id: id.into(),
            projection: Matrix::from_fn(2 * d_latent, d_out, |_, _| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
        }
    }
}

impl AudioEmbedder for ProjectionEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, latent: &Matrix<f64>) -> Vec<f64> {
        let (n, d) = latent.shape();
        let mut feat = vec![0.0; 2 * d];
        for f in 0..n {
            for (k, &v) in latent.row(f).iter().enumerate() {
                feat[k] += v / n as f64;
                feat[d + k] += v * v / n as f64;
            }
        }
        feat[d..].iter_mut().for_each(|v| *v = v.sqrt());
        let x = Matrix::from_vec(1, 2 * d, feat).expect("feature width");
        x.matmul(&self.projection).expect("projection width").into_vec()
    }
}

fn class_projections(latent: &Matrix<f64>, signatures: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..latent.rows())
        .map(|f| {
            let row = latent.row(f);
            signatures
                .iter()
                .map(|s| {
                    let dot: f64 = row.iter().zip(s).map(|(a, b)| a * b).sum();
                    dot / s.len() as f64
                })
                .collect()
        })
        .collect()
}

/// Softmax over time-summed positive projections onto class signatures.
#[derive(Debug, Clone)]
pub struct SignatureClassifier {
    pub id: String,
    pub signatures: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl AudioClassifier for SignatureClassifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn posterior(&self, latent: &Matrix<f64>) -> Vec<f64> {
        let proj = class_projections(latent, &self.signatures);
        let c = self.signatures.len();
        let mut score = vec![0.0; c];
        for row in &proj {
            for (s, &p) in score.iter_mut().zip(row) {
                *s += p.max(0.0);
            }
        }
        let max = score.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = score.iter().map(|s| ((s - max) / self.temperature).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}

/// Histogram of the dominant class per frame, weighted by frame energy and
/// smoothed by a uniform pseudo-count.
#[derive(Debug, Clone)]
pub struct EnergyHistogramClassifier {
    pub id: String,
    pub signatures: Vec<Vec<f64>>,
    pub pseudo_count: f64,
}

impl AudioClassifier for EnergyHistogramClassifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn posterior(&self, latent: &Matrix<f64>) -> Vec<f64> {
        let proj = class_projections(latent, &self.signatures);
        let c = self.signatures.len();
        let mut hist = vec![self.pseudo_count; c];
        for (f, row) in proj.iter().enumerate() {
            let energy: f64 = latent.row(f).iter().map(|v| v * v).sum();
            let best = (0..c)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite"))
                .expect("at least one class");
            hist[best] += energy;
        }
        let z: f64 = hist.iter().sum();
        hist.into_iter().map(|h| h / z).collect()
    }
}

/// Class-evidence space shared by audio latents and video frames; frames are
/// sampled at `frames_per_s`.
#[derive(Debug, Clone)]
pub struct ClassSpaceEmbedder {
    pub id: String,
    pub signatures: Vec<Vec<f64>>,
    pub video_patterns: Vec<Vec<f64>>,
    pub frames_per_s: f64,
}

impl JointEmbedder for ClassSpaceEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_audio(&self, latent: &Matrix<f64>) -> Vec<f64> {
        let proj = class_projections(latent, &self.signatures);
        let mut out = vec![0.0; self.signatures.len()];
        for row in &proj {
            for (o, &p) in out.iter_mut().zip(row) {
                *o += p.max(0.0) / proj.len() as f64;
            }
        }
        out
    }

    fn embed_frames(&self, video: &RawVideoTokens<f64>) -> Vec<Vec<f64>> {
        let step = (video.effective_fps() / self.frames_per_s).round().max(1.0) as usize;
        (0..video.n_frames)
            .step_by(step)
            .map(|f| {
                let m = video.frame_mean(f);
                self.video_patterns
                    .iter()
                    .map(|p| {
                        let dot: f64 = m.iter().zip(p).map(|(a, b)| a * b).sum();
                        (dot / p.len() as f64).max(0.0)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Registered metric providers, keyed by report slot.
#[derive(Default)]
pub struct Providers {
    /// Slots `PANNs`, `PaSST`.
    pub classifiers: BTreeMap<String, Box<dyn AudioClassifier>>,
    /// Slots `VGG`, `PANNs`, `PaSST`.
    pub embedders: BTreeMap<String, Box<dyn AudioEmbedder>>,
    pub joint: Option<Box<dyn JointEmbedder>>,
}

impl Providers {
    /// Deterministic toy providers for every report column.
    pub fn toy(bank: &ClassBank) -> Self {
        let d = bank.signatures[0].len();
        let mut p = Self::default();
        p.classifiers.insert(
            "PANNs".into(),
            Box::new(SignatureClassifier {
                id: "toy-signature-softmax".into(),
                signatures: bank.signatures.clone(),
                temperature: 2.0,
            }),
        );
        p.classifiers.insert(
            "PaSST".into(),
            Box::new(EnergyHistogramClassifier {
                id: "toy-energy-histogram".into(),
                signatures: bank.signatures.clone(),
                pseudo_count: 1.0,
            }),
        );
        for (slot, seed) in [("VGG", 11u64), ("PANNs", 12), ("PaSST", 13)] {
            p.embedders.insert(
                slot.into(),
                Box::new(ProjectionEmbedder::new(
                    &format!("toy-projection-{}", slot.to_lowercase()),
                    d,
                    8,
                    seed,
                )),
            );
        }
        p.joint = Some(Box::new(ClassSpaceEmbedder {
            id: "toy-class-space".into(),
            signatures: bank.signatures.clone(),
            video_patterns: bank.video_patterns.clone(),
            frames_per_s: 1.0,
        }));
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_steps: usize,
    pub cfg_scale: f64,
    /// Generate with the text condition absent.
    pub no_text: bool,
    /// Generate with the video condition present.
    pub use_video: bool,
    /// Score the ground-truth latents instead of generating.
    pub ground_truth: bool,
    pub seed: u64,
    pub onset_threshold: f64,
    pub pooling: PoolingSpec,
    /// Report columns to compute.
    pub metrics: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_steps: 20,
            cfg_scale: 2.0,
            no_text: false,
            use_video: true,
            ground_truth: false,
            seed: 0,
            onset_threshold: 0.6,
            pooling: PoolingSpec::default(),
            metrics: COLUMNS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub meta: BTreeMap<String, String>,
}

impl EvalReport {
    /// `key=value` lines: metrics first, then metadata, each sorted by key.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k}={v:.6}\n"));
        }
        for (k, v) in &self.meta {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Header line and one row in fixed column order; missing columns are `-`.
    pub fn to_table_row(&self) -> String {
        let row: Vec<String> = COLUMNS
            .iter()
            .map(|c| self.metrics.get(*c).map_or("-".into(), |v| format!("{v:.4}")))
            .collect();
        format!("{}\n{}\n", COLUMNS.join("\t"), row.join("\t"))
    }
}

/// Model inputs built from one clip.
pub fn clip_conditions(
    clip: &SynthClip,
    backbone: &BackboneParams<f64>,
    pooling: &PoolingSpec,
    no_text: bool,
) -> Result<(TextTokens<f64>, VideoTokens<f64>)> {
    let text = if no_text {
        TextTokens::absent(backbone.config.d_text)
    } else {
        crate::backbone::encode_prompt(&clip.prompt, backbone.config.d_text, crate::backbone::PROMPT_SEED)
    };
    Ok((text, pool_video(&clip.video, pooling)?))
}

/// One generated latent per clip.
pub fn generate(
    clips: &[SynthClip],
    backbone: &BackboneParams<f64>,
    bridge: &BridgeParams<f64>,
    cfg: &EvalConfig,
) -> Result<Vec<Matrix<f64>>> {
    if cfg.ground_truth {
        return Ok(clips.iter().map(|c| c.a0.tokens.clone()).collect());
    }
    let sample_cfg = SampleConfig {
        n_steps: cfg.n_steps,
        cfg_scale: cfg.cfg_scale,
        n_frames: 0,
    };
    diffusion::pool().install(|| {
        clips
            .par_iter()
            .map(|clip| {
                let (text, video) = clip_conditions(clip, backbone, &cfg.pooling, cfg.no_text)?;
                let video = if cfg.use_video {
                    video
                } else {
                    VideoTokens::absent(bridge.d_video)
                };
                let rng = RngStream::new(derive_seed(cfg.seed, hash_str(&clip.id, 0)));
                let sc = SampleConfig {
                    n_frames: clip.a0.len(),
                    ..sample_cfg
                };
                Ok(diffusion::sample(backbone, bridge, &text, &video, &sc, &rng)?.tokens)
            })
            .collect()
    })
}

/// Score `generated[i]` against clip `i`.
pub fn score(
    clips: &[SynthClip],
    generated: &[Matrix<f64>],
    providers: &Providers,
    cfg: &EvalConfig,
) -> Result<BTreeMap<String, f64>> {
    if clips.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    if generated.len() != clips.len() {
        return Err(Error::Input("one generated latent per clip required".into()));
    }
    let reference: Vec<&Matrix<f64>> = clips.iter().map(|c| &c.a0.tokens).collect();
    let mut out = BTreeMap::new();
    for metric in &cfg.metrics {
        let value = match metric.as_str() {
            m if m.starts_with("KL-") => {
                let slot = &m[3..];
                let cls = providers
                    .classifiers
                    .get(slot)
                    .ok_or_else(|| Error::Config(format!("no classifier registered for {m}")))?;
                let post = |xs: &[&Matrix<f64>]| {
                    PosteriorSet::from_rows(&xs.iter().map(|x| cls.posterior(x)).collect::<Vec<_>>())
                };
                mean_kl(&post(&reference)?, &post(&generated.iter().collect::<Vec<_>>())?)?
            }
            m if m.starts_with("FD-") => {
                let slot = &m[3..];
                let emb = providers
                    .embedders
                    .get(slot)
                    .ok_or_else(|| Error::Config(format!("no embedder registered for {m}")))?;
                let set = |xs: Vec<&Matrix<f64>>| {
                    EmbeddingSet::from_rows(&xs.iter().map(|x| emb.embed(x)).collect::<Vec<_>>(), emb.id())
                };
                frechet_distance(&set(reference.clone())?, &set(generated.iter().collect())?)?
            }
            "IB" => {
                let joint = providers
                    .joint
                    .as_ref()
                    .ok_or_else(|| Error::Config("no joint embedder registered for IB".into()))?;
                let audio: Vec<Vec<f64>> = generated.iter().map(|g| joint.embed_audio(g)).collect();
                let mut frames = Vec::new();
                let mut pairing = Vec::new();
                for (i, c) in clips.iter().enumerate() {
                    for f in joint.embed_frames(&c.video) {
                        frames.push(f);
                        pairing.push(i);
                    }
                }
                ib_score(
                    &EmbeddingSet::from_rows(&audio, joint.id())?,
                    &EmbeddingSet::from_rows(&frames, joint.id())?,
                    &pairing,
                )?
            }
            "DeSync" => {
                let total: f64 = clips
                    .iter()
                    .zip(generated)
                    .map(|(c, g)| desync(&onset_detect(g, cfg.onset_threshold, c.latent_fps), &c.onsets_s))
                    .sum();
                total / clips.len() as f64
            }
            other => return Err(Error::Config(format!("unknown metric {other:?}"))),
        };
        if !value.is_finite() {
            return Err(Error::Numeric(format!("metric {metric} is not finite")));
        }
        out.insert(metric.clone(), value);
    }
    Ok(out)
}

/// Generate one sample per clip and compute every configured metric.
pub fn evaluate(
    clips: &[SynthClip],
    backbone: &BackboneParams<f64>,
    bridge: &BridgeParams<f64>,
    providers: &Providers,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let generated = generate(clips, backbone, bridge, cfg)?;
    let metrics = score(clips, &generated, providers, cfg)?;
    let mut meta = BTreeMap::new();
    meta.insert("clips".into(), clips.len().to_string());
    meta.insert("config_hash".into(), canonical_hash(cfg)?);
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("no_text".into(), cfg.no_text.to_string());
    meta.insert("use_video".into(), cfg.use_video.to_string());
    meta.insert("cfg_scale".into(), cfg.cfg_scale.to_string());
    meta.insert(
        "mode".into(),
        if cfg.ground_truth { "ground_truth" } else { "generated" }.into(),
    );
    meta.insert("kl_direction".into(), "KL(reference||generated), paired per clip".into());
    meta.insert(
        "desync_method".into(),
        "latent onset proxy against generator ground truth".into(),
    );
    for (slot, c) in &providers.classifiers {
        meta.insert(format!("provider.classifier.{slot}"), c.id().into());
    }
    for (slot, e) in &providers.embedders {
        meta.insert(format!("provider.embedder.{slot}"), e.id().into());
    }
    if let Some(j) = &providers.joint {
        meta.insert("provider.joint".into(), j.id().into());
    }
    Ok(EvalReport { metrics, meta })
}
