//! Synthetic paired clips with known event times.
//!
//! Each clip has sparse visual events in the video tokens and matching
//! class-specific decaying bumps in the audio latent, so synchronization can
//! be checked against ground truth.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{encode_prompt, LatentSequence, PROMPT_SEED};
use crate::blob::{Blob, Dtype};
use crate::bridge::{pool_video, PoolingSpec, RawVideoTokens};
use crate::curation::ClipRecord;
use crate::diffusion::TrainSample;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Purpose, RngStream};
use crate::tensor::Matrix;
use crate::train::SampleSource;

const CLASS_NAMES: [&str; 8] = [
    "knock", "splash", "chime", "thud", "rustle", "click", "whistle", "buzz",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub duration_s: f64,
    pub video_fps: f64,
    pub stride: usize,
    pub n_patches: usize,
    pub d_video: usize,
    pub latent_fps: f64,
    pub d_latent: usize,
    pub n_classes: usize,
    /// Corpus clips carry between 1 and `max_events` events.
    pub max_events: usize,
    pub noise_floor: f64,
    pub patch_noise: f64,
    pub bank_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            duration_s: 4.0,
            video_fps: 16.0,
            stride: 2,
            n_patches: 64,
            d_video: 16,
            latent_fps: 8.0,
            d_latent: 32,
            n_classes: 4,
            max_events: 3,
            noise_floor: 0.02,
            patch_noise: 0.05,
            bank_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.video_fps > 0.0) || !(self.latent_fps > 0.0) || self.stride == 0 {
            return Err(Error::Config("frame rates and stride must be positive".into()));
        }
        if self.n_classes == 0 || self.n_classes > CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "n_classes must be in 1..={}",
                CLASS_NAMES.len()
            )));
        }
        if self.n_patches == 0 || self.d_video == 0 || self.d_latent == 0 || self.max_events == 0 {
            return Err(Error::Config("synth dimensions must be positive".into()));
        }
        if !(self.duration_s > 0.0 && self.duration_s <= 12.0) {
            return Err(Error::Config("duration_s must be in (0, 12]".into()));
        }
        Ok(())
    }

    pub fn effective_fps(&self) -> f64 {
        self.video_fps / self.stride as f64
    }
}

/// Per-class patterns shared by every clip of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBank {
    pub names: Vec<String>,
    /// Audio signature direction per class, unit RMS.
    pub signatures: Vec<Vec<f64>>,
    /// Envelope decay constant per class, seconds.
    pub decay_s: Vec<f64>,
    /// Video pattern per class, unit RMS.
    pub video_patterns: Vec<Vec<f64>>,
    /// Class-independent video event component.
    pub event_vector: Vec<f64>,
}

fn unit_rms(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / d as f64).sqrt();
    v.into_iter().map(|x| x / rms).collect()
}

impl ClassBank {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.bank_seed, 0xBA4C));
        let n = spec.n_classes;
        let signatures = (0..n).map(|_| unit_rms(&mut rng, spec.d_latent)).collect();
        let video_patterns = (0..n).map(|_| unit_rms(&mut rng, spec.d_video)).collect();
        let event_vector = unit_rms(&mut rng, spec.d_video);
        Self {
            names: CLASS_NAMES[..n].iter().map(|s| s.to_string()).collect(),
            signatures,
            decay_s: (0..n).map(|c| 0.075 + 0.1 * c as f64).collect(),
            video_patterns,
            event_vector,
        }
    }

    pub fn class_of(&self, prompt: &str) -> Option<usize> {
        let p = prompt.trim().to_lowercase();
        self.names.iter().position(|n| *n == p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub id: String,
    pub video: RawVideoTokens<f64>,
    pub a0: LatentSequence<f64>,
    pub latent_fps: f64,
    pub onsets_s: Vec<f64>,
    pub prompt: String,
    pub class_id: usize,
}

impl SynthClip {
    /// Training example with the class name as prompt and pooled video.
    pub fn train_sample(&self, pooling: &PoolingSpec, d_text: usize) -> Result<TrainSample<f64>> {
        Ok(TrainSample {
            a0: self.a0.clone(),
            text: encode_prompt(&self.prompt, d_text, PROMPT_SEED),
            video: pool_video(&self.video, pooling)?,
        })
    }
}

/// Clip generator bound to one spec and its class bank.
#[derive(Debug, Clone)]
pub struct SynthGenerator {
    pub spec: SynthSpec,
    pub bank: ClassBank,
}

/// Sorted distinct frames with pairwise gaps of at least `gap`.
fn event_frames(rng: &mut ChaCha8Rng, n_frames: usize, n_events: usize, gap: usize) -> Vec<usize> {
    let slots = n_frames - (n_events.saturating_sub(1)) * (gap - 1);
    let mut idx: Vec<usize> = (0..slots).collect();
    idx.shuffle(rng);
    let mut chosen: Vec<usize> = idx[..n_events].to_vec();
    chosen.sort_unstable();
    chosen.iter().enumerate().map(|(i, &s)| s + i * (gap - 1)).collect()
}

impl SynthGenerator {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let bank = ClassBank::new(&spec);
        Ok(Self { spec, bank })
    }

    pub fn n_effective_frames(&self, duration_s: f64) -> usize {
        (duration_s * self.spec.effective_fps()).round() as usize
    }

    pub fn n_latent_frames(&self, duration_s: f64) -> usize {
        (duration_s * self.spec.latent_fps).round() as usize
    }

    /// One clip with `n_events` events of class `class_id`.
    pub fn clip(&self, seed: u64, duration_s: f64, n_events: usize, class_id: usize) -> Result<SynthClip> {
        let s = &self.spec;
        if !(duration_s > 0.0 && duration_s <= 12.0) {
            return Err(Error::Generation(format!("duration {duration_s} s outside (0, 12]")));
        }
        if class_id >= s.n_classes {
            return Err(Error::Generation(format!(
                "class {class_id} outside 0..{}",
                s.n_classes
            )));
        }
        let n_eff = self.n_effective_frames(duration_s);
        let n_lat = self.n_latent_frames(duration_s);
        if n_events > n_eff {
            return Err(Error::Generation(format!(
                "{n_events} events cannot fit in {n_eff} effective frames"
            )));
        }
        let stream = RngStream::new(seed);
        let mut rng = stream.substream(Purpose::Synth, 0);
        let gap = if n_events == 0 {
            1
        } else {
            (n_eff / n_events).clamp(1, 4)
        };
        let frames = event_frames(&mut rng, n_eff, n_events, gap);
        let eff_fps = s.effective_fps();
        let onsets_s: Vec<f64> = frames.iter().map(|&f| f as f64 / eff_fps).collect();

        // Video: smooth per-dim background, static spatial texture, patch noise.
        let (np, dv) = (s.n_patches, s.d_video);
        let omega: Vec<f64> = (0..dv).map(|_| rng.random_range(0.5..1.5)).collect();
        let phase: Vec<f64> = (0..dv)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let texture: Vec<f64> = (0..np * dv)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pattern: Vec<f64> = self
            .bank
            .event_vector
            .iter()
            .zip(&self.bank.video_patterns[class_id])
            .map(|(e, c)| e + c)
            .collect();
        let mut video = vec![0.0; n_eff * np * dv];
        let mut noise = stream.substream(Purpose::Synth, 1);
        for f in 0..n_eff {
            let is_event = frames.binary_search(&f).is_ok();
            for p in 0..np {
                for k in 0..dv {
                    let bg = 0.3
                        * (std::f64::consts::TAU * omega[k] * f as f64 / n_eff.max(1) as f64 + phase[k])
                            .sin();
                    let mut v = bg + texture[p * dv + k]
                        + s.patch_noise * noise.sample::<f64, _>(StandardNormal);
                    if is_event {
                        v += pattern[k];
                    }
                    video[(f * np + p) * dv + k] = v as f32 as f64;
                }
            }
        }
        let video = RawVideoTokens::new(video, n_eff, np, dv, s.video_fps, s.stride)?;

        // Audio latent: noise floor plus a decaying signature per event.
        let sig = &self.bank.signatures[class_id];
        let tau = self.bank.decay_s[class_id] * s.latent_fps;
        let starts: Vec<usize> = onsets_s
            .iter()
            .map(|t| ((t * s.latent_fps).round() as usize).min(n_lat.saturating_sub(1)))
            .collect();
        let mut floor = stream.substream(Purpose::Synth, 2);
        let a0 = Matrix::from_fn(n_lat, s.d_latent, |l, j| {
            let mut v = s.noise_floor * floor.sample::<f64, _>(StandardNormal);
            for &st in &starts {
                if l >= st {
                    v += (-((l - st) as f64) / tau).exp() * sig[j];
                }
            }
            v.clamp(-3.0, 3.0) as f32 as f64
        });
        Ok(SynthClip {
            id: String::new(),
            video,
            a0: LatentSequence::new(a0)?,
            latent_fps: s.latent_fps,
            onsets_s,
            prompt: self.bank.names[class_id].clone(),
            class_id,
        })
    }

    /// Regenerate a planned corpus clip.
    pub fn corpus_clip(&self, entry: &CorpusEntry) -> Result<SynthClip> {
        let mut clip = self.clip(entry.seed, self.spec.duration_s, entry.n_events, entry.class_id)?;
        clip.id = entry.id.clone();
        Ok(clip)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// Deterministic recipe for one corpus clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub index: usize,
    pub id: String,
    pub seed: u64,
    pub class_id: usize,
    pub n_events: usize,
    pub split: Split,
}

/// Plan `n_clips` clips. Classes cycle through the bank; the last
/// `n_clips − round(ratio·n_clips)` clips form the eval split, which keeps
/// both splits class-balanced.
pub fn plan_corpus(spec: &SynthSpec, n_clips: usize, seed: u64, split_ratio: f64) -> Result<Vec<CorpusEntry>> {
    spec.validate()?;
    if n_clips < 2 {
        return Err(Error::Manifest(format!(
            "a train/eval split needs at least 2 clips, got {n_clips}"
        )));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {split_ratio} outside (0, 1)")));
    }
    let n_train = ((split_ratio * n_clips as f64).round() as usize).clamp(1, n_clips - 1);
    let stream = RngStream::new(seed);
    Ok((0..n_clips)
        .map(|i| {
            let n_events = 1 + stream
                .substream(Purpose::Synth, i as u64)
                .random_range(0..spec.max_events);
            CorpusEntry {
                index: i,
                id: format!("clip-{i:05}"),
                seed: derive_seed(seed, i as u64),
                class_id: i % spec.n_classes,
                n_events,
                split: if i < n_train { Split::Train } else { Split::Eval },
            }
        })
        .collect())
}

/// Train and eval manifests for a planned corpus.
pub fn gen_corpus(
    spec: &SynthSpec,
    n_clips: usize,
    seed: u64,
    split_ratio: f64,
) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    let plan = plan_corpus(spec, n_clips, seed, split_ratio)?;
    let record = |e: &CorpusEntry| ClipRecord::pending(e.id.clone(), spec.duration_s, format!("clips/{}", e.id));
    let train = plan.iter().filter(|e| e.split == Split::Train).map(record).collect();
    let eval = plan.iter().filter(|e| e.split == Split::Eval).map(record).collect();
    Ok((train, eval))
}

/// Training examples regenerated on demand from a corpus plan.
#[derive(Debug, Clone)]
pub struct CorpusSource {
    pub generator: SynthGenerator,
    pub entries: Vec<CorpusEntry>,
    pub pooling: PoolingSpec,
    pub d_text: usize,
}

impl CorpusSource {
    pub fn new(generator: SynthGenerator, entries: Vec<CorpusEntry>, pooling: PoolingSpec, d_text: usize) -> Self {
        Self {
            generator,
            entries,
            pooling,
            d_text,
        }
    }

    pub fn clips(&self) -> Result<Vec<SynthClip>> {
        self.entries.iter().map(|e| self.generator.corpus_clip(e)).collect()
    }

    /// Generate every example up front.
    pub fn materialize(&self) -> Result<Vec<TrainSample<f64>>> {
        (0..self.entries.len()).map(|i| self.get(i)).collect()
    }
}

impl SampleSource for CorpusSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, index: usize) -> Result<TrainSample<f64>> {
        self.generator
            .corpus_clip(&self.entries[index])?
            .train_sample(&self.pooling, self.d_text)
    }
}

pub fn clip_to_blob(clip: &SynthClip) -> Blob {
    let mut b = Blob::new(Dtype::F32);
    let v = &clip.video;
    b.push(
        "video",
        vec![v.n_frames, v.n_patches, v.d_video],
        v.tokens.clone(),
    );
    let (r, c) = clip.a0.tokens.shape();
    b.push("a0", vec![r, c], clip.a0.tokens.data().to_vec());
    let m = &mut b.meta;
    m.insert("id".into(), Value::from(clip.id.clone()));
    m.insert("prompt".into(), Value::from(clip.prompt.clone()));
    m.insert("class_id".into(), Value::from(clip.class_id));
    m.insert("onsets_s".into(), Value::from(clip.onsets_s.clone()));
    m.insert("video_fps".into(), Value::from(v.fps));
    m.insert("stride".into(), Value::from(v.stride));
    m.insert("latent_fps".into(), Value::from(clip.latent_fps));
    b
}

pub fn clip_from_blob(b: &Blob) -> Result<SynthClip> {
    let num = |k: &str| {
        b.meta
            .get(k)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Format(format!("clip blob missing {k}")))
    };
    let (vs, vd) = b.require("video")?;
    let (as_, ad) = b.require("a0")?;
    if vs.len() != 3 || as_.len() != 2 {
        return Err(Error::Format("clip blob tensors have wrong rank".into()));
    }
    let video = RawVideoTokens::new(vd.to_vec(), vs[0], vs[1], vs[2], num("video_fps")?, num("stride")? as usize)?;
    let a0 = LatentSequence::new(Matrix::from_vec(as_[0], as_[1], ad.to_vec())?)?;
    let onsets_s = b
        .meta
        .get("onsets_s")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("clip blob missing onsets_s".into()))?
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| Error::Format("bad onset".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthClip {
        id: b.meta_str("id").unwrap_or_default().to_string(),
        video,
        a0,
        latent_fps: num("latent_fps")?,
        onsets_s,
        prompt: b.meta_str("prompt").unwrap_or_default().to_string(),
        class_id: num("class_id")? as usize,
    })
}

pub fn write_clip(stem: &Path, clip: &SynthClip) -> Result<()> {
    clip_to_blob(clip).write(stem)
}

pub fn read_clip(stem: &Path) -> Result<SynthClip> {
    clip_from_blob(&Blob::read(stem)?)
}

/// Toy audition renderer: each latent channel drives one sinusoid of a fixed
/// bank, with amplitudes interpolated linearly between latent frames.
pub fn render_waveform(a0: &Matrix<f64>, latent_fps: f64, sample_rate: u32) -> Vec<f64> {
    let (n, d) = a0.shape();
    let n_samples = (n as f64 / latent_fps * sample_rate as f64).round() as usize;
    let freqs: Vec<f64> = (0..d).map(|k| 110.0 * 2f64.powf(k as f64 / 6.0)).collect();
    let scale = 0.5 / d as f64;
    (0..n_samples)
        .map(|i| {
            let time = i as f64 / sample_rate as f64;
            let pos = time * latent_fps;
            let f0 = (pos.floor() as usize).min(n - 1);
            let f1 = (f0 + 1).min(n - 1);
            let w = pos - f0 as f64;
            (0..d)
                .map(|k| {
                    let amp = (1.0 - w) * a0.get(f0, k) + w * a0.get(f1, k);
                    scale * amp * (std::f64::consts::TAU * freqs[k] * time).sin()
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generator() -> SynthGenerator {
        SynthGenerator::new(SynthSpec::default()).unwrap()
    }

    #[test]
    fn no_events_is_floor_and_background() {
        let g = generator();
        let c = g.clip(3, 4.0, 0, 1).unwrap();
        assert!(c.onsets_s.is_empty());
        let max = c.a0.tokens.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 0.2, "floor only, max {max}");
        assert_eq!(c.video.n_frames, 32);
        assert_eq!(c.a0.len(), 32);
    }

    #[test]
    fn events_appear_in_both_streams() {
        let g = generator();
        let c = g.clip(5, 8.0, 3, 2).unwrap();
        assert_eq!(c.onsets_s.len(), 3);
        assert!(c.onsets_s.windows(2).all(|w| w[0] < w[1]));
        for &t in &c.onsets_s {
            assert!((0.0..=8.0).contains(&t));
            let f = (t * g.spec.effective_fps()).round() as usize;
            let m = c.video.frame_mean(f);
            let quiet = c.video.frame_mean(if f == 0 { 1 } else { f - 1 });
            let dist: f64 = m.iter().zip(&quiet).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(dist > 4.0, "video bump at frame {f}");
            let l = (t * g.spec.latent_fps).round() as usize;
            let e: f64 = c.a0.tokens.row(l).iter().map(|v| v * v).sum();
            assert!(e > 10.0, "latent bump at frame {l}");
        }
        assert!(c.a0.tokens.data().iter().all(|v| (-3.0..=3.0).contains(v)));
        assert_eq!(c, g.clip(5, 8.0, 3, 2).unwrap());
        assert_ne!(c, g.clip(6, 8.0, 3, 2).unwrap());
    }

    #[test]
    fn generation_errors() {
        let g = generator();
        assert!(matches!(g.clip(0, 4.0, 33, 0), Err(Error::Generation(_))));
        assert!(matches!(g.clip(0, 13.0, 1, 0), Err(Error::Generation(_))));
        assert!(matches!(g.clip(0, 4.0, 1, 9), Err(Error::Generation(_))));
        assert!(g.clip(0, 4.0, 32, 0).is_ok());
    }

    #[test]
    fn corpus_split() {
        let spec = SynthSpec::default();
        let (tr, ev) = gen_corpus(&spec, 100, 1, 0.9).unwrap();
        assert_eq!((tr.len(), ev.len()), (90, 10));
        assert!(tr.iter().all(|r| ev.iter().all(|e| e.id != r.id)));
        assert_eq!(gen_corpus(&spec, 100, 1, 0.9).unwrap(), (tr, ev));
        assert!(matches!(gen_corpus(&spec, 1, 1, 0.9), Err(Error::Manifest(_))));
    }

    #[test]
    fn blob_roundtrip() {
        let g = generator();
        let mut c = g.clip(9, 4.0, 2, 3).unwrap();
        c.id = "x".into();
        let b = clip_to_blob(&c);
        let (h, d) = b.encode().unwrap();
        let back = clip_from_blob(&Blob::decode(&h, &d).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rendered_waveform_is_silent_only_without_events() {
        let g = generator();
        let quiet = Matrix::<f64>::zeros(32, 32);
        assert!(render_waveform(&quiet, 8.0, 8000).iter().all(|&v| v == 0.0));
        let c = g.clip(1, 4.0, 2, 0).unwrap();
        let w = render_waveform(&c.a0.tokens, 8.0, 8000);
        assert_eq!(w.len(), 32_000);
        assert!(w.iter().any(|v| v.abs() > 1e-3));
    }
}
