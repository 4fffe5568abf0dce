//! Command-line entry point: `gen-data`, `train`, `sample`, `eval`, `curate`.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 incompatible artifacts,
//! 1 any other failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::Value;

use crate::backbone::{encode_prompt, init_backbone, BackboneParams, LatentSequence, PROMPT_SEED};
use crate::blob::{Blob, Dtype};
use crate::bridge::{init_bridge, pool_video, BridgeParams};
use crate::config::RunConfig;
use crate::curation::{
    curate, read_manifest, write_manifest, ClipRecord, Direction, ScorerSpec, SilenceSpec, Stage,
};
use crate::diffusion::{sample, Adam, SampleConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Providers};
use crate::rng::RngStream;
use crate::synth::{plan_corpus, read_clip, render_waveform, write_clip, Split, SynthClip, SynthGenerator};
use crate::train::{fit_prior, load_checkpoint, save_checkpoint, train_bridge, StepRecord};

const RENDER_RATE: u32 = 16_000;

#[derive(Debug, Parser)]
#[command(name = "foley-bridge", version, about = "Video bridge for a frozen text-to-audio DiT")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: manifests plus one blob per clip.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        ratio: f64,
        /// Take the synth settings from this run config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit (or reuse) the frozen prior and train the bridge.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate one latent for a clip.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Clip blob stem (without extension).
        #[arg(long)]
        clip: PathBuf,
        /// Defaults to the clip's own prompt; pass "" for no text.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 2.0)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output blob stem.
        #[arg(long)]
        out: PathBuf,
        /// Also write a toy sinusoid-bank rendering as `<out>.wav`.
        #[arg(long)]
        render: bool,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Generate with the text condition absent.
        #[arg(long)]
        no_text: bool,
        /// Score the ground-truth latents against themselves.
        #[arg(long)]
        ground_truth: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a curation pipeline over a manifest.
    Curate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pipeline_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Incompatible(_) => 3,
        Error::Config(_)
        | Error::Input(_)
        | Error::Manifest(_)
        | Error::Io { .. }
        | Error::Format(_)
        | Error::Domain(_) => 2,
        _ => 1,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            n,
            seed,
            out,
            ratio,
            config,
        } => cmd_gen_data(n, seed, &out, ratio, config.as_deref()),
        Command::Train { config, resume } => cmd_train(&RunConfig::load(&config)?, resume),
        Command::Sample {
            config,
            checkpoint,
            clip,
            prompt,
            cfg_scale,
            steps,
            seed,
            out,
            render,
        } => cmd_sample(
            &RunConfig::load(&config)?,
            &SampleArgs {
                checkpoint,
                clip,
                prompt,
                cfg_scale,
                steps,
                seed,
                out,
                render,
            },
        ),
        Command::Eval {
            config,
            checkpoint,
            manifest,
            no_text,
            ground_truth,
            out,
        } => cmd_eval(
            &RunConfig::load(&config)?,
            &checkpoint,
            &manifest,
            no_text,
            ground_truth,
            &out,
        ),
        Command::Curate {
            manifest,
            pipeline_config,
            out,
        } => cmd_curate(&manifest, &pipeline_config, &out),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write the corpus under `out`: `train.jsonl`, `eval.jsonl`, `clips/`.
pub fn cmd_gen_data(n: usize, seed: u64, out: &Path, ratio: f64, config: Option<&Path>) -> Result<()> {
    let spec = match config {
        Some(p) => RunConfig::load(p)?.synth,
        None => RunConfig::default().synth,
    };
    let plan = plan_corpus(&spec, n, seed, ratio)?;
    let generator = SynthGenerator::new(spec.clone())?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for entry in &plan {
        let clip = generator.corpus_clip(entry)?;
        let media_ref = format!("clips/{}", entry.id);
        write_clip(&out.join(&media_ref), &clip)?;
        let rec = ClipRecord::pending(entry.id.clone(), spec.duration_s, media_ref);
        match entry.split {
            Split::Train => train.push(rec),
            Split::Eval => eval.push(rec),
        }
    }
    write_manifest(&out.join("train.jsonl"), &train)?;
    write_manifest(&out.join("eval.jsonl"), &eval)?;
    let info = serde_json::json!({ "n": n, "seed": seed, "ratio": ratio, "synth": spec });
    write_file(
        &out.join("corpus.json"),
        serde_json::to_string_pretty(&info).expect("json") + "\n",
    )?;
    println!("wrote {} train and {} eval clips to {}", train.len(), eval.len(), out.display());
    Ok(())
}

/// Clips of the non-dropped records of a manifest, resolved against its
/// directory.
pub fn load_manifest_clips(manifest: &Path) -> Result<Vec<SynthClip>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    records
        .iter()
        .filter(|r| !r.is_dropped())
        .map(|r| {
            let mut c = read_clip(&root.join(&r.media_ref))?;
            c.id = r.id.clone();
            Ok(c)
        })
        .collect()
}

fn backbone_stem(cfg: &RunConfig) -> PathBuf {
    cfg.paths.run_dir.join("backbone")
}

fn checkpoint_stem(cfg: &RunConfig) -> PathBuf {
    cfg.paths.run_dir.join("checkpoint")
}

/// Load the frozen backbone of a run, checking it matches `cfg`.
pub fn load_backbone(cfg: &RunConfig) -> Result<BackboneParams<f64>> {
    let stem = backbone_stem(cfg);
    let blob = Blob::read(&stem)?;
    let expect = cfg.backbone_hash()?;
    if blob.meta_str("backbone_hash") != Some(expect.as_str()) {
        return Err(Error::Incompatible(format!(
            "{} was built from a different configuration",
            stem.display()
        )));
    }
    let mut bb = init_backbone::<f64>(&cfg.backbone, cfg.seed)?;
    blob.load_params(&mut bb)?;
    Ok(bb)
}

fn fresh_bridge(cfg: &RunConfig) -> Result<BridgeParams<f64>> {
    init_bridge(&cfg.backbone, cfg.synth.d_video, cfg.seed.wrapping_add(1))
}

/// Load a bridge checkpoint, checking its configuration hash.
pub fn load_bridge(cfg: &RunConfig, stem: &Path) -> Result<(BridgeParams<f64>, usize)> {
    let ck = load_checkpoint(stem, &fresh_bridge(cfg)?)?;
    if ck.config_hash != cfg.compat_hash()? {
        return Err(Error::Incompatible(format!(
            "checkpoint {} does not match the configuration",
            stem.display()
        )));
    }
    Ok((ck.bridge, ck.step))
}

fn log_line(r: &StepRecord) -> String {
    serde_json::to_string(r).expect("record serializes") + "\n"
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let manifest = cfg.paths.data_dir.join("train.jsonl");
    let clips = load_manifest_clips(&manifest)?;
    if clips.is_empty() {
        return Err(Error::Input(format!("{} has no usable clips", manifest.display())));
    }
    let samples = clips
        .iter()
        .map(|c| c.train_sample(&cfg.pooling, cfg.backbone.d_text))
        .collect::<Result<Vec<_>>>()?;
    let run_dir = &cfg.paths.run_dir;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let compat = cfg.compat_hash()?;
    let log_path = run_dir.join("train_log.jsonl");

    let (backbone, mut bridge, mut adam, start) = if resume {
        let backbone = load_backbone(cfg)?;
        let ck = load_checkpoint(&checkpoint_stem(cfg), &fresh_bridge(cfg)?)?;
        if ck.config_hash != compat {
            return Err(Error::Incompatible(
                "checkpoint configuration hash differs from the current configuration".into(),
            ));
        }
        // Drop log lines past the checkpoint so the log matches an uninterrupted run.
        let kept: String = fs::read_to_string(&log_path)
            .unwrap_or_default()
            .lines()
            .filter(|l| {
                serde_json::from_str::<StepRecord>(l).is_ok_and(|r| r.step < ck.step)
            })
            .map(|l| format!("{l}\n"))
            .collect();
        write_file(&log_path, kept)?;
        (backbone, ck.bridge, ck.adam, ck.step)
    } else {
        let backbone = match load_backbone(cfg) {
            Ok(b) => b,
            Err(_) => {
                let mut bb = init_backbone::<f64>(&cfg.backbone, cfg.seed)?;
                let prior_log = fit_prior(&samples, &mut bb, &cfg.prior, cfg.seed, |_| {})?;
                let mut blob = Blob::new(Dtype::F64);
                blob.push_params(&bb);
                blob.meta.insert("kind".into(), Value::from("backbone"));
                blob.meta.insert("backbone_hash".into(), Value::from(cfg.backbone_hash()?));
                blob.write(&backbone_stem(cfg))?;
                let text: String = prior_log.iter().map(log_line).collect();
                write_file(&run_dir.join("prior_log.jsonl"), text)?;
                bb
            }
        };
        write_file(&log_path, "")?;
        let bridge = fresh_bridge(cfg)?;
        let adam = Adam::new(cfg.train.lr, &bridge);
        (backbone, bridge, adam, 0)
    };

    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let every = cfg.train.checkpoint_every;
    let ck_dir = run_dir.join("checkpoints");
    let end = cfg.train.steps.max(start);
    train_bridge(
        &samples,
        &backbone,
        &mut bridge,
        &mut adam,
        &cfg.train,
        start..end,
        |ev| {
            log.write_all(log_line(ev.record).as_bytes())
                .map_err(|e| Error::io(&log_path, e))?;
            let done = ev.record.step + 1;
            if every > 0 && done % every == 0 {
                save_checkpoint(&ck_dir.join(format!("step-{done:06}")), ev.bridge, ev.adam, done, &compat)?;
            }
            Ok(())
        },
    )?;
    save_checkpoint(&checkpoint_stem(cfg), &bridge, &adam, end, &compat)?;
    println!("trained steps {start}..{end}; checkpoint in {}", run_dir.display());
    Ok(())
}

struct SampleArgs {
    checkpoint: PathBuf,
    clip: PathBuf,
    prompt: Option<String>,
    cfg_scale: f64,
    steps: usize,
    seed: u64,
    out: PathBuf,
    render: bool,
}

fn cmd_sample(cfg: &RunConfig, a: &SampleArgs) -> Result<()> {
    if a.steps == 0 {
        return Err(Error::Input("--steps must be at least 1".into()));
    }
    let backbone = load_backbone(cfg)?;
    let (bridge, _) = load_bridge(cfg, &a.checkpoint)?;
    let clip = read_clip(&a.clip)?;
    let prompt = a.prompt.clone().unwrap_or_else(|| clip.prompt.clone());
    let text = encode_prompt(&prompt, cfg.backbone.d_text, PROMPT_SEED);
    let video = pool_video(&clip.video, &cfg.pooling)?;
    let sc = SampleConfig {
        n_steps: a.steps,
        cfg_scale: a.cfg_scale,
        n_frames: clip.a0.len(),
    };
    let latent = sample(&backbone, &bridge, &text, &video, &sc, &RngStream::new(a.seed))?;
    write_latent(&a.out, &latent, &prompt, a, cfg)?;
    if a.render {
        let wave = render_waveform(&latent.tokens, clip.latent_fps, RENDER_RATE);
        let mut path = a.out.as_os_str().to_owned();
        path.push(".wav");
        write_file(Path::new(&path), wav_bytes(&wave, RENDER_RATE))?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn write_latent(stem: &Path, latent: &LatentSequence<f64>, prompt: &str, a: &SampleArgs, cfg: &RunConfig) -> Result<()> {
    let mut b = Blob::new(Dtype::F32);
    let (r, c) = latent.tokens.shape();
    b.push("latent", vec![r, c], latent.tokens.data().to_vec());
    b.meta.insert("kind".into(), Value::from("latent"));
    b.meta.insert("prompt".into(), Value::from(prompt));
    b.meta.insert("cfg_scale".into(), Value::from(a.cfg_scale));
    b.meta.insert("steps".into(), Value::from(a.steps));
    b.meta.insert("seed".into(), Value::from(a.seed));
    b.meta.insert("config_hash".into(), Value::from(cfg.compat_hash()?));
    b.write(stem)
}

/// 16-bit mono PCM WAV.
fn wav_bytes(samples: &[f64], rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    no_text: bool,
    ground_truth: bool,
    out: &Path,
) -> Result<()> {
    let clips = load_manifest_clips(manifest)?;
    if clips.is_empty() {
        return Err(Error::Input(format!("{} has no clips to evaluate", manifest.display())));
    }
    let backbone = load_backbone(cfg)?;
    let (bridge, step) = load_bridge(cfg, checkpoint)?;
    let generator = SynthGenerator::new(cfg.synth.clone())?;
    let providers = Providers::toy(&generator.bank);
    let mut ecfg = cfg.eval_config(no_text);
    ecfg.ground_truth = ground_truth;
    let mut report = evaluate(&clips, &backbone, &bridge, &providers, &ecfg)?;
    report.meta.insert("run_config_hash".into(), cfg.config_hash()?);
    report.meta.insert("checkpoint_step".into(), step.to_string());
    write_file(&out.join("report.txt"), report.to_kv_text())?;
    write_file(&out.join("report.tsv"), report.to_table_row())?;
    print!("{}", report.to_table_row());
    Ok(())
}

/// Curation pipeline file: an ordered `[[stage]]` list.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineFile {
    #[serde(default)]
    stage: Vec<StageConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum StageConfig {
    Silence {
        #[serde(default = "default_rms")]
        rms_threshold: f64,
        #[serde(default = "default_active")]
        min_active_fraction: f64,
    },
    Score {
        scorer_id: String,
        threshold: f64,
        direction: Direction,
    },
}

fn default_rms() -> f64 {
    SilenceSpec::default().rms_threshold
}

fn default_active() -> f64 {
    SilenceSpec::default().min_active_fraction
}

/// Registered scorer ids.
pub const SCORERS: [&str; 2] = ["latent_energy", "av_agreement"];

fn clip_for(root: &Path, r: &ClipRecord) -> Result<SynthClip> {
    read_clip(&root.join(&r.media_ref))
}

/// RMS of the clip latent.
fn latent_energy(clip: &SynthClip) -> f64 {
    let d = clip.a0.tokens.data();
    (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
}

/// Correlation between per-frame video change and latent energy change,
/// a toy audio-visual agreement score in [-1, 1].
fn av_agreement(clip: &SynthClip) -> f64 {
    let n = clip.video.n_frames.min(clip.a0.len());
    let frame_change: Vec<f64> = (0..n)
        .map(|f| {
            let cur = clip.video.frame_mean(f);
            let prev = clip.video.frame_mean(f.saturating_sub(1));
            cur.iter().zip(&prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let energy: Vec<f64> = (0..n)
        .map(|f| clip.a0.tokens.row(f).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (mx, my) = (mean(&frame_change), mean(&energy));
    let cov: f64 = frame_change.iter().zip(&energy).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = frame_change.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = energy.iter().map(|y| (y - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn cmd_curate(manifest: &Path, pipeline: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(pipeline).map_err(|e| Error::io(pipeline, e))?;
    let file: PipelineFile = toml::from_str(&text).map_err(|e| {
        Error::Config(format!(
            "{}: {e} (registered stages: silence, score; scorers: {})",
            pipeline.display(),
            SCORERS.join(", ")
        ))
    })?;
    let records = read_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();

    let waveform = |r: &ClipRecord| -> Result<(Vec<f64>, u32)> {
        let c = clip_for(&root, r)?;
        Ok((render_waveform(&c.a0.tokens, c.latent_fps, RENDER_RATE), RENDER_RATE))
    };
    let energy = |r: &ClipRecord| -> Result<f64> { Ok(latent_energy(&clip_for(&root, r)?)) };
    let agreement = |r: &ClipRecord| -> Result<f64> { Ok(av_agreement(&clip_for(&root, r)?)) };

    let mut stages = Vec::with_capacity(file.stage.len());
    for s in file.stage {
        stages.push(match s {
            StageConfig::Silence {
                rms_threshold,
                min_active_fraction,
            } => Stage::Silence {
                spec: SilenceSpec {
                    rms_threshold,
                    min_active_fraction,
                },
                source: &waveform,
            },
            StageConfig::Score {
                scorer_id,
                threshold,
                direction,
            } => {
                let scorer: &dyn crate::curation::Scorer = match scorer_id.as_str() {
                    "latent_energy" => &energy,
                    "av_agreement" => &agreement,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown scorer {other:?}; registered scorers: {}",
                            SCORERS.join(", ")
                        )))
                    }
                };
                Stage::Score {
                    spec: ScorerSpec {
                        scorer_id,
                        threshold,
                        direction,
                    },
                    scorer,
                }
            }
        });
    }
    let (curated, summary) = curate(&records, &stages)?;
    // Media references stay relative, now to the output directory.
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let prefix = relative_path(out, &root)?;
    let curated: Vec<ClipRecord> = curated
        .into_iter()
        .map(|mut r| {
            r.media_ref = join_ref(&prefix, &r.media_ref);
            r
        })
        .collect();
    write_manifest(&out.join("curated.jsonl"), &curated)?;
    write_file(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("json") + "\n",
    )?;
    println!("kept {} of {} records", summary.kept, summary.input);
    Ok(())
}

/// Path of `to` relative to directory `from`; both must exist.
fn relative_path(from: &Path, to: &Path) -> Result<PathBuf> {
    let from = fs::canonicalize(from).map_err(|e| Error::io(from, e))?;
    let to = fs::canonicalize(to).map_err(|e| Error::io(to, e))?;
    let a: Vec<_> = from.components().collect();
    let b: Vec<_> = to.components().collect();
    let common = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut rel = PathBuf::new();
    for _ in common..a.len() {
        rel.push("..");
    }
    for c in &b[common..] {
        rel.push(c);
    }
    Ok(rel)
}

fn join_ref(prefix: &Path, media_ref: &str) -> String {
    if prefix.as_os_str().is_empty() || Path::new(media_ref).is_absolute() {
        media_ref.to_string()
    } else {
        prefix.join(media_ref).to_string_lossy().replace('\\', "/")
    }
}
