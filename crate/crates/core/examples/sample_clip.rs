//! Short end-to-end run: fit a small prior, train the bridge briefly, then
//! sample one held-out clip with and without video and compare onsets.
//!
//! Step counts can be overridden: `PRIOR_STEPS`, `BRIDGE_STEPS`.

use foley_bridge::backbone::{encode_prompt, init_backbone, PROMPT_SEED};
use foley_bridge::bridge::{init_bridge, pool_video, VideoTokens};
use foley_bridge::config::RunConfig;
use foley_bridge::diffusion::{sample, Adam, SampleConfig};
use foley_bridge::eval::{desync, onset_detect};
use foley_bridge::rng::RngStream;
use foley_bridge::synth::{plan_corpus, CorpusSource, Split, SynthGenerator};
use foley_bridge::train::{fit_prior, train_bridge};

fn env(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> foley_bridge::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.prior.steps = env("PRIOR_STEPS", 600);
    cfg.train.steps = env("BRIDGE_STEPS", 800);
    cfg.train.batch_size = 8;
    let generator = SynthGenerator::new(cfg.synth.clone())?;
    let (train, eval): (Vec<_>, Vec<_>) =
        plan_corpus(&cfg.synth, 300, 7, 0.9)?.into_iter().partition(|e| e.split == Split::Train);
    let d_text = cfg.backbone.d_text;
    let set = CorpusSource::new(generator.clone(), train, cfg.pooling.clone(), d_text).materialize()?;

    let mut backbone = init_backbone::<f64>(&cfg.backbone, cfg.seed)?;
    fit_prior(&set, &mut backbone, &cfg.prior, cfg.seed, |_| {})?;
    let mut bridge = init_bridge::<f64>(&cfg.backbone, cfg.synth.d_video, cfg.seed + 1)?;
    let mut adam = Adam::new(cfg.train.lr, &bridge);
    let log = train_bridge(&set, &backbone, &mut bridge, &mut adam, &cfg.train, 0..cfg.train.steps, |_| Ok(()))?;
    println!("bridge loss {:.4} -> {:.4}", log[0].loss, log[log.len() - 1].loss);

    let clip = generator.corpus_clip(&eval[0])?;
    let text = encode_prompt(&clip.prompt, d_text, PROMPT_SEED);
    let video = pool_video(&clip.video, &cfg.pooling)?;
    let sc = SampleConfig { n_steps: 20, cfg_scale: 2.0, n_frames: clip.a0.len() };
    let rng = RngStream::new(11);
    let with = sample(&backbone, &bridge, &text, &video, &sc, &rng)?;
    let without = sample(&backbone, &bridge, &text, &VideoTokens::absent(cfg.synth.d_video), &sc, &rng)?;
    let th = cfg.eval.onset_threshold;
    let on_with = onset_detect(&with.tokens, th, clip.latent_fps);
    let on_without = onset_detect(&without.tokens, th, clip.latent_fps);
    println!("{} clip, true onsets {:?}", clip.prompt, clip.onsets_s);
    println!("with video:    {on_with:?}, DeSync {:.3}", desync(&on_with, &clip.onsets_s));
    println!("without video: {on_without:?}, DeSync {:.3}", desync(&on_without, &clip.onsets_s));
    Ok(())
}
