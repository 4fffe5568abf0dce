//! Frame pooling (one token per effective frame) against grid8 pooling
//! (64 tokens per frame) with identical seeds and step counts, scored by
//! KL-PANNs without text prompts.
//!
//! Sizes can be overridden: `PRIOR_STEPS`, `BRIDGE_STEPS`, `N_CLIPS`.

use std::time::Instant;

use foley_bridge::backbone::{init_backbone, TextTokens};
use foley_bridge::bridge::{init_bridge, PoolingMode, PoolingSpec};
use foley_bridge::config::RunConfig;
use foley_bridge::diffusion::Adam;
use foley_bridge::eval::{evaluate, EvalConfig, Providers};
use foley_bridge::synth::{plan_corpus, CorpusSource, Split, SynthGenerator};
use foley_bridge::train::{fit_prior, train_bridge};

fn env(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> foley_bridge::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.prior.steps = env("PRIOR_STEPS", cfg.prior.steps);
    cfg.train.steps = env("BRIDGE_STEPS", 600);
    cfg.train.batch_size = 8;
    let n_clips = env("N_CLIPS", 400);

    let generator = SynthGenerator::new(cfg.synth.clone())?;
    let plan = plan_corpus(&cfg.synth, n_clips, 7, 0.9)?;
    let (train, eval): (Vec<_>, Vec<_>) = plan.into_iter().partition(|e| e.split == Split::Train);
    let d_text = cfg.backbone.d_text;

    let prior_set = CorpusSource::new(generator.clone(), train.clone(), cfg.pooling.clone(), d_text).materialize()?;
    let mut backbone = init_backbone::<f64>(&cfg.backbone, cfg.seed)?;
    fit_prior(&prior_set, &mut backbone, &cfg.prior, cfg.seed, |_| {})?;
    let eval_clips = CorpusSource::new(generator.clone(), eval, cfg.pooling.clone(), d_text).clips()?;
    let providers = Providers::toy(&generator.bank);

    for mode in [PoolingMode::Frame, PoolingMode::Grid8] {
        let t0 = Instant::now();
        let pooling = PoolingSpec { mode, ..cfg.pooling.clone() };
        let mut set = CorpusSource::new(generator.clone(), train.clone(), pooling.clone(), d_text).materialize()?;
        for s in &mut set {
            s.text = TextTokens::absent(d_text);
        }
        let tokens = set[0].video.len();
        let mut bridge = init_bridge::<f64>(&cfg.backbone, cfg.synth.d_video, cfg.seed + 1)?;
        let mut adam = Adam::new(cfg.train.lr, &bridge);
        let log = train_bridge(&set, &backbone, &mut bridge, &mut adam, &cfg.train, 0..cfg.train.steps, |_| Ok(()))?;
        let ecfg = EvalConfig {
            no_text: true,
            pooling,
            metrics: vec!["KL-PANNs".into(), "DeSync".into()],
            ..EvalConfig::default()
        };
        let report = evaluate(&eval_clips, &backbone, &bridge, &providers, &ecfg)?;
        println!(
            "{mode:?}: {tokens} tokens per clip, final loss {:.4}, KL-PANNs {:.4}, DeSync {:.4}, {:.0} s",
            log.last().map_or(f64::NAN, |r| r.loss),
            report.metrics["KL-PANNs"],
            report.metrics["DeSync"],
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
