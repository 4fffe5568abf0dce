//! Desk-scale sync learning: fit a text-conditioned prior, freeze it, train
//! the video bridge, then compare DeSync and v-prediction error with and
//! without video on the held-out split.
//!
//! Sizes can be overridden: `PRIOR_STEPS`, `BRIDGE_STEPS`, `BATCH`, `LR`,
//! `N_CLIPS`.

use std::time::Instant;

use foley_bridge::backbone::init_backbone;
use foley_bridge::bridge::init_bridge;
use foley_bridge::config::RunConfig;
use foley_bridge::diffusion::{eval_v_mse, Adam};
use foley_bridge::eval::{evaluate, EvalConfig, Providers};
use foley_bridge::rng::RngStream;
use foley_bridge::synth::{plan_corpus, CorpusSource, Split, SynthGenerator};
use foley_bridge::train::{fit_prior, train_bridge};

fn env(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> foley_bridge::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.prior.steps = env("PRIOR_STEPS", cfg.prior.steps);
    cfg.train.steps = env("BRIDGE_STEPS", 3000);
    cfg.train.batch_size = env("BATCH", 8);
    if let Some(lr) = std::env::var("LR").ok().and_then(|v| v.parse().ok()) {
        cfg.train.lr = lr;
    }
    let n_clips = env("N_CLIPS", 2000);

    let generator = SynthGenerator::new(cfg.synth.clone())?;
    let plan = plan_corpus(&cfg.synth, n_clips, 7, 0.9)?;
    let (train, eval): (Vec<_>, Vec<_>) = plan.into_iter().partition(|e| e.split == Split::Train);
    let d_text = cfg.backbone.d_text;
    let train_src = CorpusSource::new(generator.clone(), train, cfg.pooling.clone(), d_text);
    let eval_src = CorpusSource::new(generator.clone(), eval, cfg.pooling.clone(), d_text);
    let train_set = train_src.materialize()?;
    let eval_set = eval_src.materialize()?;
    println!("clips: {} train, {} eval", train_set.len(), eval_set.len());

    let t0 = Instant::now();
    let mut backbone = init_backbone::<f64>(&cfg.backbone, cfg.seed)?;
    let log = fit_prior(&train_set, &mut backbone, &cfg.prior, cfg.seed, |r| {
        if r.step % 250 == 0 {
            println!("prior step {:5} loss {:.4}", r.step, r.loss);
        }
    })?;
    println!(
        "prior: {} steps, final loss {:.4}, {:.0} s",
        log.len(),
        log.last().map_or(f64::NAN, |r| r.loss),
        t0.elapsed().as_secs_f64()
    );

    let t0 = Instant::now();
    let mut bridge = init_bridge::<f64>(&cfg.backbone, cfg.synth.d_video, cfg.seed + 1)?;
    let mut adam = Adam::new(cfg.train.lr, &bridge);
    let mut ema = None::<f64>;
    train_bridge(&train_set, &backbone, &mut bridge, &mut adam, &cfg.train, 0..cfg.train.steps, |ev| {
        let l = ev.record.loss;
        let e = ema.map_or(l, |e| 0.98 * e + 0.02 * l);
        ema = Some(e);
        if ev.record.step % 250 == 0 {
            println!("bridge step {:5} loss {:.4} (ema {:.4})", ev.record.step, l, e);
        }
        Ok(())
    })?;
    println!("bridge: {:.0} s", t0.elapsed().as_secs_f64());

    let rng = RngStream::new(99);
    let with = eval_v_mse(&eval_set, &backbone, &bridge, true, 8, &rng)?;
    let without = eval_v_mse(&eval_set, &backbone, &bridge, false, 8, &rng)?;
    println!("eval v-MSE: with video {with:.5}, without {without:.5} ({:.1}% lower)", 100.0 * (1.0 - with / without));

    let clips = eval_src.clips()?;
    let providers = Providers::toy(&generator.bank);
    let base = EvalConfig {
        pooling: cfg.pooling.clone(),
        ..EvalConfig::default()
    };
    let cond = evaluate(&clips, &backbone, &bridge, &providers, &base)?;
    let uncond = evaluate(&clips, &backbone, &bridge, &providers, &EvalConfig { use_video: false, ..base.clone() })?;
    let truth = evaluate(&clips, &backbone, &bridge, &providers, &EvalConfig { ground_truth: true, ..base })?;
    for (name, r) in [("video, cfg 2", &cond), ("no video", &uncond), ("ground truth", &truth)] {
        print!("{name:>14}:");
        for (k, v) in &r.metrics {
            print!(" {k}={v:.4}");
        }
        println!();
    }
    Ok(())
}
