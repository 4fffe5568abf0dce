//! Synthetic paired clips: events appear in the video tokens and as onsets in
//! the latent, and the detector recovers them from the clean latent.

use foley_bridge::bridge::pool_video;
use foley_bridge::config::RunConfig;
use foley_bridge::eval::onset_detect;
use foley_bridge::synth::{gen_corpus, SynthGenerator};

fn main() -> foley_bridge::Result<()> {
    let cfg = RunConfig::default();
    let generator = SynthGenerator::new(cfg.synth.clone())?;
    for (seed, events) in [(1u64, 0usize), (2, 1), (3, 3)] {
        let clip = generator.clip(seed, 8.0, events, seed as usize % 4)?;
        let pooled = pool_video(&clip.video, &cfg.pooling)?;
        let found = onset_detect(&clip.a0.tokens, cfg.eval.onset_threshold, clip.latent_fps);
        println!(
            "{:<8} {} events: truth {:?}, detected {:?}, {} video tokens",
            clip.prompt,
            events,
            clip.onsets_s,
            found,
            pooled.len()
        );
    }
    let (train, eval) = gen_corpus(&cfg.synth, 100, 1, 0.9)?;
    println!("corpus of 100: {} train, {} eval; first eval id {}", train.len(), eval.len(), eval[0].id);
    Ok(())
}
