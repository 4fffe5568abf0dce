//! Curation over a synthetic manifest: a silence stage on rendered clips,
//! then a quality threshold, with per-stage counts and drop reasons.

use foley_bridge::config::RunConfig;
use foley_bridge::curation::{curate, ClipRecord, Direction, ScorerSpec, SilenceSpec, Stage};
use foley_bridge::synth::{render_waveform, SynthGenerator};

const RATE: u32 = 16_000;

fn main() -> foley_bridge::Result<()> {
    let generator = SynthGenerator::new(RunConfig::default().synth)?;
    // Every fifth clip has no events, so its rendering is silent.
    let clips = (0..40u64)
        .map(|i| generator.clip(i, 4.0, if i % 5 == 0 { 0 } else { 1 + i as usize % 3 }, i as usize % 4))
        .collect::<foley_bridge::Result<Vec<_>>>()?;
    let manifest: Vec<ClipRecord> = (0..clips.len())
        .map(|i| ClipRecord::pending(format!("clip-{i:03}"), 4.0, format!("clips/clip-{i:03}")))
        .collect();
    let index = |r: &ClipRecord| r.id[5..].parse::<usize>().expect("numeric id");

    let waveform = |r: &ClipRecord| -> foley_bridge::Result<(Vec<f64>, u32)> {
        let c = &clips[index(r)];
        Ok((render_waveform(&c.a0.tokens, c.latent_fps, RATE), RATE))
    };
    let peak = |r: &ClipRecord| -> foley_bridge::Result<f64> {
        Ok(clips[index(r)].a0.tokens.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
    };
    let stages = [
        // The rendered noise floor sits near 1.2e-3 RMS, so the gate goes above it.
        Stage::Silence { spec: SilenceSpec { rms_threshold: 5e-3, ..SilenceSpec::default() }, source: &waveform },
        Stage::Score {
            spec: ScorerSpec { scorer_id: "peak".into(), threshold: 0.8, direction: Direction::KeepAbove },
            scorer: &peak,
        },
    ];
    let (curated, summary) = curate(&manifest, &stages)?;
    for s in &summary.stages {
        println!("{:<12} dropped {:>3}, remaining {:>3}", s.stage, s.dropped, s.remaining);
    }
    println!("kept {} of {}", summary.kept, summary.input);
    for r in curated.iter().filter(|r| r.is_dropped()).take(5) {
        println!("  {} dropped: {}", r.id, r.drop_reason.as_deref().unwrap_or("?"));
    }
    let (_, again) = curate(&curated, &stages)?;
    println!("second pass drops {}", again.stages.iter().map(|s| s.dropped).sum::<usize>());
    Ok(())
}
