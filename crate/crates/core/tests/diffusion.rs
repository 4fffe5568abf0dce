mod common;

use common::{gaussian, small_config, D_VIDEO};
use foley_bridge::backbone::{encode_prompt, init_backbone, LatentSequence};
use foley_bridge::bridge::{init_bridge, VideoTokens};
use foley_bridge::diffusion::{draw_token_drop, sample, training_step, Adam, SampleConfig, TrainConfig, TrainSample};
use foley_bridge::rng::RngStream;

fn batch(n: usize, seed: u64) -> Vec<TrainSample<f64>> {
    let cfg = small_config();
    (0..n as u64)
        .map(|i| TrainSample {
            a0: LatentSequence::new(gaussian(8, cfg.d_model, seed + 3 * i)).unwrap(),
            text: encode_prompt("knock", cfg.d_text, 0),
            video: VideoTokens::new(gaussian(4, D_VIDEO, seed + 3 * i + 1), vec![0, 2, 4, 6]).unwrap(),
        })
        .collect()
}

#[test]
fn training_on_a_fixed_batch_halves_the_loss() {
    let cfg = small_config();
    let backbone = init_backbone::<f64>(&cfg, 1).unwrap();
    let mut bridge = init_bridge::<f64>(&cfg, D_VIDEO, 2).unwrap();
    let data = batch(4, 10);
    let tc = TrainConfig { token_drop_p: 0.0, lr: 1e-2, ..Default::default() };
    let rng = RngStream::new(5);
    let mut adam = Adam::new(tc.lr, &bridge);
    let first = training_step(&data, &backbone, &bridge, &tc, &rng).unwrap().loss;
    let mut last = first;
    for _ in 0..500 {
        let out = training_step(&data, &backbone, &bridge, &tc, &rng).unwrap();
        last = out.loss;
        adam.update(&mut bridge, &out.grads);
    }
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn full_token_drop_trains_unconditionally() {
    let cfg = small_config();
    let backbone = init_backbone::<f64>(&cfg, 1).unwrap();
    let bridge = init_bridge::<f64>(&cfg, D_VIDEO, 2).unwrap();
    let data = batch(6, 20);
    let tc = TrainConfig { token_drop_p: 1.0, ..Default::default() };
    let out = training_step(&data, &backbone, &bridge, &tc, &RngStream::new(1)).unwrap();
    assert_eq!(out.drop_count, 6);
    let mut stripped = data.clone();
    stripped.iter_mut().for_each(|s| s.video = VideoTokens::absent(D_VIDEO));
    let bare = training_step(&stripped, &backbone, &bridge, &tc, &RngStream::new(1)).unwrap();
    assert_eq!(out.per_sample, bare.per_sample);
}

#[test]
fn token_drop_rate_is_near_p() {
    let rng = RngStream::new(1);
    let dropped = (0..10_000u64).filter(|&i| draw_token_drop(&rng, i, 0.1)).count();
    let rate = dropped as f64 / 10_000.0;
    assert!((0.08..=0.12).contains(&rate), "{rate}");
    // Binomial 3σ band.
    assert!((rate - 0.1).abs() <= 3.0 * (0.1f64 * 0.9 / 10_000.0).sqrt());
}

#[test]
fn sampler_is_deterministic_and_seed_sensitive() {
    let cfg = small_config();
    let backbone = init_backbone::<f64>(&cfg, 1).unwrap();
    let bridge = init_bridge::<f64>(&cfg, D_VIDEO, 2).unwrap();
    let s = &batch(1, 30)[0];
    let sc = SampleConfig { n_steps: 10, cfg_scale: 2.0, n_frames: 8 };
    let a = sample(&backbone, &bridge, &s.text, &s.video, &sc, &RngStream::new(4)).unwrap();
    let b = sample(&backbone, &bridge, &s.text, &s.video, &sc, &RngStream::new(4)).unwrap();
    let c = sample(&backbone, &bridge, &s.text, &s.video, &sc, &RngStream::new(5)).unwrap();
    assert_eq!(a, b);
    assert!(a.tokens.max_abs_diff(&c.tokens) > 1e-3);
    assert!(sample(&backbone, &bridge, &s.text, &s.video, &SampleConfig { n_steps: 0, ..sc }, &RngStream::new(4)).is_err());
}
